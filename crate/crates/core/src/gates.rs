//! Truncated-Fock gate matrices built by exponentiating truncated generators.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::fock::{CutoffDim, DensityMatrix, Mode};
use crate::linalg::{self, c, CMatrix, C64, I, ONE, ZERO};
use crate::{Error, Result};

/// Truncated annihilation and creation matrices.
#[derive(Debug, Clone)]
pub struct LadderOps {
    pub cutoff: CutoffDim,
    pub a: CMatrix,
    pub adag: CMatrix,
}

impl LadderOps {
    pub fn new(cutoff: CutoffDim) -> Self {
        let n = cutoff.get();
        let mut a = CMatrix::zeros(n, n);
        for k in 1..n {
            a[(k - 1, k)] = c((k as f64).sqrt());
        }
        let adag = a.adjoint();
        LadderOps { cutoff, a, adag }
    }

    pub fn number(&self) -> CMatrix {
        number_diag(self.cutoff.get(), |n| n as f64)
    }
}

fn number_diag(n: usize, f: impl Fn(usize) -> f64) -> CMatrix {
    CMatrix::from_fn(n, n, |i, j| if i == j { c(f(i)) } else { ZERO })
}

/// Operator on one or two truncated qumodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    arity: usize,
    cutoff: CutoffDim,
    data: CMatrix,
}

impl GateMatrix {
    pub fn from_matrix(arity: usize, cutoff: CutoffDim, data: CMatrix) -> Result<Self> {
        if arity != 1 && arity != 2 {
            return Err(Error::Shape(format!("gate arity {arity}")));
        }
        let dim = cutoff.get().pow(arity as u32);
        if data.nrows() != dim || data.ncols() != dim {
            return Err(Error::Shape(format!("{}x{} gate for arity {arity}", data.nrows(), data.ncols())));
        }
        Ok(GateMatrix { arity, cutoff, data })
    }

    pub fn identity(arity: usize, cutoff: CutoffDim) -> Self {
        let dim = cutoff.get().pow(arity as u32);
        GateMatrix { arity, cutoff, data: linalg::identity(dim) }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn cutoff(&self) -> CutoffDim {
        self.cutoff
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }

    pub fn into_matrix(self) -> CMatrix {
        self.data
    }

    /// `self · other` (other applied first).
    pub fn compose(&self, other: &GateMatrix) -> Result<GateMatrix> {
        if self.arity != other.arity {
            return Err(Error::Shape("composing gates of different arity".into()));
        }
        if self.cutoff != other.cutoff {
            return Err(Error::CutoffMismatch(self.cutoff.get(), other.cutoff.get()));
        }
        Ok(GateMatrix { arity: self.arity, cutoff: self.cutoff, data: linalg::matmul(&self.data, &other.data) })
    }

    pub fn adjoint(&self) -> GateMatrix {
        GateMatrix { arity: self.arity, cutoff: self.cutoff, data: self.data.adjoint() }
    }

    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.data.ncols()).map(|j| self.data.column(j).norm()).collect()
    }
}

fn single(cutoff: CutoffDim, data: CMatrix) -> GateMatrix {
    GateMatrix { arity: 1, cutoff, data }
}

fn exp_single(cutoff: CutoffDim, gen: &CMatrix) -> GateMatrix {
    single(cutoff, linalg::expm(gen).expect("finite generator"))
}

/// α↠− α*â
pub fn displacement_generator(alpha: C64, cutoff: CutoffDim) -> CMatrix {
    let l = LadderOps::new(cutoff);
    l.adag.map(|z| z * alpha) - l.a.map(|z| z * alpha.conj())
}

/// (â² − â†²)/2, so that S(r) = exp(r · generator).
pub fn squeeze_generator(cutoff: CutoffDim) -> CMatrix {
    let l = LadderOps::new(cutoff);
    let a2 = linalg::matmul(&l.a, &l.a);
    (&a2 - a2.adjoint()).map(|z| z * 0.5)
}

pub fn displacement(alpha: C64, cutoff: CutoffDim) -> GateMatrix {
    if alpha == ZERO {
        return GateMatrix::identity(1, cutoff);
    }
    exp_single(cutoff, &displacement_generator(alpha, cutoff))
}

/// Exact diagonal e^{iφn}.
pub fn rotation(phi: f64, cutoff: CutoffDim) -> GateMatrix {
    single(cutoff, number_diag_c(cutoff.get(), |n| C64::from_polar(1.0, phi * n as f64)))
}

/// Exact diagonal e^{iκn²}.
pub fn kerr(kappa: f64, cutoff: CutoffDim) -> GateMatrix {
    single(cutoff, number_diag_c(cutoff.get(), |n| C64::from_polar(1.0, kappa * (n * n) as f64)))
}

fn number_diag_c(n: usize, f: impl Fn(usize) -> C64) -> CMatrix {
    CMatrix::from_fn(n, n, |i, j| if i == j { f(i) } else { ZERO })
}

/// exp((r/2)(â² − â†²)); x-variance of S(r)|0⟩ is e^{−2r}/2.
pub fn squeeze(r: f64, cutoff: CutoffDim) -> GateMatrix {
    if r == 0.0 {
        return GateMatrix::identity(1, cutoff);
    }
    exp_single(cutoff, &squeeze_generator(cutoff).map(|z| z * r))
}

/// Basis states of the two-mode space grouped by total photon number.
fn photon_blocks(c_dim: usize) -> Vec<Vec<(usize, usize)>> {
    (0..=2 * (c_dim - 1))
        .map(|total| {
            let lo = total.saturating_sub(c_dim - 1);
            let hi = total.min(c_dim - 1);
            (lo..=hi).map(|na| (na, total - na)).collect()
        })
        .collect()
}

/// θ(e^{iφ} â b̂† − e^{−iφ} â† b̂) on the two-mode space.
pub fn beamsplitter_generator(theta: f64, phi: f64, cutoff: CutoffDim) -> CMatrix {
    let fwd = C64::from_polar(theta, phi);
    hopping(fwd, -fwd.conj(), cutoff)
}

/// `fwd · â b̂† + back · â† b̂`
fn hopping(fwd: C64, back: C64, cutoff: CutoffDim) -> CMatrix {
    let c_dim = cutoff.get();
    let dim = c_dim * c_dim;
    let mut g = CMatrix::zeros(dim, dim);
    for na in 1..c_dim {
        for nb in 0..c_dim - 1 {
            // â b̂† |na, nb⟩ = √na √(nb+1) |na−1, nb+1⟩
            let amp = ((na * (nb + 1)) as f64).sqrt();
            let from = na * c_dim + nb;
            let to = (na - 1) * c_dim + nb + 1;
            g[(to, from)] += fwd * amp;
            g[(from, to)] += back * amp;
        }
    }
    g
}

/// Beamsplitter exp(θ(e^{iφ} â b̂† − e^{−iφ} â† b̂)). The generator conserves
/// n_A + n_B, so each photon-number block is exponentiated separately.
pub fn beamsplitter_by_angle(theta: f64, phi: f64, cutoff: CutoffDim) -> GateMatrix {
    let c_dim = cutoff.get();
    let dim = c_dim * c_dim;
    if theta == 0.0 {
        return GateMatrix::identity(2, cutoff);
    }
    let gen = beamsplitter_generator(theta, phi, cutoff);
    let mut u = CMatrix::zeros(dim, dim);
    for block in photon_blocks(c_dim) {
        let idx: Vec<usize> = block.iter().map(|(na, nb)| na * c_dim + nb).collect();
        let sub = CMatrix::from_fn(idx.len(), idx.len(), |i, j| gen[(idx[i], idx[j])]);
        let e = linalg::expm(&sub).expect("finite generator");
        for (i, &r) in idx.iter().enumerate() {
            for (j, &col) in idx.iter().enumerate() {
                u[(r, col)] = e[(i, j)];
            }
        }
    }
    GateMatrix { arity: 2, cutoff, data: u }
}

/// The beamsplitter restricted to total photon number `total`, without any
/// truncation: entry (i, m) is ⟨i, total−i| BS |m, total−m⟩.
pub fn beamsplitter_photon_block(theta: f64, phi: f64, total: usize) -> CMatrix {
    let n = total + 1;
    let mut g = CMatrix::zeros(n, n);
    let fwd = C64::from_polar(theta, phi);
    for na in 1..=total {
        let amp = ((na * (total - na + 1)) as f64).sqrt();
        g[(na - 1, na)] += fwd * amp;
        g[(na, na - 1)] -= fwd.conj() * amp;
    }
    if theta == 0.0 {
        return linalg::identity(n);
    }
    linalg::expm(&g).expect("finite generator")
}

/// Beamsplitter with η = cos²θ and φ = 0: â → √η â + √(1−η) b̂,
/// b̂ → −√(1−η) â + √η b̂.
pub fn beamsplitter_by_transmissivity(eta: f64, cutoff: CutoffDim) -> Result<GateMatrix> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::OutOfRange(format!("transmissivity {eta} outside [0, 1]")));
    }
    Ok(beamsplitter_by_angle(eta.sqrt().acos(), 0.0, cutoff))
}

pub fn embed_single_mode(u: &GateMatrix, target: Mode, cutoff: CutoffDim) -> Result<GateMatrix> {
    if u.arity != 1 {
        return Err(Error::Shape("embed_single_mode needs a single-mode gate".into()));
    }
    if u.cutoff != cutoff {
        return Err(Error::CutoffMismatch(u.cutoff.get(), cutoff.get()));
    }
    let id = linalg::identity(cutoff.get());
    let data = match target {
        Mode::A => linalg::kron(&u.data, &id),
        Mode::B => linalg::kron(&id, &u.data),
    };
    Ok(GateMatrix { arity: 2, cutoff, data })
}

/// u ρ u†
pub fn conjugate(rho: &DensityMatrix, u: &GateMatrix) -> Result<DensityMatrix> {
    if rho.modes() != u.arity {
        return Err(Error::Shape(format!("{}-mode state with {}-mode gate", rho.modes(), u.arity)));
    }
    if rho.cutoff() != u.cutoff {
        return Err(Error::CutoffMismatch(rho.cutoff().get(), u.cutoff.get()));
    }
    let data = conjugate_hermitian(rho.matrix(), &u.data);
    DensityMatrix::from_matrix_unchecked(rho.modes(), rho.cutoff(), data)
}

/// `u h u†` for Hermitian `h`, arranged so that sparsity in `u` is skipped
/// and the result is exactly Hermitian.
pub(crate) fn conjugate_hermitian(h: &CMatrix, u: &CMatrix) -> CMatrix {
    let ud = u.adjoint();
    // h u† = (u h)†, so u h u† = (h u†)† u†
    let hu = linalg::matmul(h, &ud);
    let out = linalg::matmul(&hu.adjoint(), &ud);
    linalg::hermitian_part(&out)
}

/// Parameter with respect to which a gate is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    DRe,
    DIm,
    R,
    S,
    BsTheta,
    BsPhi,
    K,
}

impl GateKind {
    fn n_params(self) -> usize {
        match self {
            GateKind::DRe | GateKind::DIm | GateKind::BsTheta | GateKind::BsPhi => 2,
            _ => 1,
        }
    }
}

fn check_params(kind: GateKind, params: &[f64]) -> Result<()> {
    if params.len() != kind.n_params() {
        return Err(Error::Shape(format!(
            "{kind:?} takes {} parameter(s), got {}",
            kind.n_params(),
            params.len()
        )));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("{kind:?} parameters")));
    }
    Ok(())
}

/// Derivative of the gate exponent with respect to the parameter named by
/// `kind`. Parameters: D `[re, im]`, BS `[θ, φ]`, otherwise a single value.
///
/// For R, K, S and BS_θ the exponent is linear in the parameter and commutes
/// with its derivative, so ∂U/∂p = G·U. Displacement with both components
/// non-zero and BS_φ need [`gate_derivative`].
pub fn gate_generator(kind: GateKind, params: &[f64], cutoff: CutoffDim) -> Result<CMatrix> {
    check_params(kind, params)?;
    let n = cutoff.get();
    Ok(match kind {
        GateKind::R => number_diag_c(n, |k| I * k as f64),
        GateKind::K => number_diag_c(n, |k| I * (k * k) as f64),
        GateKind::S => squeeze_generator(cutoff),
        GateKind::DRe => displacement_generator(ONE, cutoff),
        GateKind::DIm => displacement_generator(I, cutoff),
        GateKind::BsTheta => beamsplitter_generator(1.0, params[1], cutoff),
        GateKind::BsPhi => {
            let fwd = C64::from_polar(params[0], params[1]);
            hopping(I * fwd, I * fwd.conj(), cutoff)
        }
    })
}

/// Gate matrix and its exact derivative with respect to one parameter.
pub fn gate_derivative(kind: GateKind, params: &[f64], cutoff: CutoffDim) -> Result<(CMatrix, CMatrix)> {
    check_params(kind, params)?;
    let n = cutoff.get();
    Ok(match kind {
        GateKind::R | GateKind::K => {
            let u = if kind == GateKind::R { rotation(params[0], cutoff) } else { kerr(params[0], cutoff) };
            let g = gate_generator(kind, params, cutoff)?;
            let du = linalg::matmul(&g, u.matrix());
            (u.into_matrix(), du)
        }
        GateKind::S => {
            let u = squeeze(params[0], cutoff).into_matrix();
            let du = linalg::matmul(&squeeze_generator(cutoff), &u);
            (u, du)
        }
        GateKind::DRe | GateKind::DIm => {
            let alpha = C64::new(params[0], params[1]);
            let dir = if kind == GateKind::DRe { ONE } else { I };
            linalg::expm_frechet(
                &displacement_generator(alpha, cutoff),
                &displacement_generator(dir, cutoff),
            )?
        }
        GateKind::BsTheta => {
            let u = beamsplitter_by_angle(params[0], params[1], cutoff).into_matrix();
            let du = linalg::matmul(&beamsplitter_generator(1.0, params[1], cutoff), &u);
            (u, du)
        }
        GateKind::BsPhi => {
            // BS(θ, φ) = R_A(−φ) BS(θ, 0) R_A(φ)
            let u = beamsplitter_by_angle(params[0], params[1], cutoff).into_matrix();
            let na: Vec<f64> = (0..n * n).map(|k| (k / n) as f64).collect();
            let du = CMatrix::from_fn(n * n, n * n, |i, j| I * u[(i, j)] * (na[j] - na[i]));
            (u, du)
        }
    })
}

pub(crate) fn gate_for(kind: GateKind, params: &[f64], cutoff: CutoffDim) -> Result<GateMatrix> {
    check_params(kind, params)?;
    Ok(match kind {
        GateKind::DRe | GateKind::DIm => displacement(C64::new(params[0], params[1]), cutoff),
        GateKind::R => rotation(params[0], cutoff),
        GateKind::S => squeeze(params[0], cutoff),
        GateKind::K => kerr(params[0], cutoff),
        GateKind::BsTheta | GateKind::BsPhi => beamsplitter_by_angle(params[0], params[1], cutoff),
    })
}

type CacheKey = (GateKind, Vec<u64>, usize);

/// Memoized gates keyed by (kind, parameter bits, cutoff). Reads share a lock;
/// inserts take the write lock.
#[derive(Debug, Default)]
pub struct GateCache {
    map: RwLock<HashMap<CacheKey, Arc<GateMatrix>>>,
}

impl GateCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, kind: GateKind, params: &[f64], cutoff: CutoffDim) -> Result<Arc<GateMatrix>> {
        let key = (kind, params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(), cutoff.get());
        if let Some(g) = self.map.read().expect("gate cache poisoned").get(&key) {
            return Ok(g.clone());
        }
        let gate = Arc::new(gate_for(kind, params, cutoff)?);
        let mut w = self.map.write().expect("gate cache poisoned");
        Ok(w.entry(key).or_insert(gate).clone())
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("gate cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Applies single-mode operators to two-mode matrices through their
/// Kronecker structure, avoiding the full c² × c² product.
pub(crate) mod kron_apply {
    use super::*;

    /// (u ⊗ I) m or (I ⊗ u) m
    pub fn left(u: &CMatrix, target: Mode, m: &CMatrix) -> CMatrix {
        let c_dim = u.nrows();
        let cols = m.ncols();
        let mut out = CMatrix::zeros(m.nrows(), cols);
        let ms = m.as_slice();
        let rows = m.nrows();
        let os = out.as_mut_slice();
        for col in 0..cols {
            let mc = &ms[col * rows..(col + 1) * rows];
            let oc = &mut os[col * rows..(col + 1) * rows];
            for k in 0..c_dim {
                for i in 0..c_dim {
                    let w = u[(i, k)];
                    if w == ZERO {
                        continue;
                    }
                    match target {
                        Mode::A => {
                            let src = &mc[k * c_dim..(k + 1) * c_dim];
                            let dst = &mut oc[i * c_dim..(i + 1) * c_dim];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += w * s;
                            }
                        }
                        Mode::B => {
                            for a in 0..c_dim {
                                oc[a * c_dim + i] += w * mc[a * c_dim + k];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// m (u ⊗ I) or m (I ⊗ u)
    pub fn right(m: &CMatrix, u: &CMatrix, target: Mode) -> CMatrix {
        let c_dim = u.nrows();
        let rows = m.nrows();
        let mut out = CMatrix::zeros(rows, m.ncols());
        let ms = m.as_slice();
        let os = out.as_mut_slice();
        for ja in 0..c_dim {
            for jb in 0..c_dim {
                let j = ja * c_dim + jb;
                let oc = &mut os[j * rows..(j + 1) * rows];
                for k in 0..c_dim {
                    let (w, src_col) = match target {
                        Mode::A => (u[(k, ja)], k * c_dim + jb),
                        Mode::B => (u[(k, jb)], ja * c_dim + k),
                    };
                    if w == ZERO {
                        continue;
                    }
                    let mc = &ms[src_col * rows..(src_col + 1) * rows];
                    for (d, s) in oc.iter_mut().zip(mc) {
                        *d += s * w;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{self, Quadrature};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn cut(c: usize) -> CutoffDim {
        CutoffDim::new(c).unwrap()
    }

    fn apply(u: &GateMatrix, k: &fock::Ket) -> nalgebra::DVector<C64> {
        u.matrix() * k.amplitudes()
    }

    fn overlap_sq(a: &nalgebra::DVector<C64>, b: &nalgebra::DVector<C64>) -> f64 {
        a.dotc(b).norm_sqr()
    }

    /// Two-mode Heisenberg operators on the first `keep` levels per mode.
    fn low_block(m: &CMatrix, c_dim: usize, keep: usize) -> CMatrix {
        let idx: Vec<usize> = (0..c_dim * c_dim).filter(|k| k / c_dim < keep && k % c_dim < keep).collect();
        CMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
    }

    #[test]
    fn ladder_commutator() {
        let l = LadderOps::new(cut(6));
        let comm = linalg::matmul(&l.a, &l.adag) - linalg::matmul(&l.adag, &l.a);
        for k in 0..5 {
            assert_abs_diff_eq!(comm[(k, k)].re, 1.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(comm[(5, 5)].re, -5.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_parameters_give_identity() {
        let cd = cut(7);
        let id1 = linalg::identity(7);
        for g in [
            displacement(ZERO, cd),
            rotation(0.0, cd),
            squeeze(0.0, cd),
            kerr(0.0, cd),
        ] {
            assert_eq!(g.matrix(), &id1);
        }
        assert_eq!(beamsplitter_by_transmissivity(1.0, cd).unwrap().matrix(), &linalg::identity(49));
        assert_eq!(beamsplitter_by_angle(0.0, 0.3, cd).matrix(), &linalg::identity(49));
    }

    #[test]
    fn displacement_generates_coherent_state() {
        let cd = cut(20);
        let vac = fock::fock_ket(0, cd).unwrap();
        let out = apply(&displacement(c(1.0), cd), &vac);
        let coh = fock::make_coherent(c(1.0), cd);
        assert!(overlap_sq(&out, coh.amplitudes()) >= 1.0 - 1e-8);

        let alpha = C64::new(0.6, -0.4);
        let prod = linalg::matmul(displacement(alpha, cd).matrix(), displacement(-alpha, cd).matrix());
        let low = prod.view((0, 0), (8, 8)).into_owned();
        assert!(linalg::max_abs_diff(&low, &linalg::identity(8)) < 1e-8);
    }

    #[test]
    fn rotation_properties() {
        let cd = cut(20);
        let alpha = C64::new(0.8, 0.3);
        let out = apply(&rotation(PI, cd), &fock::make_coherent(alpha, cd));
        assert!(overlap_sq(&out, fock::make_coherent(-alpha, cd).amplitudes()) >= 1.0 - 1e-8);
        let a = rotation(0.3, cd).compose(&rotation(0.5, cd)).unwrap();
        assert!(linalg::max_abs_diff(a.matrix(), rotation(0.8, cd).matrix()) < 1e-14);
    }

    #[test]
    fn rotation_turns_the_wigner_peak() {
        let cd = cut(20);
        let rho = fock::make_coherent(c(1.0), cd).to_density();
        let rotated = conjugate(&rho, &rotation(PI / 2.0, cd)).unwrap();
        let sq2 = std::f64::consts::SQRT_2;
        let pts = [fock::PhasePoint::new(sq2, 0.0), fock::PhasePoint::new(0.0, sq2)];
        let before = fock::wigner(&rho, &pts).unwrap();
        let after = fock::wigner(&rotated, &pts).unwrap();
        assert!(before[0] > before[1]);
        assert!(after[1] > after[0]);
        assert_abs_diff_eq!(after[1], before[0], epsilon = 1e-8);
    }

    #[test]
    fn squeeze_matches_closed_form() {
        let cd = cut(30);
        let vac = fock::fock_ket(0, cd).unwrap();
        let out = apply(&squeeze(0.5, cd), &vac);
        let closed = fock::make_squeezed_vacuum(0.5, cd);
        for k in 0..12 {
            assert!((out[k] - closed.amplitudes()[k]).norm() < 1e-8);
        }
        let ket = fock::Ket::from_amplitudes(cd, out.iter().cloned().collect()).unwrap();
        let var = fock::quadrature_variance(&ket.to_density(), Quadrature::X).unwrap();
        assert_abs_diff_eq!(var, (-1.0f64).exp() / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn beamsplitter_single_photon_elements() {
        let cd = cut(4);
        let idx10 = 4;
        let idx01 = 1;
        let bs = beamsplitter_by_transmissivity(0.5, cd).unwrap();
        let col = bs.matrix().column(idx10);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(col[idx10].norm(), h, epsilon = 1e-12);
        assert_abs_diff_eq!(col[idx01].norm(), h, epsilon = 1e-12);
        let swap = beamsplitter_by_transmissivity(0.0, cd).unwrap();
        assert_abs_diff_eq!(swap.matrix()[(idx01, idx10)].norm(), 1.0, epsilon = 1e-12);
        assert!(beamsplitter_by_transmissivity(1.2, cd).is_err());
    }

    #[test]
    fn beamsplitter_blocks_match_full_expm() {
        let cd = cut(5);
        let bs = beamsplitter_by_angle(0.7, 0.4, cd);
        let full = linalg::expm(&beamsplitter_generator(0.7, 0.4, cd)).unwrap();
        assert!(linalg::max_abs_diff(bs.matrix(), &full) < 1e-13);
    }

    #[test]
    fn beamsplitter_heisenberg_action() {
        let c_dim = 12;
        let cd = cut(c_dim);
        let l = LadderOps::new(cd);
        let id = linalg::identity(c_dim);
        let a = linalg::kron(&l.a, &id);
        let b = linalg::kron(&id, &l.a);
        for eta in [0.0, 0.3, 0.5, 0.9, 1.0] {
            let u = beamsplitter_by_transmissivity(eta, cd).unwrap().into_matrix();
            let ud = u.adjoint();
            let ua = linalg::matmul(&linalg::matmul(&u, &a), &ud);
            let ub = linalg::matmul(&linalg::matmul(&u, &b), &ud);
            let (t, r) = (eta.sqrt(), (1.0 - eta).sqrt());
            let expect_a = a.map(|z| z * t) + b.map(|z| z * r);
            let expect_b = b.map(|z| z * t) - a.map(|z| z * r);
            let keep = c_dim / 2;
            assert!(linalg::max_abs_diff(&low_block(&ua, c_dim, keep), &low_block(&expect_a, c_dim, keep)) < 1e-8);
            assert!(linalg::max_abs_diff(&low_block(&ub, c_dim, keep), &low_block(&expect_b, c_dim, keep)) < 1e-8);
        }
    }

    #[test]
    fn kerr_elements() {
        let cd = cut(5);
        let k = kerr(0.3, cd);
        let expect = C64::from_polar(1.0, 1.2);
        assert!((k.matrix()[(2, 2)] - expect).norm() < 1e-15);
        let r = rotation(0.7, cd);
        let kr = linalg::matmul(k.matrix(), r.matrix());
        let rk = linalg::matmul(r.matrix(), k.matrix());
        assert_eq!(kr, rk);
    }

    #[test]
    fn restricted_unitarity() {
        // Exponentials of anti-Hermitian truncated generators are unitary to rounding;
        // a c = 40 calibration run gives column-norm deviations below 1e-13.
        let cd = cut(20);
        let gates = [
            displacement(C64::new(0.7, -0.7), cd),
            squeeze(1.0, cd),
            squeeze(-0.8, cd),
            rotation(1.0, cd),
            kerr(1.0, cd),
        ];
        for g in &gates {
            for (k, norm) in g.column_norms().iter().enumerate() {
                assert!(*norm <= 1.0 + 1e-9);
                if k <= 10 {
                    assert!((norm - 1.0).abs() < 1e-6);
                }
            }
        }
        let bs = beamsplitter_by_angle(1.0, 0.5, cd);
        for (k, norm) in bs.column_norms().iter().enumerate() {
            assert!(*norm <= 1.0 + 1e-9);
            if k / 20 <= 10 && k % 20 <= 10 {
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unitarity_calibration_at_c40() {
        let cd = cut(40);
        for g in [displacement(C64::new(1.0, 0.5), cd), squeeze(0.8, cd), kerr(0.9, cd)] {
            let worst = g.column_norms().iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
            assert!(worst < 1e-13, "{worst:e}");
        }
    }

    #[test]
    fn embedding() {
        let cd = cut(4);
        let id = GateMatrix::identity(1, cd);
        assert_eq!(embed_single_mode(&id, Mode::A, cd).unwrap().matrix(), &linalg::identity(16));
        let u = displacement(C64::new(0.3, 0.1), cd);
        let v = squeeze(0.2, cd);
        let ua = embed_single_mode(&u, Mode::A, cd).unwrap();
        let vb = embed_single_mode(&v, Mode::B, cd).unwrap();
        let prod = linalg::matmul(ua.matrix(), vb.matrix());
        assert!(linalg::max_abs_diff(&prod, &linalg::kron(u.matrix(), v.matrix())) < 1e-12);
        for n in ua.column_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(embed_single_mode(&beamsplitter_by_angle(0.1, 0.0, cd), Mode::A, cd).is_err());
    }

    #[test]
    fn kron_apply_matches_embedding() {
        let cd = cut(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = CMatrix::from_fn(16, 16, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let u = displacement(C64::new(0.4, -0.2), cd);
        for mode in [Mode::A, Mode::B] {
            let e = embed_single_mode(&u, mode, cd).unwrap().into_matrix();
            let l = kron_apply::left(u.matrix(), mode, &m);
            let r = kron_apply::right(&m, u.matrix(), mode);
            assert!(linalg::max_abs_diff(&l, &linalg::matmul(&e, &m)) < 1e-13);
            assert!(linalg::max_abs_diff(&r, &linalg::matmul(&m, &e)) < 1e-13);
        }
    }

    #[test]
    fn conjugation() {
        let cd = cut(20);
        let vac = fock::make_vacuum(cd);
        assert_eq!(conjugate(&vac, &GateMatrix::identity(1, cd)).unwrap(), vac);
        let out = conjugate(&vac, &displacement(c(1.0), cd)).unwrap();
        assert!(1.0 - out.trace() <= 1e-8);
        assert!(out.hermiticity_error() < 1e-15);
        let u1 = squeeze(0.2, cd);
        let u2 = rotation(0.4, cd);
        let two = conjugate(&conjugate(&out, &u1).unwrap(), &u2).unwrap();
        let once = conjugate(&out, &u2.compose(&u1).unwrap()).unwrap();
        assert!(linalg::max_abs_diff(two.matrix(), once.matrix()) < 1e-13);
    }

    #[test]
    fn generators_are_exact_for_diagonal_gates() {
        let cd = cut(6);
        let g = gate_generator(GateKind::R, &[0.2], cd).unwrap();
        assert_eq!(g[(3, 3)], I * 3.0);
        let g = gate_generator(GateKind::K, &[0.2], cd).unwrap();
        assert_eq!(g[(3, 3)], I * 9.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cd = cut(5);
        let h = 1e-5;
        let cases: Vec<(GateKind, Vec<f64>, usize)> = vec![
            (GateKind::R, vec![0.4], 0),
            (GateKind::K, vec![-0.3], 0),
            (GateKind::S, vec![0.35], 0),
            (GateKind::DRe, vec![0.3, -0.2], 0),
            (GateKind::DIm, vec![0.3, -0.2], 1),
            (GateKind::BsTheta, vec![0.6, 0.9], 0),
            (GateKind::BsPhi, vec![0.6, 0.9], 1),
        ];
        for (kind, params, slot) in cases {
            let (u, du) = gate_derivative(kind, &params, cd).unwrap();
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[slot] += h;
            minus[slot] -= h;
            let fd = (gate_for(kind, &plus, cd).unwrap().into_matrix() - gate_for(kind, &minus, cd).unwrap().into_matrix())
                .map(|z| z / (2.0 * h));
            assert!(linalg::max_abs_diff(&du, &fd) < 1e-7, "{kind:?}");
            assert!(linalg::max_abs_diff(&u, gate_for(kind, &params, cd).unwrap().matrix()) < 1e-13);
            if matches!(kind, GateKind::R | GateKind::K | GateKind::S | GateKind::BsTheta) {
                let g = gate_generator(kind, &params, cd).unwrap();
                assert!(linalg::max_abs_diff(&linalg::matmul(&g, &u), &fd) < 1e-7, "{kind:?}");
            }
        }
    }

    #[test]
    fn pure_displacement_generators_match() {
        let cd = cut(6);
        let (u, _) = gate_derivative(GateKind::DRe, &[0.4, 0.0], cd).unwrap();
        let g = gate_generator(GateKind::DRe, &[0.4, 0.0], cd).unwrap();
        let h = 1e-5;
        let fd = (displacement(c(0.4 + h), cd).into_matrix() - displacement(c(0.4 - h), cd).into_matrix())
            .map(|z| z / (2.0 * h));
        assert!(linalg::max_abs_diff(&linalg::matmul(&g, &u), &fd) < 1e-7);
    }

    #[test]
    fn cache_reuses_entries() {
        let cache = GateCache::new();
        let cd = cut(4);
        let a = cache.get(GateKind::BsTheta, &[0.3, 0.0], cd).unwrap();
        let b = cache.get(GateKind::BsTheta, &[0.3, 0.0], cd).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        cache.get(GateKind::R, &[FRAC_PI_4], cd).unwrap();
        assert_eq!(cache.len(), 2);
        assert!(cache.get(GateKind::R, &[f64::NAN], cd).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn beamsplitter_preserves_photon_number(theta in -1.5f64..1.5, phi in -3.0f64..3.0) {
                let cd = cut(5);
                let u = beamsplitter_by_angle(theta, phi, cd).into_matrix();
                for i in 0..25 {
                    for j in 0..25 {
                        if (i / 5 + i % 5) != (j / 5 + j % 5) {
                            prop_assert_eq!(u[(i, j)], ZERO);
                        }
                    }
                }
                let ud = u.adjoint();
                prop_assert!(linalg::max_abs_diff(&linalg::matmul(&u, &ud), &linalg::identity(25)) < 1e-12);
            }

            #[test]
            fn gates_are_unitary(re in -1.0f64..1.0, im in -1.0f64..1.0, r in -1.0f64..1.0) {
                let cd = cut(10);
                for g in [displacement(C64::new(re, im), cd), squeeze(r, cd)] {
                    let p = linalg::matmul(&g.matrix().adjoint(), g.matrix());
                    prop_assert!(linalg::max_abs_diff(&p, &linalg::identity(10)) < 1e-12);
                }
            }
        }
    }
}
