//! Truncated Fock-basis states of one or two qumodes.
//!
//! Conventions: ħ = 1, x̂ = (â + â†)/√2, p̂ = (â − â†)/(i√2), so the vacuum has
//! quadrature variance 1/2. Two-mode composite index is `n_A * c + n_B`
//! (mode A most significant).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::linalg::{self, c, CMatrix, C64, ZERO};
use crate::{Error, Result};

/// Number of Fock levels kept per qumode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct CutoffDim(usize);

impl CutoffDim {
    pub fn new(c: usize) -> Result<Self> {
        if c < 2 {
            return Err(Error::InvalidCutoff(c));
        }
        Ok(CutoffDim(c))
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for CutoffDim {
    type Error = Error;
    fn try_from(c: usize) -> Result<Self> {
        CutoffDim::new(c)
    }
}

impl From<CutoffDim> for usize {
    fn from(c: CutoffDim) -> usize {
        c.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    X,
    P,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: f64,
    pub p: f64,
}

impl PhasePoint {
    pub fn new(x: f64, p: f64) -> Self {
        PhasePoint { x, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CatParity {
    Even,
    Odd,
}

/// Pure single-mode state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Ket {
    cutoff: CutoffDim,
    amps: DVector<C64>,
}

impl Ket {
    pub fn from_amplitudes(cutoff: CutoffDim, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != cutoff.get() {
            return Err(Error::Shape(format!(
                "ket of length {} for cutoff {}",
                amps.len(),
                cutoff.get()
            )));
        }
        Ok(Ket { cutoff, amps: DVector::from_vec(amps) })
    }

    pub fn cutoff(&self) -> CutoffDim {
        self.cutoff
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// ⟨self|other⟩
    pub fn inner(&self, other: &Ket) -> C64 {
        self.amps.iter().zip(other.amps.iter()).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn to_density(&self) -> DensityMatrix {
        let data = &self.amps * self.amps.adjoint();
        DensityMatrix { modes: 1, cutoff: self.cutoff, data }
    }
}

/// Mixed state of one or two qumodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    modes: usize,
    cutoff: CutoffDim,
    data: CMatrix,
}

impl DensityMatrix {
    /// Wraps a matrix after checking its shape and Hermiticity (≤ 1e-10).
    pub fn from_matrix(modes: usize, cutoff: CutoffDim, data: CMatrix) -> Result<Self> {
        let rho = Self::from_matrix_unchecked(modes, cutoff, data)?;
        let herm = linalg::hermiticity_error(&rho.data);
        if herm > 1e-10 {
            return Err(Error::InvalidState(format!("density matrix not Hermitian ({herm:.3e})")));
        }
        Ok(rho)
    }

    /// Shape check only; used for intermediate results known to be Hermitian.
    pub(crate) fn from_matrix_unchecked(modes: usize, cutoff: CutoffDim, data: CMatrix) -> Result<Self> {
        if modes != 1 && modes != 2 {
            return Err(Error::Shape(format!("{modes} modes not supported")));
        }
        let dim = cutoff.get().pow(modes as u32);
        if data.nrows() != dim || data.ncols() != dim {
            return Err(Error::Shape(format!(
                "{}x{} matrix for {modes} mode(s) at cutoff {}",
                data.nrows(),
                data.ncols(),
                cutoff.get()
            )));
        }
        Ok(DensityMatrix { modes, cutoff, data })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn cutoff(&self) -> CutoffDim {
        self.cutoff
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }

    pub fn into_matrix(self) -> CMatrix {
        self.data
    }

    pub fn trace(&self) -> f64 {
        linalg::trace(&self.data).re
    }

    /// Copy scaled to unit trace. Truncated states are never renormalized implicitly.
    pub fn renormalized(&self) -> Result<Self> {
        let t = self.trace();
        if t <= 0.0 {
            return Err(Error::DegenerateState("cannot renormalize a zero-trace state".into()));
        }
        Ok(DensityMatrix { data: self.data.map(|z| z / t), ..self.clone() })
    }

    pub fn hermiticity_error(&self) -> f64 {
        linalg::hermiticity_error(&self.data)
    }

    /// Hermiticity ≤ 1e-12, trace in [0, 1 + 1e-9], spectrum ≥ −1e-9.
    pub fn check_invariants(&self) -> Result<()> {
        let herm = self.hermiticity_error();
        if herm > 1e-12 {
            return Err(Error::InvalidState(format!("Hermiticity deviation {herm:.3e}")));
        }
        let tr = linalg::trace(&self.data);
        if tr.im.abs() > 1e-12 || tr.re < -1e-12 || tr.re > 1.0 + 1e-9 {
            return Err(Error::InvalidState(format!("trace {tr}")));
        }
        linalg::psd_eigen(&self.data)?;
        Ok(())
    }

    /// Same state at another cutoff: zero-padded when growing, the leading
    /// block kept when shrinking (single mode).
    pub fn with_cutoff(&self, cutoff: CutoffDim) -> Result<Self> {
        if self.modes != 1 {
            return Err(Error::Shape("with_cutoff applies to single-mode states".into()));
        }
        let n = cutoff.get();
        let keep = n.min(self.cutoff.get());
        let mut data = CMatrix::zeros(n, n);
        data.view_mut((0, 0), (keep, keep)).copy_from(&self.data.view((0, 0), (keep, keep)));
        Ok(DensityMatrix { modes: 1, cutoff, data })
    }

    /// Populations ⟨n|ρ|n⟩ (single mode).
    pub fn populations(&self) -> Vec<f64> {
        self.data.diagonal().iter().map(|z| z.re).collect()
    }

    /// `Some(ψ)` with ρ = |ψ⟩⟨ψ| when the state is pure to rounding, where
    /// purity is judged by `tr(ρ)² − tr(ρ²) ≤ 1e-14 · tr(ρ)²`.
    pub fn pure_vector(&self) -> Option<DVector<C64>> {
        let tr = self.trace();
        if tr <= 0.0 {
            return None;
        }
        let purity: f64 = self.data.iter().map(|z| z.norm_sqr()).sum();
        if tr * tr - purity > 1e-14 * tr * tr {
            return None;
        }
        let (vals, vecs) = linalg::hermitian_eigen(&self.data);
        let top = vals.len() - 1;
        Some(vecs.column(top).map(|z| z * vals[top].max(0.0).sqrt()))
    }

    /// JSON document `{version, modes, cutoff, data}` with row-major `[re, im]`
    /// pairs printed to 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\"version\":{},\"modes\":{},\"cutoff\":{},\"data\":[",
            STATE_JSON_VERSION,
            self.modes,
            self.cutoff.get()
        );
        let n = self.dim();
        for i in 0..n {
            for j in 0..n {
                if i + j > 0 {
                    s.push(',');
                }
                let z = self.data[(i, j)];
                let _ = write!(s, "[{},{}]", fmt_f64(z.re), fmt_f64(z.im));
            }
        }
        s.push_str("]}");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: StateDoc =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("state JSON: {e}")))?;
        if doc.version != STATE_JSON_VERSION {
            return Err(Error::Format(format!("unsupported state version {}", doc.version)));
        }
        let cutoff = CutoffDim::new(doc.cutoff)?;
        let dim = doc.cutoff.pow(doc.modes as u32);
        if doc.data.len() != dim * dim {
            return Err(Error::Format(format!(
                "expected {} entries, found {}",
                dim * dim,
                doc.data.len()
            )));
        }
        let data = CMatrix::from_fn(dim, dim, |i, j| {
            let [re, im] = doc.data[i * dim + j];
            C64::new(re, im)
        });
        Self::from_matrix(doc.modes, cutoff, data)
    }
}

pub const STATE_JSON_VERSION: u32 = 1;

#[derive(Deserialize)]
struct StateDoc {
    version: u32,
    modes: usize,
    cutoff: usize,
    data: Vec<[f64; 2]>,
}

/// Decimal with 17 significant digits, which round-trips every `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn make_vacuum(cutoff: CutoffDim) -> DensityMatrix {
    make_fock(0, cutoff).expect("level 0 always fits")
}

pub fn make_fock(n: usize, cutoff: CutoffDim) -> Result<DensityMatrix> {
    let c = cutoff.get();
    if n >= c {
        return Err(Error::OutOfCutoff { n, cutoff: c });
    }
    let mut data = CMatrix::zeros(c, c);
    data[(n, n)] = linalg::ONE;
    Ok(DensityMatrix { modes: 1, cutoff, data })
}

pub fn fock_ket(n: usize, cutoff: CutoffDim) -> Result<Ket> {
    if n >= cutoff.get() {
        return Err(Error::OutOfCutoff { n, cutoff: cutoff.get() });
    }
    let mut amps = vec![ZERO; cutoff.get()];
    amps[n] = linalg::ONE;
    Ket::from_amplitudes(cutoff, amps)
}

/// Coherent amplitudes `e^{-|α|²/2} αⁿ/√n!` for `n < len`.
pub(crate) fn coherent_amplitudes(alpha: C64, len: usize) -> Vec<C64> {
    let mut amps = Vec::with_capacity(len);
    let mut a = c((-0.5 * alpha.norm_sqr()).exp());
    for n in 0..len {
        if n > 0 {
            a = a * alpha / (n as f64).sqrt();
        }
        amps.push(a);
    }
    amps
}

/// |α⟩ truncated to the cutoff; the norm deficit is the Poisson(|α|²) tail mass.
pub fn make_coherent(alpha: C64, cutoff: CutoffDim) -> Ket {
    Ket { cutoff, amps: DVector::from_vec(coherent_amplitudes(alpha, cutoff.get())) }
}

/// Poisson(mean) probability mass at levels ≥ `cutoff`.
pub fn poisson_tail(mean: f64, cutoff: usize) -> f64 {
    let mut p = (-mean).exp();
    let mut kept = 0.0;
    for n in 0..cutoff {
        if n > 0 {
            p *= mean / n as f64;
        }
        kept += p;
    }
    (1.0 - kept).max(0.0)
}

/// Thermal state with Bose-Einstein populations. The tail beyond the cutoff
/// is dropped, not renormalized.
pub fn make_thermal(nbar: f64, cutoff: CutoffDim) -> Result<DensityMatrix> {
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(Error::OutOfRange(format!("thermal mean photon number {nbar}")));
    }
    let c_dim = cutoff.get();
    let mut data = CMatrix::zeros(c_dim, c_dim);
    let ratio = nbar / (1.0 + nbar);
    let mut p = 1.0 / (1.0 + nbar);
    for n in 0..c_dim {
        if n > 0 {
            p *= ratio;
        }
        data[(n, n)] = c(p);
    }
    Ok(DensityMatrix { modes: 1, cutoff, data })
}

/// S(r)|0⟩ with S(r) = exp((r/2)(â² − â†²)); x-variance e^{−2r}/2.
pub fn make_squeezed_vacuum(r: f64, cutoff: CutoffDim) -> Ket {
    let c_dim = cutoff.get();
    let mut amps = vec![ZERO; c_dim];
    let t = -r.tanh();
    let mut a = 1.0 / r.cosh().sqrt();
    let mut k = 0;
    while 2 * k < c_dim {
        if k > 0 {
            let n2 = (2 * k) as f64;
            a *= t * ((n2 - 1.0) / n2).sqrt();
        }
        amps[2 * k] = c(a);
        k += 1;
    }
    Ket { cutoff, amps: DVector::from_vec(amps) }
}

/// N(|α⟩ ± |−α⟩) with N = 1/√(2(1 ± e^{−2α²})).
pub fn make_cat(alpha: f64, parity: CatParity, cutoff: CutoffDim) -> Result<Ket> {
    let sign = match parity {
        CatParity::Even => 1.0,
        CatParity::Odd => -1.0,
    };
    let norm_arg = 2.0 * (1.0 + sign * (-2.0 * alpha * alpha).exp());
    if norm_arg <= 1e-300 || (parity == CatParity::Odd && alpha == 0.0) {
        return Err(Error::DegenerateState("odd cat state with alpha = 0".into()));
    }
    let norm = 1.0 / norm_arg.sqrt();
    let plus = coherent_amplitudes(c(alpha), cutoff.get());
    let amps = plus
        .iter()
        .enumerate()
        .map(|(n, a)| {
            let minus = if n % 2 == 0 { *a } else { -*a };
            (a + minus * sign) * norm
        })
        .collect();
    Ket::from_amplitudes(cutoff, amps)
}

/// a ⊗ b with a on mode A.
pub fn tensor_product(a: &DensityMatrix, b: &DensityMatrix) -> Result<DensityMatrix> {
    if a.modes != 1 || b.modes != 1 {
        return Err(Error::Shape("tensor_product takes single-mode factors".into()));
    }
    if a.cutoff != b.cutoff {
        return Err(Error::CutoffMismatch(a.cutoff.get(), b.cutoff.get()));
    }
    Ok(DensityMatrix { modes: 2, cutoff: a.cutoff, data: linalg::kron(&a.data, &b.data) })
}

/// Trace out mode `over` of a two-mode state.
pub fn partial_trace(rho: &DensityMatrix, over: Mode) -> Result<DensityMatrix> {
    if rho.modes != 2 {
        return Err(Error::Shape("partial_trace needs a two-mode state".into()));
    }
    let data = partial_trace_matrix(&rho.data, rho.cutoff.get(), over);
    Ok(DensityMatrix { modes: 1, cutoff: rho.cutoff, data })
}

pub(crate) fn partial_trace_matrix(m: &CMatrix, c_dim: usize, over: Mode) -> CMatrix {
    let mut out = CMatrix::zeros(c_dim, c_dim);
    for j in 0..c_dim {
        for i in 0..c_dim {
            let mut acc = ZERO;
            for k in 0..c_dim {
                acc += match over {
                    Mode::B => m[(i * c_dim + k, j * c_dim + k)],
                    Mode::A => m[(k * c_dim + i, k * c_dim + j)],
                };
            }
            out[(i, j)] = acc;
        }
    }
    out
}

fn check_same_shape(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<()> {
    if rho.modes != sigma.modes {
        return Err(Error::Shape("fidelity between states of different mode counts".into()));
    }
    if rho.cutoff != sigma.cutoff {
        return Err(Error::CutoffMismatch(rho.cutoff.get(), sigma.cutoff.get()));
    }
    for s in [rho, sigma] {
        let herm = s.hermiticity_error();
        if herm > 1e-10 {
            return Err(Error::InvalidState(format!("fidelity input not Hermitian ({herm:.3e})")));
        }
    }
    Ok(())
}

fn expectation(psi: &DVector<C64>, m: &CMatrix) -> f64 {
    (psi.adjoint() * m * psi)[(0, 0)].re
}

/// Eigenvalues clamped at zero plus eigenvectors.
fn clamped_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let (mut vals, vecs) = linalg::hermitian_eigen(m);
    for v in vals.iter_mut() {
        *v = v.max(0.0);
    }
    (vals, vecs)
}

/// Support factor R = V_r diag(√λ_r) of a PSD matrix, keeping eigenvalues
/// above 1e-14 of the largest, so that √ρ σ √ρ and R† σ R share their
/// non-zero spectrum.
fn support_root(rho: &CMatrix) -> CMatrix {
    let (vals, vecs) = clamped_eigen(rho);
    let top = vals.last().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > 1e-14 * top && vals[k] > 0.0).collect();
    CMatrix::from_fn(rho.nrows(), keep.len(), |i, j| vecs[(i, keep[j])] * vals[keep[j]].sqrt())
}

/// General-path fidelity, plus its σ-gradient when requested.
fn fidelity_mixed(rho: &CMatrix, sigma: &CMatrix, want_grad: bool) -> (f64, Option<CMatrix>) {
    let r = support_root(rho);
    let m = linalg::matmul(&linalg::matmul(&r.adjoint(), sigma), &r);
    let (mu, mvecs) = clamped_eigen(&m);
    let root: f64 = mu.iter().map(|v| v.sqrt()).sum();
    if !want_grad {
        return (root * root, None);
    }
    let top = mu.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-14 * top.max(1e-300);
    let inv_sqrt = linalg::spectral_map(&mu, &mvecs, |v| if v > tol { 1.0 / v.sqrt() } else { 0.0 });
    let g = linalg::matmul(&linalg::matmul(&r, &inv_sqrt), &r.adjoint()).map(|z| z * root);
    (root * root, Some(linalg::hermitian_part(&g)))
}

/// Uhlmann fidelity `(tr√(√ρ σ √ρ))²`. Negative eigenvalues are clamped to
/// zero; when either input is pure the overlap form ⟨ψ|σ|ψ⟩ is used.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    check_same_shape(rho, sigma)?;
    if let Some(psi) = rho.pure_vector() {
        return Ok(expectation(&psi, &sigma.data).max(0.0));
    }
    if let Some(phi) = sigma.pure_vector() {
        return Ok(expectation(&phi, &rho.data).max(0.0));
    }
    Ok(fidelity_mixed(&rho.data, &sigma.data, false).0)
}

/// Fidelity of `sigma` against a fixed `target`, computed by the same route
/// that [`fidelity_with_grad`] differentiates: the overlap form is used only
/// when the target is pure, so the value is smooth in `sigma`.
pub fn fidelity_to_target(target: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    check_same_shape(target, sigma)?;
    if let Some(psi) = target.pure_vector() {
        return Ok(expectation(&psi, &sigma.data));
    }
    Ok(fidelity_mixed(&target.data, &sigma.data, false).0)
}

/// [`fidelity_to_target`] together with `G = ∂F/∂σ`, so that
/// `dF = Re tr(G dσ)` for Hermitian perturbations of `sigma`.
pub fn fidelity_with_grad(target: &DensityMatrix, sigma: &DensityMatrix) -> Result<(f64, CMatrix)> {
    check_same_shape(target, sigma)?;
    if let Some(psi) = target.pure_vector() {
        let f = expectation(&psi, &sigma.data);
        return Ok((f, &psi * psi.adjoint()));
    }
    let (f, g) = fidelity_mixed(&target.data, &sigma.data, true);
    Ok((f, g.expect("gradient requested")))
}

fn single_mode(rho: &DensityMatrix, what: &str) -> Result<()> {
    if rho.modes != 1 {
        return Err(Error::Shape(format!("{what} expects a single-mode state")));
    }
    Ok(())
}

/// tr(ρ â) and tr(ρ â²), unnormalized.
fn ladder_moments(rho: &CMatrix) -> (C64, C64) {
    let n = rho.nrows();
    let mut a1 = ZERO;
    let mut a2 = ZERO;
    for k in 1..n {
        a1 += rho[(k, k - 1)] * (k as f64).sqrt();
        if k >= 2 {
            a2 += rho[(k, k - 2)] * ((k * (k - 1)) as f64).sqrt();
        }
    }
    (a1, a2)
}

/// ⟨n̂⟩ of the normalized state.
pub fn mean_photon(rho: &DensityMatrix) -> Result<f64> {
    single_mode(rho, "mean_photon")?;
    let tr = rho.trace();
    let s: f64 = rho.populations().iter().enumerate().map(|(n, p)| n as f64 * p).sum();
    Ok(s / tr)
}

pub fn quadrature_mean(rho: &DensityMatrix, which: Quadrature) -> Result<f64> {
    single_mode(rho, "quadrature_mean")?;
    let (a1, _) = ladder_moments(&rho.data);
    let tr = rho.trace();
    let v = match which {
        Quadrature::X => std::f64::consts::SQRT_2 * a1.re,
        Quadrature::P => std::f64::consts::SQRT_2 * a1.im,
    };
    Ok(v / tr)
}

/// ⟨X²⟩ − ⟨X⟩² of the normalized state, using x̂² = (â² + â†² + 2n̂ + 1)/2.
pub fn quadrature_variance(rho: &DensityMatrix, which: Quadrature) -> Result<f64> {
    single_mode(rho, "quadrature_variance")?;
    let tr = rho.trace();
    let (_, a2) = ladder_moments(&rho.data);
    let n_mean = mean_photon(rho)?;
    let sign = match which {
        Quadrature::X => 1.0,
        Quadrature::P => -1.0,
    };
    let second = (sign * 2.0 * a2.re / tr + 2.0 * n_mean + 1.0) / 2.0;
    let first = quadrature_mean(rho, which)?;
    Ok(second - first * first)
}

/// Wigner function via the displaced parity `W = (1/π) tr[D(−β) ρ D(β) Π]`,
/// β = (x + ip)/√2.
///
/// The displaced Fock states D(−β)|m⟩ = (â† + β*)^m |−β⟩ / √m! are built in an
/// enlarged basis sized to the displacement, so the result does not inherit
/// the state's own cutoff error.
pub fn wigner(rho: &DensityMatrix, grid: &[PhasePoint]) -> Result<Vec<f64>> {
    single_mode(rho, "wigner")?;
    Ok(grid.iter().map(|pt| wigner_point(&rho.data, pt)).collect())
}

fn wigner_point(rho: &CMatrix, pt: &PhasePoint) -> f64 {
    let c_dim = rho.nrows();
    let beta = C64::new(pt.x, pt.p) / std::f64::consts::SQRT_2;
    let gamma = -beta;
    let reach = (c_dim as f64).sqrt() + gamma.norm();
    let big = (reach * reach + 12.0 * reach + 20.0).ceil() as usize;
    // columns v_m = D(γ)|m⟩ on `big` levels
    let mut v = CMatrix::zeros(big, c_dim);
    let coh = coherent_amplitudes(gamma, big);
    for (k, a) in coh.iter().enumerate() {
        v[(k, 0)] = *a;
    }
    let gc = gamma.conj();
    for m in 1..c_dim {
        let inv = 1.0 / (m as f64).sqrt();
        for k in 0..big {
            let raised = if k > 0 { v[(k - 1, m - 1)] * (k as f64).sqrt() } else { ZERO };
            v[(k, m)] = (raised - v[(k, m - 1)] * gc) * inv;
        }
    }
    let y = linalg::matmul(&v, rho);
    let mut acc = 0.0;
    for k in 0..big {
        let mut diag = ZERO;
        for n in 0..c_dim {
            diag += y[(k, n)] * v[(k, n)].conj();
        }
        acc += if k % 2 == 0 { diag.re } else { -diag.re };
    }
    acc / PI
}
