//! Backward process: time embedding, the layered two-qumode circuit, the
//! single denoising step and the full backward chain.
//!
//! Slot A carries the time embedding τ_t and is the retained output mode;
//! slot B carries the noisy input and is traced out.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::fock::{self, CutoffDim, DensityMatrix, Ket, Mode};
use crate::gates::{self, kron_apply, GateKind, GateMatrix};
use crate::linalg::{self, CMatrix, C64, ZERO};
use crate::{Error, Result};

pub const PARAMS_PER_LAYER: usize = 16;
/// Tag written into checkpoints to pin the per-layer parameter layout.
pub const LAYOUT_TAG: &str = "cvqnn-16p-v1";
/// Squeezing magnitudes are clamped here to keep states inside small cutoffs.
pub const SQUEEZE_LIMIT: f64 = 1.5;

/// Offsets of each parameter within a layer.
pub mod slot {
    pub const BS1_THETA: usize = 0;
    pub const BS1_PHI: usize = 1;
    pub const R_A: usize = 2;
    pub const R_B: usize = 3;
    pub const S_A: usize = 4;
    pub const S_B: usize = 5;
    pub const BS2_THETA: usize = 6;
    pub const BS2_PHI: usize = 7;
    pub const R2_A: usize = 8;
    pub const R2_B: usize = 9;
    pub const D_A_RE: usize = 10;
    pub const D_A_IM: usize = 11;
    pub const D_B_RE: usize = 12;
    pub const D_B_IM: usize = 13;
    pub const K_A: usize = 14;
    pub const K_B: usize = 15;
}

fn is_squeeze_slot(idx: usize) -> bool {
    matches!(idx % PARAMS_PER_LAYER, slot::S_A | slot::S_B)
}

/// Flat parameter vector of an L-layer circuit, shared by every timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    layers: usize,
    values: Vec<f64>,
}

impl ThetaVector {
    /// Squeezing entries are clamped to ±1.5.
    pub fn new(layers: usize, values: Vec<f64>) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("circuit needs at least one layer".into()));
        }
        if values.len() != PARAMS_PER_LAYER * layers {
            return Err(Error::Shape(format!(
                "{} parameters for {layers} layers (expected {})",
                values.len(),
                PARAMS_PER_LAYER * layers
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        let mut theta = ThetaVector { layers, values };
        theta.clamp_squeeze();
        Ok(theta)
    }

    pub fn zeros(layers: usize) -> Self {
        ThetaVector { layers, values: vec![0.0; PARAMS_PER_LAYER * layers] }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.values[l * PARAMS_PER_LAYER..(l + 1) * PARAMS_PER_LAYER]
    }

    /// Copy with replaced values (same layer count), clamped.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ThetaVector::new(self.layers, values)
    }

    fn clamp_squeeze(&mut self) {
        for (k, v) in self.values.iter_mut().enumerate() {
            if is_squeeze_slot(k) {
                *v = v.clamp(-SQUEEZE_LIMIT, SQUEEZE_LIMIT);
            }
        }
    }

    /// Whether coordinate `k` sits on the squeeze clamp, where its gradient is zero.
    pub fn is_clamped(&self, k: usize) -> bool {
        is_squeeze_slot(k) && self.values[k].abs() >= SQUEEZE_LIMIT
    }
}

/// Uniform entries in [−scale, scale], reproducible from `seed`.
pub fn param_init(layers: usize, scale: f64, seed: u64) -> Result<ThetaVector> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!("init scale {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..PARAMS_PER_LAYER * layers)
        .map(|_| if scale == 0.0 { 0.0 } else { rng.random_range(-scale..=scale) })
        .collect();
    ThetaVector::new(layers, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedConfig {
    alpha_embed: f64,
    steps: usize,
}

impl TimeEmbedConfig {
    pub fn new(alpha_embed: f64, steps: usize) -> Result<Self> {
        if !(alpha_embed > 0.0) || !alpha_embed.is_finite() {
            return Err(Error::Config(format!("alpha_embed must be positive, got {alpha_embed}")));
        }
        if steps == 0 {
            return Err(Error::Config("total timesteps must be at least 1".into()));
        }
        Ok(TimeEmbedConfig { alpha_embed, steps })
    }

    pub fn alpha_embed(&self) -> f64 {
        self.alpha_embed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// φ(t) = tπ/T
    pub fn phase(&self, t: usize) -> f64 {
        t as f64 * PI / self.steps as f64
    }
}

/// τ_t = R(tπ/T) D(α)|0⟩ as a ket.
pub fn time_embed_ket(t: usize, cfg: &TimeEmbedConfig, cutoff: CutoffDim) -> Result<Ket> {
    if t > cfg.steps {
        return Err(Error::Timestep { t, max: cfg.steps });
    }
    let displaced = gates::displacement(C64::new(cfg.alpha_embed, 0.0), cutoff).into_matrix();
    let phase = cfg.phase(t);
    let amps = (0..cutoff.get()).map(|n| displaced[(n, 0)] * C64::from_polar(1.0, phase * n as f64)).collect();
    Ket::from_amplitudes(cutoff, amps)
}

pub fn time_embed(t: usize, cfg: &TimeEmbedConfig, cutoff: CutoffDim) -> Result<DensityMatrix> {
    Ok(time_embed_ket(t, cfg, cutoff)?.to_density())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Single {
    Rot,
    Squeeze,
    Disp,
    Kerr,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    /// parameter indices of θ and φ
    Bs(usize, usize),
    /// mode, gate, index of the (first) parameter
    One(Mode, Single, usize),
}

#[derive(Debug, Clone)]
struct Factor {
    op: Op,
    mat: CMatrix,
}

/// The circuit U(ϑ) = U_L ⋯ U_1 kept as its ordered gate factors, so that
/// gradients can be taken by inserting derivatives factor by factor.
///
/// Each layer applies BS1, R_A, R_B, S_A, S_B, BS2, R2_A, R2_B, D_A, D_B,
/// K_A, K_B in that order.
#[derive(Debug, Clone)]
pub struct Circuit {
    cutoff: CutoffDim,
    theta: ThetaVector,
    factors: Vec<Factor>,
    /// `suffix[k]` is the product of factors k.. (later factors on the left);
    /// `suffix[0]` is U, the last entry the identity.
    suffix: Vec<CMatrix>,
}

fn layer_ops(base: usize) -> [Op; 12] {
    use slot::*;
    [
        Op::Bs(base + BS1_THETA, base + BS1_PHI),
        Op::One(Mode::A, Single::Rot, base + R_A),
        Op::One(Mode::B, Single::Rot, base + R_B),
        Op::One(Mode::A, Single::Squeeze, base + S_A),
        Op::One(Mode::B, Single::Squeeze, base + S_B),
        Op::Bs(base + BS2_THETA, base + BS2_PHI),
        Op::One(Mode::A, Single::Rot, base + R2_A),
        Op::One(Mode::B, Single::Rot, base + R2_B),
        Op::One(Mode::A, Single::Disp, base + D_A_RE),
        Op::One(Mode::B, Single::Disp, base + D_B_RE),
        Op::One(Mode::A, Single::Kerr, base + K_A),
        Op::One(Mode::B, Single::Kerr, base + K_B),
    ]
}

fn single_gate(kind: Single, p: &[f64], idx: usize, cutoff: CutoffDim) -> CMatrix {
    match kind {
        Single::Rot => gates::rotation(p[idx], cutoff),
        Single::Squeeze => gates::squeeze(p[idx], cutoff),
        Single::Disp => gates::displacement(C64::new(p[idx], p[idx + 1]), cutoff),
        Single::Kerr => gates::kerr(p[idx], cutoff),
    }
    .into_matrix()
}

/// `f · q` for a sparse `f`, skipping its zeros.
fn sparse_left(f: &CMatrix, q: &CMatrix) -> CMatrix {
    linalg::matmul(&q.adjoint(), &f.adjoint()).adjoint()
}

/// tr_B(q s) for `mode == A`, tr_A(q s) for `mode == B`.
fn reduced_product(q: &CMatrix, s: &CMatrix, mode: Mode, c: usize) -> CMatrix {
    let dim = c * c;
    let mut out = CMatrix::zeros(c, c);
    let qs = q.as_slice();
    for i in 0..c {
        for other in 0..c {
            let col = match mode {
                Mode::A => i * c + other,
                Mode::B => other * c + i,
            };
            for m in 0..dim {
                let sv = s[(m, col)];
                if sv == ZERO {
                    continue;
                }
                let qcol = &qs[m * dim..(m + 1) * dim];
                for j in 0..c {
                    let row = match mode {
                        Mode::A => j * c + other,
                        Mode::B => other * c + j,
                    };
                    out[(j, i)] += qcol[row] * sv;
                }
            }
        }
    }
    out
}

/// Re tr(a b)
fn re_trace_product(a: &CMatrix, b: &CMatrix) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..a.ncols() {
            let bv = b[(k, i)];
            if bv == ZERO {
                continue;
            }
            acc += (a[(i, k)] * bv).re;
        }
    }
    acc
}

impl Circuit {
    pub fn new(theta: &ThetaVector, cutoff: CutoffDim) -> Result<Self> {
        let c = cutoff.get();
        let p = theta.values();
        let mut factors = Vec::with_capacity(12 * theta.layers());
        for l in 0..theta.layers() {
            for op in layer_ops(l * PARAMS_PER_LAYER) {
                let mat = match op {
                    Op::Bs(t, f) => gates::beamsplitter_by_angle(p[t], p[f], cutoff).into_matrix(),
                    Op::One(_, kind, idx) => single_gate(kind, p, idx, cutoff),
                };
                factors.push(Factor { op, mat });
            }
        }
        let mut suffix = vec![linalg::identity(c * c); factors.len() + 1];
        for k in (0..factors.len()).rev() {
            let next = &suffix[k + 1];
            suffix[k] = match factors[k].op {
                Op::Bs(..) => linalg::matmul(next, &factors[k].mat),
                Op::One(mode, ..) => kron_apply::right(next, &factors[k].mat, mode),
            };
        }
        Ok(Circuit { cutoff, theta: theta.clone(), factors, suffix })
    }

    pub fn unitary(&self) -> &CMatrix {
        &self.suffix[0]
    }

    pub fn theta(&self) -> &ThetaVector {
        &self.theta
    }

    /// Gradient of `2 Re tr(Z dU)` with respect to every parameter, where
    /// `dU` is the change of U(ϑ). A loss whose differential is
    /// `2 Re tr(Z dU)` therefore has exactly this gradient.
    pub fn adjoint_gradient(&self, z: &CMatrix) -> Result<Vec<f64>> {
        let c = self.cutoff.get();
        let p = self.theta.values();
        let mut grad = vec![0.0; p.len()];
        // q = (factors before k) · Z
        let mut q = z.clone();
        for (k, f) in self.factors.iter().enumerate() {
            let after = &self.suffix[k + 1];
            match f.op {
                Op::Bs(ti, fi) => {
                    let a = linalg::matmul(&q, after);
                    for (idx, kind) in [(ti, GateKind::BsTheta), (fi, GateKind::BsPhi)] {
                        let (_, du) = gates::gate_derivative(kind, &[p[ti], p[fi]], self.cutoff)?;
                        grad[idx] += 2.0 * re_trace_product(&a, &du);
                    }
                    q = sparse_left(&f.mat, &q);
                }
                Op::One(mode, kind, idx) => {
                    let r = reduced_product(&q, after, mode, c);
                    let derivs: Vec<(usize, CMatrix)> = match kind {
                        Single::Rot => vec![(idx, gates::gate_derivative(GateKind::R, &[p[idx]], self.cutoff)?.1)],
                        Single::Kerr => vec![(idx, gates::gate_derivative(GateKind::K, &[p[idx]], self.cutoff)?.1)],
                        Single::Squeeze => {
                            if self.theta.is_clamped(idx) {
                                vec![]
                            } else {
                                vec![(idx, gates::gate_derivative(GateKind::S, &[p[idx]], self.cutoff)?.1)]
                            }
                        }
                        Single::Disp => {
                            let d = [p[idx], p[idx + 1]];
                            vec![
                                (idx, gates::gate_derivative(GateKind::DRe, &d, self.cutoff)?.1),
                                (idx + 1, gates::gate_derivative(GateKind::DIm, &d, self.cutoff)?.1),
                            ]
                        }
                    };
                    for (pi, du) in derivs {
                        grad[pi] += 2.0 * re_trace_product(&r, &du);
                    }
                    q = kron_apply::left(&f.mat, mode, &q);
                }
            }
        }
        Ok(grad)
    }
}

/// W = U (|τ⟩ ⊗ I_B): the circuit restricted to a fixed embedding ket, c² × c.
pub fn embed_isometry(u: &CMatrix, tau: &DVector<C64>) -> CMatrix {
    let c = tau.len();
    let rows = u.nrows();
    let mut w = CMatrix::zeros(rows, c);
    for j in 0..c {
        for (k, tk) in tau.iter().enumerate() {
            if *tk == ZERO {
                continue;
            }
            let col = k * c + j;
            for r in 0..rows {
                w[(r, j)] += u[(r, col)] * tk;
            }
        }
    }
    w
}

/// tr_B(W σ W†): the retained slot-A state.
pub fn reduced_output(w: &CMatrix, sigma: &CMatrix) -> CMatrix {
    let c = sigma.nrows();
    let y = linalg::matmul(w, sigma);
    let mut out = CMatrix::zeros(c, c);
    for i2 in 0..c {
        for i in 0..c {
            let mut acc = ZERO;
            for b in 0..c {
                let ri = i * c + b;
                let ri2 = i2 * c + b;
                for j in 0..c {
                    acc += y[(ri, j)] * w[(ri2, j)].conj();
                }
            }
            out[(i, i2)] = acc;
        }
    }
    linalg::hermitian_part(&out)
}

/// Adjoint seed of one loss term: `(|τ⟩⊗I) σ W† (Λ⊗I)`, where `Λ = ∂ℓ/∂ρ̃`
/// for the slot-A output. Summing `weight · seed` over terms gives the `Z`
/// of [`Circuit::adjoint_gradient`].
pub fn adjoint_seed(tau: &DVector<C64>, sigma: &CMatrix, w: &CMatrix, lambda: &CMatrix) -> CMatrix {
    let c = sigma.nrows();
    let dim = c * c;
    // v = σ W† (c × c²), then v (Λ ⊗ I)
    let v = linalg::matmul(sigma, &w.adjoint());
    let mut v2 = CMatrix::zeros(c, dim);
    for i2 in 0..c {
        for b in 0..c {
            let col = i2 * c + b;
            for i in 0..c {
                let l = lambda[(i, i2)];
                if l == ZERO {
                    continue;
                }
                for j in 0..c {
                    v2[(j, col)] += v[(j, i * c + b)] * l;
                }
            }
        }
    }
    let mut z = CMatrix::zeros(dim, dim);
    for col in 0..dim {
        for (k, tk) in tau.iter().enumerate() {
            if *tk == ZERO {
                continue;
            }
            for b in 0..c {
                z[(k * c + b, col)] += tk * v2[(b, col)];
            }
        }
    }
    z
}

/// One 16-parameter layer as a two-mode gate.
pub fn layer_unitary(layer_params: &[f64], cutoff: CutoffDim) -> Result<GateMatrix> {
    let theta = ThetaVector::new(1, layer_params.to_vec())?;
    denoiser_unitary(&theta, cutoff)
}

/// U(ϑ) = U_L ⋯ U_1.
pub fn denoiser_unitary(theta: &ThetaVector, cutoff: CutoffDim) -> Result<GateMatrix> {
    let mut circuit = Circuit::new(theta, cutoff)?;
    GateMatrix::from_matrix(2, cutoff, circuit.suffix.swap_remove(0))
}

/// A circuit bound to its embedding states, ready to run denoising steps.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cutoff: CutoffDim,
    cfg: TimeEmbedConfig,
    unitary: CMatrix,
    embeds: Vec<DVector<C64>>,
}

#[derive(Debug, Clone)]
pub struct ChainResult {
    pub state: DensityMatrix,
    /// `(t, F(reference, ρ̃_t))` from `t_start` down to 0 when a reference was given.
    pub curve: Option<Vec<(usize, f64)>>,
}

/// All embedding kets τ_0..τ_T.
pub fn embedding_kets(cfg: &TimeEmbedConfig, cutoff: CutoffDim) -> Result<Vec<DVector<C64>>> {
    (0..=cfg.steps).map(|t| Ok(time_embed_ket(t, cfg, cutoff)?.amplitudes().clone())).collect()
}

impl Denoiser {
    pub fn new(theta: &ThetaVector, cfg: TimeEmbedConfig, cutoff: CutoffDim) -> Result<Self> {
        let u = denoiser_unitary(theta, cutoff)?;
        Self::with_unitary(u, cfg)
    }

    pub fn with_unitary(u: GateMatrix, cfg: TimeEmbedConfig) -> Result<Self> {
        if u.arity() != 2 {
            return Err(Error::Shape("denoiser needs a two-mode unitary".into()));
        }
        let cutoff = u.cutoff();
        Ok(Denoiser { cutoff, cfg, embeds: embedding_kets(&cfg, cutoff)?, unitary: u.into_matrix() })
    }

    pub fn cutoff(&self) -> CutoffDim {
        self.cutoff
    }

    pub fn config(&self) -> &TimeEmbedConfig {
        &self.cfg
    }

    pub fn unitary(&self) -> &CMatrix {
        &self.unitary
    }

    pub fn embed(&self, t: usize) -> Result<&DVector<C64>> {
        self.embeds.get(t).ok_or(Error::Timestep { t, max: self.cfg.steps })
    }

    /// ρ̃_{t−1} = tr_B(U(τ_t ⊗ ρ_t)U†).
    pub fn step(&self, rho_t: &DensityMatrix, t: usize) -> Result<DensityMatrix> {
        if t == 0 || t > self.cfg.steps {
            return Err(Error::Timestep { t, max: self.cfg.steps });
        }
        if rho_t.modes() != 1 {
            return Err(Error::Shape("denoise_step takes a single-mode state".into()));
        }
        if rho_t.cutoff() != self.cutoff {
            return Err(Error::CutoffMismatch(rho_t.cutoff().get(), self.cutoff.get()));
        }
        let w = embed_isometry(&self.unitary, self.embed(t)?);
        DensityMatrix::from_matrix_unchecked(1, self.cutoff, reduced_output(&w, rho_t.matrix()))
    }

    /// Steps t_start, t_start − 1, …, 1, each consuming the previous output.
    pub fn chain(&self, rho_start: &DensityMatrix, t_start: usize, reference: Option<&DensityMatrix>) -> Result<ChainResult> {
        if t_start == 0 || t_start > self.cfg.steps {
            return Err(Error::Timestep { t: t_start, max: self.cfg.steps });
        }
        let mut curve = match reference {
            Some(r) => Some(vec![(t_start, fock::fidelity(r, rho_start)?)]),
            None => None,
        };
        let mut rho = rho_start.clone();
        for t in (1..=t_start).rev() {
            rho = self.step(&rho, t)?;
            if let (Some(points), Some(r)) = (curve.as_mut(), reference) {
                points.push((t - 1, fock::fidelity(r, &rho)?));
            }
        }
        Ok(ChainResult { state: rho, curve })
    }
}

pub fn denoise_step(
    rho_t: &DensityMatrix,
    t: usize,
    theta: &ThetaVector,
    cfg: &TimeEmbedConfig,
    cutoff: CutoffDim,
) -> Result<DensityMatrix> {
    Denoiser::new(theta, *cfg, cutoff)?.step(rho_t, t)
}

/// Algorithm-2 backward chain from `rho_start` at `t_start` down to ρ̃_0.
pub fn backward_chain(
    rho_start: &DensityMatrix,
    t_start: usize,
    theta: &ThetaVector,
    cfg: &TimeEmbedConfig,
    cutoff: CutoffDim,
    reference: Option<&DensityMatrix>,
) -> Result<ChainResult> {
    Denoiser::new(theta, *cfg, cutoff)?.chain(rho_start, t_start, reference)
}
