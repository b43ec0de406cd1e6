//! Per-step losses and their exact gradient through the circuit.

use nalgebra::DVector;

use crate::denoiser::{self, Circuit, Denoiser};
use crate::fock::{self, DensityMatrix};
use crate::linalg::{CMatrix, C64};
use crate::par::{self, ExecMode};
use crate::{Error, Result};

/// (tr ρ − 1)²
pub fn trace_penalty(rho: &DensityMatrix) -> f64 {
    (rho.trace() - 1.0).powi(2)
}

/// 1 − F(ρ_{t−1}, ρ̃_{t−1}) + γ P(ρ̃_{t−1})
pub fn step_loss(rho_prev: &DensityMatrix, rho_pred: &DensityMatrix, gamma: f64) -> Result<f64> {
    Ok(1.0 - fock::fidelity_to_target(rho_prev, rho_pred)? + gamma * trace_penalty(rho_pred))
}

/// One supervised pair: the denoiser sees `input` at timestep `t` and its
/// output is compared against `target`.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub input: DensityMatrix,
    pub t: usize,
    pub target: DensityMatrix,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermReport {
    pub t: usize,
    pub weight: f64,
    pub fidelity: f64,
    pub trace: f64,
    pub penalty: f64,
    pub loss: f64,
}

/// Weighted loss of a batch. By convention `terms[0]` is the t = 1 term L_0.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<TermReport>,
}

impl LossReport {
    fn from_terms(terms: Vec<TermReport>) -> Self {
        let total = terms.iter().fold(0.0, |acc, r| acc + r.weight * r.loss);
        LossReport { total, terms }
    }

    pub fn loss_t0(&self) -> f64 {
        self.terms.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn mean_fidelity(&self) -> f64 {
        self.terms.iter().map(|r| r.fidelity).sum::<f64>() / self.terms.len() as f64
    }

    pub fn mean_penalty(&self) -> f64 {
        self.terms.iter().map(|r| r.penalty).sum::<f64>() / self.terms.len() as f64
    }
}

fn report(term: &LossTerm, fidelity: f64, trace: f64, gamma: f64) -> TermReport {
    let penalty = (trace - 1.0).powi(2);
    TermReport { t: term.t, weight: term.weight, fidelity, trace, penalty, loss: 1.0 - fidelity + gamma * penalty }
}

/// Loss of a batch under a fixed denoiser.
pub fn evaluate(den: &Denoiser, terms: &[LossTerm], gamma: f64, mode: ExecMode) -> Result<LossReport> {
    let reports = par::try_map(mode, terms, |term| {
        let pred = den.step(&term.input, term.t)?;
        let f = fock::fidelity_to_target(&term.target, &pred)?;
        Ok::<_, Error>(report(term, f, pred.trace(), gamma))
    })?;
    Ok(LossReport::from_terms(reports))
}

/// Loss and its exact gradient with respect to every circuit parameter.
///
/// Each term contributes `dℓ = Re tr(Λ dρ̃)` with `Λ = −∂F/∂ρ̃ + 2γ(tr ρ̃ − 1)I`;
/// the weighted adjoint seeds are summed in batch order and pushed through
/// the circuit once.
pub fn evaluate_with_grad(
    circuit: &Circuit,
    embeds: &[DVector<C64>],
    terms: &[LossTerm],
    gamma: f64,
    mode: ExecMode,
) -> Result<(LossReport, Vec<f64>)> {
    let u = circuit.unitary();
    let parts = par::try_map(mode, terms, |term| {
        let tau = embeds.get(term.t).ok_or(Error::Timestep { t: term.t, max: embeds.len().saturating_sub(1) })?;
        let sigma = term.input.matrix();
        if sigma.nrows() != tau.len() {
            return Err(Error::CutoffMismatch(term.input.cutoff().get(), tau.len()));
        }
        let w = denoiser::embed_isometry(u, tau);
        let pred = DensityMatrix::from_matrix_unchecked(1, term.input.cutoff(), denoiser::reduced_output(&w, sigma))?;
        let (f, g) = fock::fidelity_with_grad(&term.target, &pred)?;
        let trace = pred.trace();
        let lambda = CMatrix::identity(tau.len(), tau.len()).map(|z| z * (2.0 * gamma * (trace - 1.0))) - g;
        let seed = denoiser::adjoint_seed(tau, sigma, &w, &lambda);
        Ok((report(term, f, trace, gamma), seed))
    })?;
    let dim = u.nrows();
    let mut z = CMatrix::zeros(dim, dim);
    let mut reports = Vec::with_capacity(parts.len());
    for ((rep, seed), term) in parts.into_iter().zip(terms) {
        z += seed.map(|v| v * term.weight);
        reports.push(rep);
    }
    let grad = circuit.adjoint_gradient(&z)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    Ok((LossReport::from_terms(reports), grad))
}
