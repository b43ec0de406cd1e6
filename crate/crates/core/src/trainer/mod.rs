//! Training: configuration, batch construction for the generative and
//! restoration regimes, gradient dispatch and the Adam loop.

pub mod estimators;
pub mod loss;
pub mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

use crate::denoiser::{self, param_init, Circuit, Denoiser, ThetaVector, TimeEmbedConfig};
use crate::diffusion::{linear_schedule, Environment, ForwardProcess, NoiseSchedule};
use crate::fock::{fmt_f64, make_coherent, CutoffDim, DensityMatrix, Ket};
use crate::par::ExecMode;
use crate::{Error, Result};

pub use estimators::{grad_central_fd, grad_spsa, spsa_samples};
pub use loss::{evaluate, evaluate_with_grad, step_loss, trace_penalty, LossReport, LossTerm, TermReport};
pub use optim::{adam_update, lr_at, AdamState};

/// Targets whose truncated norm deficit reaches this are rejected.
pub const MAX_TAIL_MASS: f64 = 1e-4;
/// Training stops once the loss changes by less than this (relative) over
/// [`CONVERGENCE_WINDOW`] iterations.
pub const CONVERGENCE_TOL: f64 = 1e-5;
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    CentralFd,
    Spsa,
    Analytic,
}

/// Every training hyperparameter. Serialized names follow the tables of the
/// experimental protocol (`eta_0`, `eta_T`, `lambda`, `batch_size`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "cutoff_dim")]
    pub cutoff: usize,
    pub layers: usize,
    #[serde(rename = "total_timesteps")]
    pub steps: usize,
    pub nbar: f64,
    #[serde(rename = "eta_0")]
    pub eta0: f64,
    #[serde(rename = "eta_T")]
    pub eta_t: f64,
    /// Carried as metadata only; the η endpoints define the schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    pub batch_size: usize,
    #[serde(alias = "epochs")]
    pub max_iters: usize,
    #[serde(rename = "learning_rate")]
    pub lr0: f64,
    pub decay_steps: usize,
    pub decay_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub grad_mode: GradMode,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha_embed")]
    pub alpha_embed: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_spsa_avg")]
    pub spsa_avg: usize,
    #[serde(default = "default_fd_step")]
    pub spsa_perturb: f64,
    #[serde(default)]
    pub exec: ExecMode,
}

fn default_fd_step() -> f64 {
    1e-4
}

fn default_alpha_embed() -> f64 {
    1.0
}

fn default_init_scale() -> f64 {
    0.01
}

fn default_spsa_avg() -> usize {
    8
}

impl TrainConfig {
    /// Full-scale generative hyperparameters: c = 15, L = 30, T = 112.
    pub fn paper_generative() -> Self {
        TrainConfig {
            cutoff: 15,
            layers: 30,
            steps: 112,
            nbar: 0.0,
            eta0: 0.99974,
            eta_t: 0.99331,
            beta_start: Some(1e-4),
            beta_end: Some(0.05),
            batch_size: 24,
            max_iters: 99,
            lr0: 0.00778,
            decay_steps: 8,
            decay_rate: 0.9427,
            lambda: 8.55e-5,
            gamma: 100.0,
            grad_mode: GradMode::CentralFd,
            fd_step: 1e-4,
            seed: 0,
            alpha_embed: 1.0,
            init_scale: default_init_scale(),
            spsa_avg: default_spsa_avg(),
            spsa_perturb: default_fd_step(),
            exec: ExecMode::Parallel,
        }
    }

    /// Full-scale restoration hyperparameters: T = 150, B = 48.
    pub fn paper_restoration() -> Self {
        TrainConfig {
            steps: 150,
            batch_size: 48,
            max_iters: 112,
            lr0: 0.00045,
            decay_steps: 24,
            decay_rate: 0.906,
            lambda: 0.16,
            ..Self::paper_generative()
        }
    }

    /// Desk-scale generative profile: c = 8, T = 30, L = 8, B = 8.
    pub fn desk_generative() -> Self {
        TrainConfig {
            cutoff: 8,
            layers: 8,
            steps: 30,
            eta0: 0.95,
            eta_t: 0.85,
            batch_size: 8,
            max_iters: 3000,
            lr0: 0.01,
            decay_steps: 100,
            decay_rate: 0.95,
            lambda: 0.1,
            grad_mode: GradMode::Analytic,
            ..Self::paper_generative()
        }
    }

    /// Desk-scale restoration profile: c = 8, T = 40, L = 8.
    pub fn desk_restoration() -> Self {
        TrainConfig {
            cutoff: 8,
            layers: 8,
            steps: 40,
            nbar: 0.5,
            eta0: 0.99,
            eta_t: 0.94,
            batch_size: 12,
            max_iters: 1500,
            lr0: 0.005,
            decay_steps: 100,
            decay_rate: 0.906,
            lambda: 0.16,
            grad_mode: GradMode::Analytic,
            ..Self::paper_restoration()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        CutoffDim::new(self.cutoff).map_err(|e| Error::Config(e.to_string()))?;
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.steps < 2 {
            return bad(format!("total_timesteps must be at least 2, got {}", self.steps));
        }
        if self.batch_size == 0 || self.batch_size > self.steps - 1 {
            return bad(format!("batch_size must be in 1..={} for sampling without replacement, got {}", self.steps - 1, self.batch_size));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        for (name, v) in [("eta_0", self.eta0), ("eta_T", self.eta_t)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("learning_rate", self.lr0),
            ("decay_rate", self.decay_rate),
            ("fd_step", self.fd_step),
            ("alpha_embed", self.alpha_embed),
            ("spsa_perturb", self.spsa_perturb),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.decay_steps == 0 {
            return bad("decay_steps must be positive".into());
        }
        for (name, v) in [("nbar", self.nbar), ("lambda", self.lambda), ("gamma", self.gamma), ("init_scale", self.init_scale)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.grad_mode == GradMode::Spsa && self.spsa_avg == 0 {
            return bad("spsa_avg must be at least 1".into());
        }
        Ok(())
    }

    pub fn cutoff_dim(&self) -> Result<CutoffDim> {
        CutoffDim::new(self.cutoff)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.eta0, self.eta_t, self.steps)
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::new(self.nbar)
    }

    pub fn embed_config(&self) -> Result<TimeEmbedConfig> {
        TimeEmbedConfig::new(self.alpha_embed, self.steps)
    }
}

/// B distinct timesteps from {2, …, T}, uniformly without replacement.
pub fn sample_timesteps<R: Rng + ?Sized>(batch: usize, steps: usize, rng: &mut R) -> Result<Vec<usize>> {
    if steps < 2 || batch > steps - 1 {
        return Err(Error::Config(format!("cannot draw {batch} distinct timesteps from 2..={steps}")));
    }
    Ok(rand::seq::index::sample(rng, steps - 1, batch).into_iter().map(|i| i + 2).collect())
}

/// Coherent state prepared by an x-displacement `s` followed by a rotation
/// `phi`. With x̂ = (â + â†)/√2 the displacement amplitude is α = s/√2.
pub fn x_rotated_coherent(s: f64, phi: f64, cutoff: CutoffDim) -> Ket {
    make_coherent(num_complex::Complex64::from_polar(s / SQRT_2, phi), cutoff)
}

/// Draws the clean coherent states of restoration training.
#[derive(Debug, Clone)]
pub struct RestorationSampler {
    s_max: f64,
    rng: ChaCha8Rng,
}

impl RestorationSampler {
    pub fn new(s_max: f64, seed: u64) -> Result<Self> {
        if !(s_max >= 0.0) || !s_max.is_finite() {
            return Err(Error::Config(format!("s_max must be non-negative, got {s_max}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(RestorationSampler { s_max, rng })
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    /// `(s, φ)` with s ∈ [0, s_max], φ ∈ [0, 2π).
    pub fn sample(&mut self) -> (f64, f64) {
        let s = if self.s_max == 0.0 { 0.0 } else { self.rng.random_range(0.0..=self.s_max) };
        let phi = self.rng.random_range(0.0..2.0 * PI);
        (s, phi)
    }
}

fn check_tail(target: &DensityMatrix) -> Result<()> {
    let deficit = 1.0 - target.trace();
    if deficit >= MAX_TAIL_MASS {
        return Err(Error::CutoffTooSmall(format!(
            "target keeps only {:.6} of its norm below cutoff {} (tail {:.3e} ≥ {MAX_TAIL_MASS:e})",
            target.trace(),
            target.cutoff().get(),
            deficit
        )));
    }
    Ok(())
}

/// The diffused sequence ρ_0, ρ_1, …, ρ_T of one generative target.
#[derive(Debug, Clone)]
pub struct GenerativeProblem {
    states: Vec<DensityMatrix>,
    cfg: TrainConfig,
}

impl GenerativeProblem {
    pub fn new(target: &DensityMatrix, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let cd = cfg.cutoff_dim()?;
        if target.modes() != 1 || target.cutoff() != cd {
            return Err(Error::Config(format!("target must be a single-mode state at cutoff {}", cfg.cutoff)));
        }
        check_tail(target)?;
        let fwd = ForwardProcess::new(cfg.schedule()?, cfg.environment()?, cd);
        let states = (0..=cfg.steps).map(|t| fwd.diffuse_to(target, t)).collect::<Result<Vec<_>>>()?;
        Ok(GenerativeProblem { states, cfg: cfg.clone() })
    }

    /// ρ_t for t = 0..=T.
    pub fn states(&self) -> &[DensityMatrix] {
        &self.states
    }

    /// L_0 on the pair (ρ_1 → ρ_0) plus B sampled pairs (ρ_t → ρ_{t−1}) with
    /// weight λ/B.
    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<LossTerm>> {
        let s = &self.states;
        let mut terms = vec![LossTerm { input: s[1].clone(), t: 1, target: s[0].clone(), weight: 1.0 }];
        let w = self.cfg.lambda / self.cfg.batch_size as f64;
        for t in sample_timesteps(self.cfg.batch_size, self.cfg.steps, rng)? {
            terms.push(LossTerm { input: s[t].clone(), t, target: s[t - 1].clone(), weight: w });
        }
        Ok(terms)
    }
}

/// One generative batch loss L_total = L_0 + λ(1/B)Σ L_{t−1}.
pub fn total_loss<R: Rng + ?Sized>(
    theta: &ThetaVector,
    rho0: &DensityMatrix,
    sched: &NoiseSchedule,
    env: Environment,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossReport> {
    cfg.validate()?;
    if sched.steps() != cfg.steps {
        return Err(Error::Config(format!("schedule has {} steps, config {}", sched.steps(), cfg.steps)));
    }
    let cd = cfg.cutoff_dim()?;
    let fwd = ForwardProcess::new(sched.clone(), env, cd);
    let w = cfg.lambda / cfg.batch_size as f64;
    let mut terms = vec![LossTerm { input: fwd.diffuse_to(rho0, 1)?, t: 1, target: rho0.clone(), weight: 1.0 }];
    for t in sample_timesteps(cfg.batch_size, cfg.steps, rng)? {
        // both sides of the pair come from direct jumps
        terms.push(LossTerm { input: fwd.diffuse_to(rho0, t)?, t, target: fwd.diffuse_to(rho0, t - 1)?, weight: w });
    }
    evaluate(&Denoiser::new(theta, cfg.embed_config()?, cd)?, &terms, cfg.gamma, cfg.exec)
}

/// Restoration batch: every term draws its own clean state |β⟩, diffuses it
/// with the training schedule and asks for one step of recovery.
fn restoration_batch<R: Rng + ?Sized>(
    fwd: &ForwardProcess,
    sampler: &mut RestorationSampler,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<LossTerm>> {
    let cd = cfg.cutoff_dim()?;
    let w = cfg.lambda / cfg.batch_size as f64;
    let mut pairs = vec![(1, 1.0)];
    pairs.extend(sample_timesteps(cfg.batch_size, cfg.steps, rng)?.into_iter().map(|t| (t, w)));
    pairs
        .into_iter()
        .map(|(t, weight)| {
            let (s, phi) = sampler.sample();
            let clean = x_rotated_coherent(s, phi, cd).to_density();
            Ok(LossTerm { input: fwd.diffuse_to(&clean, t)?, t, target: fwd.diffuse_to(&clean, t - 1)?, weight })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_t0: f64,
    pub mean_step_fidelity: f64,
    pub mean_trace_penalty: f64,
    pub wall_ms: u128,
}

pub const METRICS_HEADER: &str = "iter,lr,loss_total,loss_t0,mean_step_fidelity,mean_trace_penalty,wall_ms";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter,
            fmt_f64(r.lr),
            fmt_f64(r.loss_total),
            fmt_f64(r.loss_t0),
            fmt_f64(r.mean_step_fidelity),
            fmt_f64(r.mean_trace_penalty),
            r.wall_ms
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest batch loss seen.
    pub theta: ThetaVector,
    pub best_loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub metrics: Vec<MetricsRow>,
}

fn zero_clamped(theta: &ThetaVector, grad: &mut [f64]) {
    for (k, g) in grad.iter_mut().enumerate() {
        if theta.is_clamped(k) {
            *g = 0.0;
        }
    }
}

/// Loss and gradient of one batch under the configured estimator.
pub fn batch_gradient<R: Rng + ?Sized>(
    theta: &ThetaVector,
    terms: &[LossTerm],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossReport, Vec<f64>)> {
    let cd = cfg.cutoff_dim()?;
    let ecfg = cfg.embed_config()?;
    let (rep, mut grad) = match cfg.grad_mode {
        GradMode::Analytic => {
            let circuit = Circuit::new(theta, cd)?;
            let embeds = denoiser::embedding_kets(&ecfg, cd)?;
            evaluate_with_grad(&circuit, &embeds, terms, cfg.gamma, cfg.exec)?
        }
        GradMode::CentralFd | GradMode::Spsa => {
            let rep = evaluate(&Denoiser::new(theta, ecfg, cd)?, terms, cfg.gamma, cfg.exec)?;
            // probes are parallel already; each loss runs its terms sequentially
            let loss = |x: &[f64]| -> Result<f64> {
                let th = theta.with_values(x.to_vec())?;
                Ok(evaluate(&Denoiser::new(&th, ecfg, cd)?, terms, cfg.gamma, ExecMode::Sequential)?.total)
            };
            let g = if cfg.grad_mode == GradMode::CentralFd {
                grad_central_fd(loss, theta.values(), cfg.fd_step, cfg.exec)?
            } else {
                grad_spsa(loss, theta.values(), cfg.spsa_perturb, rng, cfg.spsa_avg, cfg.exec)?
            };
            (rep, g)
        }
    };
    zero_clamped(theta, &mut grad);
    Ok((rep, grad))
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn run<F>(cfg: &TrainConfig, mut next_batch: F) -> Result<TrainOutcome>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Vec<LossTerm>>,
{
    let start = Instant::now();
    let mut theta = param_init(cfg.layers, cfg.init_scale, cfg.seed)?;
    let mut rng = training_rng(cfg.seed);
    let mut adam = AdamState::new(theta.len());
    let mut best = (f64::INFINITY, theta.clone());
    let mut losses = Vec::with_capacity(cfg.max_iters);
    let mut metrics = Vec::with_capacity(cfg.max_iters);
    let mut converged = false;
    for iter in 0..cfg.max_iters {
        let terms = next_batch(&mut rng)?;
        let (rep, grad) = batch_gradient(&theta, &terms, cfg, &mut rng)?;
        if !rep.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {iter}")));
        }
        let lr = lr_at(iter, cfg.lr0, cfg.decay_steps, cfg.decay_rate);
        metrics.push(MetricsRow {
            iter,
            lr,
            loss_total: rep.total,
            loss_t0: rep.loss_t0(),
            mean_step_fidelity: rep.mean_fidelity(),
            mean_trace_penalty: rep.mean_penalty(),
            wall_ms: start.elapsed().as_millis(),
        });
        if rep.total < best.0 {
            best = (rep.total, theta.clone());
        }
        losses.push(rep.total);
        if iter >= CONVERGENCE_WINDOW {
            let old = losses[iter - CONVERGENCE_WINDOW];
            if (rep.total - old).abs() < CONVERGENCE_TOL * old.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        let (values, next) = adam_update(&adam, theta.values(), &grad, lr)?;
        theta = theta.with_values(values)?;
        adam = next;
    }
    Ok(TrainOutcome {
        theta: best.1,
        best_loss: best.0,
        initial_loss: losses[0],
        iterations: losses.len(),
        converged,
        metrics,
    })
}

/// Algorithm-1 training against one fixed target.
pub fn train_generative(target: &DensityMatrix, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let problem = GenerativeProblem::new(target, cfg)?;
    run(cfg, |rng| problem.batch(rng))
}

/// Restoration training over freshly sampled coherent states.
pub fn train_restoration(sampler: &RestorationSampler, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cd = cfg.cutoff_dim()?;
    let fwd = ForwardProcess::new(cfg.schedule()?, cfg.environment()?, cd);
    let mut sampler = sampler.clone();
    run(cfg, |rng| restoration_batch(&fwd, &mut sampler, cfg, rng))
}
