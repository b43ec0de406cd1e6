//! Self-checks of the simulator against closed forms and independent
//! reference paths. Every check is an error measure compared with a bound.
//!
//! A fault can be injected into the physics under test to confirm the
//! suites notice: the reference side of each comparison is never faulted.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cvqd_core::denoiser::{embedding_kets, param_init, Circuit, Denoiser, ThetaVector, TimeEmbedConfig};
use cvqd_core::diffusion::{self, Environment, NoiseSchedule};
use cvqd_core::fock::{self, CutoffDim, DensityMatrix, Mode, PhasePoint, Quadrature};
use cvqd_core::gates::{self, GateKind};
use cvqd_core::linalg::{self, c, CMatrix, C64};
use cvqd_core::trainer::{evaluate, evaluate_with_grad, grad_central_fd, spsa_samples, LossTerm};
use cvqd_core::ExecMode;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Theorem1,
    #[value(name = "variance_law")]
    VarianceLaw,
    Gates,
    Channel,
    Fidelity,
    Gradients,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Theorem1, Suite::VarianceLaw, Suite::Gates, Suite::Channel, Suite::Fidelity, Suite::Gradients];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Theorem1 => "theorem1",
            Suite::VarianceLaw => "variance_law",
            Suite::Gates => "gates",
            Suite::Channel => "channel",
            Suite::Fidelity => "fidelity",
            Suite::Gradients => "gradients",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Scales the last cumulative transmissivity of every schedule by 0.999.
    EtaBar,
    /// Environment occupation 0.01 higher than requested.
    Nbar,
    /// Loss channel evaluated in the truncated joint space.
    Truncation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ch in &self.checks {
            let _ = writeln!(
                out,
                "[{}] {:<12} {:<58} measured {:.3e}  bound {:.1e}",
                if ch.pass { "PASS" } else { "FAIL" },
                ch.suite.name(),
                ch.name,
                ch.measured,
                ch.bound
            );
        }
        let _ = writeln!(out, "{} checks, {} failed", self.checks.len(), self.failures());
        out
    }
}

/// Runs the selected suites in the order given. Each suite draws from its
/// own random stream, so results do not depend on which others ran.
pub fn run(suites: &[Suite], fault: Option<Fault>, seed: u64) -> CliResult<Report> {
    let phys = Physics { fault };
    let mut checks = Vec::new();
    for &suite in suites {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(suite as u64 + 1);
        let mut sink = Sink { suite, checks: &mut checks };
        match suite {
            Suite::Theorem1 => theorem1(&phys, &mut rng, &mut sink)?,
            Suite::VarianceLaw => variance_law(&phys, &mut sink)?,
            Suite::Gates => gate_checks(&mut sink)?,
            Suite::Channel => channel_checks(&phys, &mut rng, &mut sink)?,
            Suite::Fidelity => fidelity_checks(&mut rng, &mut sink)?,
            Suite::Gradients => gradient_checks(&mut rng, &mut sink)?,
        }
    }
    Ok(Report { seed, fault, checks })
}

struct Sink<'a> {
    suite: Suite,
    checks: &'a mut Vec<Check>,
}

impl Sink<'_> {
    fn push(&mut self, name: impl Into<String>, measured: f64, bound: f64) {
        // NaN never passes
        let pass = measured <= bound;
        self.checks.push(Check { suite: self.suite, name: name.into(), measured, bound, pass });
    }
}

/// The forward physics as exercised by the suites, possibly faulted.
struct Physics {
    fault: Option<Fault>,
}

impl Physics {
    fn env(&self, nbar: f64) -> CliResult<Environment> {
        let shift = if self.fault == Some(Fault::Nbar) { 0.01 } else { 0.0 };
        Ok(Environment::new(nbar + shift)?)
    }

    fn channel(&self, rho: &DensityMatrix, eta: f64, nbar: f64) -> CliResult<DensityMatrix> {
        let env = self.env(nbar)?;
        Ok(if self.fault == Some(Fault::Truncation) {
            diffusion::thermal_loss_step_truncated(rho, eta, env)?
        } else {
            diffusion::thermal_loss_step(rho, eta, env)?
        })
    }

    fn schedule(&self, etas: Vec<f64>) -> CliResult<NoiseSchedule> {
        let s = NoiseSchedule::from_steps(etas)?;
        Ok(if self.fault == Some(Fault::EtaBar) { s.with_perturbed_eta_bar(s.steps(), 0.999)? } else { s })
    }

    fn jump(&self, rho: &DensityMatrix, t: usize, sched: &NoiseSchedule, nbar: f64) -> CliResult<DensityMatrix> {
        self.channel(rho, sched.eta_bar(t)?, nbar)
    }
}

fn cut(n: usize) -> CutoffDim {
    CutoffDim::new(n).expect("cutoff >= 2")
}

fn random_alpha<R: Rng>(rng: &mut R, max: f64) -> C64 {
    C64::from_polar(max * rng.random::<f64>().sqrt(), rng.random_range(0.0..std::f64::consts::TAU))
}

fn random_mixed<R: Rng>(rng: &mut R, cd: CutoffDim) -> CliResult<DensityMatrix> {
    let n = cd.get();
    let g = CMatrix::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let m = &g * g.adjoint();
    let tr = linalg::trace(&m).re;
    Ok(DensityMatrix::from_matrix(1, cd, m.map(|z| z / tr))?)
}

fn random_ket<R: Rng>(rng: &mut R, cd: CutoffDim) -> DVector<C64> {
    let v = DVector::from_fn(cd.get(), |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let norm = v.norm();
    v.map(|z| z / norm)
}

fn pure(v: &DVector<C64>, cd: CutoffDim) -> CliResult<DensityMatrix> {
    Ok(DensityMatrix::from_matrix(1, cd, v * v.adjoint())?)
}

pub const THEOREM1_CASES: usize = 50;

fn theorem1<R: Rng>(phys: &Physics, rng: &mut R, sink: &mut Sink) -> CliResult<()> {
    let cd = cut(12);
    let mut worst: f64 = 0.0;
    for _ in 0..THEOREM1_CASES {
        let len = rng.random_range(1..=6);
        let etas: Vec<f64> = (0..len).map(|_| rng.random_range(0.7..=1.0)).collect();
        let nbar = if rng.random::<bool>() { 0.5 } else { 0.0 };
        let rho0 = fock::make_coherent(random_alpha(rng, 1.0), cd).to_density();
        let clean = NoiseSchedule::from_steps(etas.clone())?;
        let reference = diffusion::diffuse_sequential(&rho0, len, &clean, Environment::new(nbar)?)?;
        let direct = phys.jump(&rho0, len, &phys.schedule(etas)?, nbar)?;
        worst = worst.max(linalg::trace_distance(reference.matrix(), direct.matrix()));
    }
    sink.push(format!("sequential vs direct jump, {THEOREM1_CASES} cases, c=12 (trace distance)"), worst, 1e-8);
    Ok(())
}

fn variance_law(phys: &Physics, sink: &mut Sink) -> CliResult<()> {
    let cd = cut(25);
    let nbar = 0.5;
    let rho = fock::make_coherent(c(0.7), cd).to_density();
    for k in 1..=9 {
        let eta = k as f64 / 10.0;
        let out = phys.channel(&rho, eta, nbar)?;
        let var = fock::quadrature_variance(&out, Quadrature::X)?;
        sink.push(format!("x variance after loss, eta={eta:.1}, nbar=0.5, alpha=0.7"), (var - (0.5 + (1.0 - eta) * nbar)).abs(), 1e-3);
    }
    Ok(())
}

/// Largest deviation of U†U from the identity on the first `cols` basis columns.
fn restricted_unitarity(u: &CMatrix, cols: &[usize]) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in cols {
        for &j in cols {
            let dot = u.column(i).dotc(&u.column(j));
            let expect = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - c(expect)).norm());
        }
    }
    worst
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn gate_of(kind: GateKind, p: &[f64], cd: CutoffDim) -> CMatrix {
    match kind {
        GateKind::DRe | GateKind::DIm => gates::displacement(C64::new(p[0], p[1]), cd).into_matrix(),
        GateKind::R => gates::rotation(p[0], cd).into_matrix(),
        GateKind::S => gates::squeeze(p[0], cd).into_matrix(),
        GateKind::BsTheta | GateKind::BsPhi => gates::beamsplitter_by_angle(p[0], p[1], cd).into_matrix(),
        GateKind::K => gates::kerr(p[0], cd).into_matrix(),
    }
}

fn gate_checks(sink: &mut Sink) -> CliResult<()> {
    let cd = cut(20);
    let low: Vec<usize> = (0..8).collect();
    for (name, u) in [
        ("D(0.5+0.3i)", gates::displacement(C64::new(0.5, 0.3), cd)),
        ("S(0.3)", gates::squeeze(0.3, cd)),
        ("R(1.1)", gates::rotation(1.1, cd)),
        ("K(0.4)", gates::kerr(0.4, cd)),
    ] {
        sink.push(format!("unitarity of {name} on levels 0..8, c=20"), restricted_unitarity(u.matrix(), &low), 1e-6);
    }

    let c10 = cut(10);
    let bs = gates::beamsplitter_by_angle(0.7, 0.3, c10).into_matrix();
    let n = c10.get();
    let total: Vec<usize> = (0..n * n).filter(|k| k / n + k % n < n).collect();
    sink.push("beamsplitter unitarity below the cutoff, c=10", restricted_unitarity(&bs, &total), 1e-12);
    let ntot = CMatrix::from_fn(n * n, n * n, |i, j| if i == j { c((i / n + i % n) as f64) } else { c(0.0) });
    sink.push("beamsplitter conserves total photon number", linalg::max_abs(&(&bs * &ntot - &ntot * &bs)), 1e-12);
    let swap = gates::beamsplitter_by_angle(std::f64::consts::FRAC_PI_2, 0.0, c10).into_matrix();
    sink.push("50:50 limit theta=pi/2 moves |1,0> to |0,1>", (1.0 - swap[(1, n)].norm()).abs(), 1e-12);

    let c30 = cut(30);
    let alpha = C64::new(0.7, 0.3);
    let d = gates::displacement(alpha, c30).into_matrix();
    let mut err: f64 = 0.0;
    for k in 0..15 {
        let exact = (-alpha.norm_sqr() / 2.0).exp() * alpha.powu(k as u32) / factorial(k).sqrt();
        err = err.max((d[(k, 0)] - exact).norm());
    }
    sink.push("D(alpha)|0> against coherent amplitudes, c=30", err, 1e-8);

    let c40 = cut(40);
    let r: f64 = 0.4;
    let s = gates::squeeze(r, c40).into_matrix();
    let mut err: f64 = 0.0;
    for m in 0..10 {
        let exact = (-r.tanh()).powi(m as i32) * factorial(2 * m).sqrt() / (2f64.powi(m as i32) * factorial(m)) / r.cosh().sqrt();
        err = err.max((s[(2 * m, 0)] - c(exact)).norm()).max(s[(2 * m + 1, 0)].norm());
    }
    sink.push("S(r)|0> against squeezed-vacuum amplitudes, c=40", err, 1e-8);

    let rot = gates::rotation(0.9, cd).into_matrix();
    let kerr = gates::kerr(0.3, cd).into_matrix();
    let mut err: f64 = 0.0;
    for k in 0..cd.get() {
        let nk = k as f64;
        err = err.max((rot[(k, k)] - C64::from_polar(1.0, 0.9 * nk)).norm());
        err = err.max((kerr[(k, k)] - C64::from_polar(1.0, 0.3 * nk * nk)).norm());
    }
    sink.push("rotation and Kerr diagonal phases, c=20", err, 1e-12);

    let c12 = cut(12);
    let h = 1e-5;
    for (kind, p, idx) in [
        (GateKind::DRe, vec![0.3, -0.2], 0),
        (GateKind::DIm, vec![0.3, -0.2], 1),
        (GateKind::R, vec![0.7], 0),
        (GateKind::S, vec![0.25], 0),
        (GateKind::BsTheta, vec![0.6, 0.4], 0),
        (GateKind::BsPhi, vec![0.6, 0.4], 1),
        (GateKind::K, vec![0.2], 0),
    ] {
        let (_, du) = gates::gate_derivative(kind, &p, c12)?;
        let (mut up, mut dn) = (p.clone(), p.clone());
        up[idx] += h;
        dn[idx] -= h;
        let fd = (gate_of(kind, &up, c12) - gate_of(kind, &dn, c12)).map(|z| z / (2.0 * h));
        let rel = linalg::max_abs_diff(&du, &fd) / linalg::max_abs(&du).max(1e-300);
        sink.push(format!("{kind:?} derivative against central difference, c=12"), rel, 1e-6);
    }
    Ok(())
}

fn channel_checks<R: Rng>(phys: &Physics, rng: &mut R, sink: &mut Sink) -> CliResult<()> {
    let nbar = 0.5;
    let c10 = cut(10);
    let rho = random_mixed(rng, c10)?;
    let same = phys.channel(&rho, 1.0, nbar)?;
    sink.push("eta=1 leaves the state unchanged", linalg::max_abs_diff(same.matrix(), rho.matrix()), 1e-12);

    let replaced = phys.channel(&rho, 0.0, nbar)?;
    let q = nbar / (1.0 + nbar);
    let thermal = CMatrix::from_fn(10, 10, |i, j| if i == j { c(q.powi(i as i32) / (1.0 + nbar)) } else { c(0.0) });
    sink.push("eta=0 returns the thermal environment", linalg::max_abs_diff(replaced.matrix(), &thermal), 1e-12);

    let c20 = cut(20);
    let coh = fock::make_coherent(C64::new(0.6, 0.2), c20).to_density();
    let (x0, p0) = (fock::quadrature_mean(&coh, Quadrature::X)?, fock::quadrature_mean(&coh, Quadrature::P)?);
    let mut err: f64 = 0.0;
    let mut leak: f64 = 0.0;
    for eta in [0.2, 0.5, 0.8] {
        let out = phys.channel(&coh, eta, nbar)?;
        let s = f64::sqrt(eta);
        err = err.max((fock::quadrature_mean(&out, Quadrature::X)? - s * x0).abs());
        err = err.max((fock::quadrature_mean(&out, Quadrature::P)? - s * p0).abs());
        leak = leak.max((out.trace() - coh.trace()).abs());
    }
    sink.push("first moments scale by sqrt(eta), c=20", err, 1e-8);
    sink.push("trace preserved by the channel, c=20", leak, 1e-9);

    let mixed = phys.channel(&rho, 0.4, nbar)?;
    let (vals, _) = linalg::hermitian_eigen(mixed.matrix());
    sink.push("output is positive semidefinite (negated min eigenvalue)", -vals[0], 1e-12);

    let table = diffusion::linear_schedule(0.99974, 0.99331, 112)?;
    let sched = phys.schedule(table.etas().to_vec())?;
    let mut acc = 1.0;
    let mut err: f64 = 0.0;
    for t in 1..=sched.steps() {
        acc *= sched.eta(t)?;
        err = err.max((sched.eta_bar(t)? - acc).abs());
    }
    sink.push("cumulative transmissivity equals the running product, T=112", err, 1e-14);
    Ok(())
}

fn fidelity_checks<R: Rng>(rng: &mut R, sink: &mut Sink) -> CliResult<()> {
    let cd = cut(8);
    let (mut selff, mut sym, mut purity): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..5 {
        let rho = random_mixed(rng, cd)?;
        let sigma = random_mixed(rng, cd)?;
        selff = selff.max((1.0 - fock::fidelity(&rho, &rho)?).abs());
        sym = sym.max((fock::fidelity(&rho, &sigma)? - fock::fidelity(&sigma, &rho)?).abs());
        let psi = random_ket(rng, cd);
        let overlap = psi.dotc(&(sigma.matrix() * &psi)).re;
        purity = purity.max((fock::fidelity(&pure(&psi, cd)?, &sigma)? - overlap).abs());
    }
    sink.push("F(rho, rho) = 1 on random mixed states", selff, 1e-8);
    sink.push("F is symmetric on random mixed pairs", sym, 1e-8);
    sink.push("F(psi, sigma) = <psi|sigma|psi>", purity, 1e-8);

    let c30 = cut(30);
    let (a, b) = (C64::new(0.6, -0.2), C64::new(-0.1, 0.4));
    let f = fock::fidelity(&fock::make_coherent(a, c30).to_density(), &fock::make_coherent(b, c30).to_density())?;
    sink.push("coherent overlap exp(-|a-b|^2), c=30", (f - (-(a - b).norm_sqr()).exp()).abs(), 1e-8);

    let origin = [PhasePoint::new(0.0, 0.0)];
    let inv_pi = std::f64::consts::FRAC_1_PI;
    let w0 = fock::wigner(&fock::make_vacuum(cd), &origin)?[0];
    let w1 = fock::wigner(&fock::make_fock(1, cd)?, &origin)?[0];
    sink.push("Wigner at the origin: 1/pi for |0>, -1/pi for |1>", (w0 - inv_pi).abs().max((w1 + inv_pi).abs()), 1e-10);

    let var = fock::quadrature_variance(&fock::make_vacuum(cd), Quadrature::X)?;
    sink.push("vacuum x variance is 1/2", (var - 0.5).abs(), 1e-12);
    let n = fock::mean_photon(&fock::make_thermal(0.5, cut(60))?)?;
    sink.push("thermal mean photon number, nbar=0.5, c=60", (n - 0.5).abs(), 1e-8);

    let rho = random_mixed(rng, cd)?;
    let sigma = random_mixed(rng, cd)?;
    let back = fock::partial_trace(&fock::tensor_product(&rho, &sigma)?, Mode::B)?;
    sink.push("partial trace of a product state", linalg::max_abs_diff(back.matrix(), rho.matrix()), 1e-12);
    Ok(())
}

pub const GRADIENT_SAMPLES: usize = 20;
pub const SPSA_DIRECTIONS: usize = 200;

fn gradient_terms(cd: CutoffDim) -> CliResult<Vec<LossTerm>> {
    let target = fock::make_coherent(c(0.8), cd).to_density();
    let noisy = fock::make_thermal(0.3, cd)?;
    let mid = diffusion::thermal_loss_step(&target, 0.7, Environment::new(0.5)?)?;
    Ok(vec![
        LossTerm { input: noisy.clone(), t: 1, target: target.clone(), weight: 1.0 },
        LossTerm { input: target, t: 3, target: mid.clone(), weight: 0.3 },
        LossTerm { input: mid, t: 2, target: noisy, weight: 0.3 },
    ])
}

fn gradient_checks<R: Rng>(rng: &mut R, sink: &mut Sink) -> CliResult<()> {
    let (cd, layers, gamma) = (cut(8), 2, 100.0);
    let ecfg = TimeEmbedConfig::new(1.0, 4)?;
    let embeds = embedding_kets(&ecfg, cd)?;
    let terms = gradient_terms(cd)?;
    let loss = |x: &[f64]| {
        let th = ThetaVector::new(layers, x.to_vec())?;
        Ok(evaluate(&Denoiser::new(&th, ecfg, cd)?, &terms, gamma, ExecMode::Sequential)?.total)
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut worst: f64 = 0.0;
    let mut first = None;
    for _ in 0..GRADIENT_SAMPLES {
        let theta = param_init(layers, 0.5, rng.random())?;
        let (_, analytic) = evaluate_with_grad(&Circuit::new(&theta, cd)?, &embeds, &terms, gamma, ExecMode::Parallel)?;
        let fd = grad_central_fd(loss, theta.values(), 1e-5, ExecMode::Parallel)?;
        let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&fd));
        first.get_or_insert((theta, fd));
    }
    sink.push(format!("analytic vs central FD, L=2, c=8, {GRADIENT_SAMPLES} draws (relative)"), worst, 1e-5);

    let (theta, fd) = first.ok_or_else(|| CliError::Config("no gradient samples".into()))?;
    let samples = spsa_samples(loss, theta.values(), 1e-4, rng, SPSA_DIRECTIONS, ExecMode::Parallel)?;
    let k = samples.len() as f64;
    let mut dist2 = 0.0;
    let mut se2 = 0.0;
    for (i, truth) in fd.iter().enumerate() {
        let mean = samples.iter().map(|s| s[i]).sum::<f64>() / k;
        let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (k - 1.0);
        dist2 += (mean - truth).powi(2);
        se2 += var / k;
    }
    sink.push(format!("SPSA mean of {SPSA_DIRECTIONS} directions vs FD (standard errors)"), (dist2 / se2).sqrt(), 3.0);
    Ok(())
}
