//! Forward process: noise schedules and the thermal loss channel.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::fock::{self, fmt_f64, CutoffDim, DensityMatrix, Mode};
use crate::gates;
use crate::linalg::{self, CMatrix, ZERO};
use crate::{Error, Result};

/// Thermal environment with mean photon number `nbar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    nbar: f64,
}

impl Environment {
    pub fn new(nbar: f64) -> Result<Self> {
        if !(nbar >= 0.0) || !nbar.is_finite() {
            return Err(Error::OutOfRange(format!("environment mean photon number {nbar}")));
        }
        Ok(Environment { nbar })
    }

    pub fn vacuum() -> Self {
        Environment { nbar: 0.0 }
    }

    pub fn nbar(&self) -> f64 {
        self.nbar
    }
}

/// Per-step transmissivities η_1..η_T and their running products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    eta: Vec<f64>,
    /// `eta_bar[t]` for t = 0..=T, with `eta_bar[0] = 1`.
    eta_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Arbitrary per-step transmissivities, each in [0, 1].
    pub fn from_steps(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::OutOfRange("schedule needs at least one step".into()));
        }
        if let Some(bad) = eta.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::OutOfRange(format!("transmissivity {bad} outside [0, 1]")));
        }
        let mut eta_bar = Vec::with_capacity(eta.len() + 1);
        eta_bar.push(1.0);
        let mut acc = 1.0;
        for e in &eta {
            acc *= e;
            eta_bar.push(acc);
        }
        Ok(NoiseSchedule { eta, eta_bar })
    }

    pub fn steps(&self) -> usize {
        self.eta.len()
    }

    /// η_t for 1 ≤ t ≤ T.
    pub fn eta(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(self.eta[t - 1])
    }

    /// η̄_t for 0 ≤ t ≤ T.
    pub fn eta_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t, 0)?;
        Ok(self.eta_bar[t])
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    pub fn eta_bars(&self) -> &[f64] {
        &self.eta_bar
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(())
    }

    /// CSV with columns `t, eta_t, eta_bar_t`; the t = 0 row carries η = 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,eta_t,eta_bar_t\n");
        for t in 0..=self.steps() {
            let eta = if t == 0 { 1.0 } else { self.eta[t - 1] };
            let _ = writeln!(s, "{t},{},{}", fmt_f64(eta), fmt_f64(self.eta_bar[t]));
        }
        s
    }

    /// Copy with η̄ scaled at one timestep; used to check that verification
    /// detects an inconsistent schedule.
    pub fn with_perturbed_eta_bar(&self, t: usize, factor: f64) -> Result<Self> {
        self.check_t(t, 0)?;
        let mut out = self.clone();
        out.eta_bar[t] *= factor;
        Ok(out)
    }
}

/// η_t = η_0 + (η_T − η_0)·t/T for t = 1..T.
pub fn linear_schedule(eta0: f64, eta_t: f64, steps: usize) -> Result<NoiseSchedule> {
    for (name, v) in [("eta_0", eta0), ("eta_T", eta_t)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if steps == 0 {
        return Err(Error::OutOfRange("schedule needs T >= 1".into()));
    }
    let tf = steps as f64;
    let eta = (1..=steps)
        .map(|t| if t == steps { eta_t } else { eta0 + (eta_t - eta0) * t as f64 / tf })
        .collect();
    NoiseSchedule::from_steps(eta)
}

/// Endpoints of a linear β ramp expressed as transmissivities, η = 1 − β.
pub fn beta_to_eta(beta_start: f64, beta_end: f64, steps: usize) -> Result<(f64, f64)> {
    for b in [beta_start, beta_end] {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::OutOfRange(format!("beta {b} outside (0, 1)")));
        }
    }
    if steps == 0 {
        return Err(Error::OutOfRange("schedule needs T >= 1".into()));
    }
    Ok((1.0 - beta_start, 1.0 - beta_end))
}

fn check_single_mode(rho: &DensityMatrix) -> Result<()> {
    if rho.modes() != 1 {
        return Err(Error::Shape("the loss channel acts on a single-mode state".into()));
    }
    Ok(())
}

/// Thermal loss channel at one transmissivity.
///
/// The environment populations are summed until the remaining thermal tail
/// is below 1e-17, and the beamsplitter acts through its exact photon-number
/// blocks, so the only truncation is of the output state at the cutoff.
#[derive(Debug, Clone)]
pub struct LossChannel {
    cutoff: CutoffDim,
    weights: Vec<f64>,
    blocks: Vec<CMatrix>,
}

/// Deepest environment level the exact channel will sum.
const MAX_ENV_LEVEL: usize = 400;

impl LossChannel {
    pub fn new(eta: f64, env: Environment, cutoff: CutoffDim) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::OutOfRange(format!("transmissivity {eta} outside [0, 1]")));
        }
        let q = env.nbar / (1.0 + env.nbar);
        let mut weights = vec![1.0 / (1.0 + env.nbar)];
        let mut tail = q;
        while tail > 1e-17 {
            if weights.len() > MAX_ENV_LEVEL {
                return Err(Error::OutOfRange(format!("environment n̄ = {} too large", env.nbar)));
            }
            let last = *weights.last().expect("non-empty");
            weights.push(last * q);
            tail *= q;
        }
        let theta = eta.sqrt().acos();
        let top = cutoff.get() - 1 + weights.len() - 1;
        let blocks = (0..=top).map(|total| gates::beamsplitter_photon_block(theta, 0.0, total)).collect();
        Ok(LossChannel { cutoff, weights, blocks })
    }

    pub fn apply(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        check_single_mode(rho)?;
        if rho.cutoff() != self.cutoff {
            return Err(Error::CutoffMismatch(rho.cutoff().get(), self.cutoff.get()));
        }
        let c = self.cutoff.get();
        let ci = c as isize;
        let src = rho.matrix();
        let mut out = CMatrix::zeros(c, c);
        let mut kraus = vec![ZERO; c];
        for (n, &w) in self.weights.iter().enumerate() {
            // environment in |n⟩, out in |k⟩: system i ← m = i − s with s = n − k
            for s in -(ci - 1)..=(n as isize).min(ci - 1) {
                for (i, kv) in kraus.iter_mut().enumerate() {
                    let m = i as isize - s;
                    *kv = if (0..ci).contains(&m) {
                        let m = m as usize;
                        self.blocks[m + n][(i, m)]
                    } else {
                        ZERO
                    };
                }
                for j in 0..c {
                    let mj = j as isize - s;
                    if !(0..ci).contains(&mj) {
                        continue;
                    }
                    let kj = kraus[j].conj() * w;
                    for i in 0..c {
                        let mi = i as isize - s;
                        if !(0..ci).contains(&mi) {
                            continue;
                        }
                        out[(i, j)] += kraus[i] * src[(mi as usize, mj as usize)] * kj;
                    }
                }
            }
        }
        DensityMatrix::from_matrix_unchecked(1, self.cutoff, linalg::hermitian_part(&out))
    }
}

/// Tr_E[U_BS(η)(ρ ⊗ ρ_th(n̄))U_BS(η)†] with the environment on mode B.
pub fn thermal_loss_step(rho: &DensityMatrix, eta: f64, env: Environment) -> Result<DensityMatrix> {
    check_single_mode(rho)?;
    LossChannel::new(eta, env, rho.cutoff())?.apply(rho)
}

/// The same composition carried out literally in the truncated two-mode
/// space, with the environment cut at the system cutoff. Kept as a
/// cross-check: it agrees with [`thermal_loss_step`] up to the truncation
/// error of the joint space.
pub fn thermal_loss_step_truncated(rho: &DensityMatrix, eta: f64, env: Environment) -> Result<DensityMatrix> {
    check_single_mode(rho)?;
    let c = rho.cutoff();
    let bs = gates::beamsplitter_by_transmissivity(eta, c)?;
    let joint = fock::tensor_product(rho, &fock::make_thermal(env.nbar, c)?)?;
    let mixed = gates::conjugate_hermitian(joint.matrix(), bs.matrix());
    let data = fock::partial_trace_matrix(&mixed, c.get(), Mode::B);
    DensityMatrix::from_matrix_unchecked(1, c, data)
}

/// Thermal loss with a channel-level name, for corrupting states before restoration.
pub fn corrupt(rho_in: &DensityMatrix, eta_ch: f64, env: Environment) -> Result<DensityMatrix> {
    thermal_loss_step(rho_in, eta_ch, env)
}

/// ρ_t in one step through the cumulative transmissivity η̄_t. `t = 0`
/// returns the input.
pub fn diffuse_to(rho0: &DensityMatrix, t: usize, sched: &NoiseSchedule, env: Environment) -> Result<DensityMatrix> {
    let eta_bar = sched.eta_bar(t)?;
    if t == 0 {
        check_single_mode(rho0)?;
        return Ok(rho0.clone());
    }
    thermal_loss_step(rho0, eta_bar, env)
}

/// ρ_t by applying each step's channel in turn. Reference path for checking
/// the direct jump; training never uses it.
///
/// Intermediate states are held at twice the cutoff and truncated once at the
/// end. Truncating after every step drops tail amplitudes whose coherences
/// feed back into low levels on the next step, an error of order √(tail mass)
/// that has nothing to do with the composition law being checked.
pub fn diffuse_sequential(
    rho0: &DensityMatrix,
    t: usize,
    sched: &NoiseSchedule,
    env: Environment,
) -> Result<DensityMatrix> {
    let work = CutoffDim::new(2 * rho0.cutoff().get())?;
    diffuse_sequential_at(rho0, t, sched, env, work)
}

/// [`diffuse_sequential`] with an explicit working cutoff for the
/// intermediate states; `work == rho0.cutoff()` truncates after every step.
pub fn diffuse_sequential_at(
    rho0: &DensityMatrix,
    t: usize,
    sched: &NoiseSchedule,
    env: Environment,
    work: CutoffDim,
) -> Result<DensityMatrix> {
    sched.eta_bar(t)?;
    check_single_mode(rho0)?;
    if work < rho0.cutoff() {
        return Err(Error::CutoffMismatch(work.get(), rho0.cutoff().get()));
    }
    let mut rho = rho0.with_cutoff(work)?;
    for step in 1..=t {
        rho = thermal_loss_step(&rho, sched.eta(step)?, env)?;
    }
    rho.with_cutoff(rho0.cutoff())
}

/// Forward process bound to one schedule and environment, with the channel
/// for each transmissivity cached across calls.
#[derive(Debug)]
pub struct ForwardProcess {
    sched: NoiseSchedule,
    env: Environment,
    cutoff: CutoffDim,
    cache: RwLock<HashMap<u64, Arc<LossChannel>>>,
}

impl ForwardProcess {
    pub fn new(sched: NoiseSchedule, env: Environment, cutoff: CutoffDim) -> Self {
        ForwardProcess { sched, env, cutoff, cache: RwLock::default() }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn environment(&self) -> Environment {
        self.env
    }

    pub fn diffuse_to(&self, rho0: &DensityMatrix, t: usize) -> Result<DensityMatrix> {
        let eta_bar = self.sched.eta_bar(t)?;
        check_single_mode(rho0)?;
        if rho0.cutoff() != self.cutoff {
            return Err(Error::CutoffMismatch(rho0.cutoff().get(), self.cutoff.get()));
        }
        if t == 0 {
            return Ok(rho0.clone());
        }
        self.channel(rho0, eta_bar)
    }

    /// Thermal loss at an arbitrary transmissivity, sharing the cache.
    pub fn channel(&self, rho: &DensityMatrix, eta: f64) -> Result<DensityMatrix> {
        let key = eta.to_bits();
        let cached = self.cache.read().expect("channel cache poisoned").get(&key).cloned();
        let ch = match cached {
            Some(ch) => ch,
            None => {
                let ch = Arc::new(LossChannel::new(eta, self.env, self.cutoff)?);
                self.cache.write().expect("channel cache poisoned").entry(key).or_insert(ch).clone()
            }
        };
        ch.apply(rho)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{make_coherent, make_thermal, make_vacuum, quadrature_mean, quadrature_variance, Quadrature};
    use crate::linalg::{c, C64};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn cut(c: usize) -> CutoffDim {
        CutoffDim::new(c).unwrap()
    }

    #[test]
    fn linear_schedule_values() {
        let s = linear_schedule(0.99974, 0.99331, 112).unwrap();
        assert_eq!(s.eta(112).unwrap(), 0.99331);
        // running-product oracle computed independently of the stored vector
        let mut prod = 1.0;
        for t in 1..=112 {
            prod *= 0.99974 + (0.99331 - 0.99974) * t as f64 / 112.0;
        }
        assert!((s.eta_bar(112).unwrap() - prod).abs() < 1e-14);
        let flat = linear_schedule(0.9, 0.9, 5).unwrap();
        for t in 0..=5 {
            assert!((flat.eta_bar(t).unwrap() - 0.9f64.powi(t as i32)).abs() < 1e-15);
        }
        assert!(linear_schedule(1.1, 0.9, 5).is_err());
        assert!(linear_schedule(0.9, 0.9, 0).is_err());
        assert!(matches!(s.eta_bar(113), Err(Error::Timestep { .. })));
    }

    #[test]
    fn beta_conversion() {
        let (e0, et) = beta_to_eta(1e-4, 0.02, 10).unwrap();
        assert_abs_diff_eq!(e0, 0.9999, epsilon = 1e-15);
        assert_abs_diff_eq!(et, 0.98, epsilon = 1e-15);
        let (b0, bt) = (1.0 - e0, 1.0 - et);
        let (e0b, etb) = beta_to_eta(b0, bt, 10).unwrap();
        assert_abs_diff_eq!(e0b, e0, epsilon = 1e-15);
        assert_abs_diff_eq!(etb, et, epsilon = 1e-15);
        assert!(beta_to_eta(0.0, 0.1, 10).is_err());
    }

    #[test]
    fn schedule_csv() {
        let s = linear_schedule(0.9, 0.8, 2).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,eta_t,eta_bar_t");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,1.0000000000000000e0,"));
    }

    #[test]
    fn identity_and_full_loss() {
        let cd = cut(12);
        let env = Environment::new(0.5).unwrap();
        let rho = make_coherent(C64::new(0.5, 0.2), cd).to_density();
        let same = thermal_loss_step(&rho, 1.0, env).unwrap();
        assert!(linalg::max_abs_diff(same.matrix(), rho.matrix()) < 1e-10);

        let env0 = Environment::new(0.1).unwrap();
        let gone = thermal_loss_step(&make_coherent(c(0.3), cd).to_density(), 0.0, env0).unwrap();
        let f = fock::fidelity(&gone, &make_thermal(0.1, cd).unwrap()).unwrap();
        assert!(f >= 1.0 - 1e-8, "{f}");
    }

    #[test]
    fn variance_law() {
        let cd = cut(20);
        let env = Environment::new(0.5).unwrap();
        let rho = make_coherent(c(0.7), cd).to_density();
        let out = thermal_loss_step(&rho, 0.5, env).unwrap();
        let var = quadrature_variance(&out, Quadrature::X).unwrap();
        assert!((var - 0.75).abs() < 1e-3, "{var}");
        let out = corrupt(&rho, 0.25, env).unwrap();
        let var = quadrature_variance(&out, Quadrature::X).unwrap();
        assert!((var - 0.875).abs() < 1e-3, "{var}");
    }

    #[test]
    fn first_moments_scale_by_root_eta() {
        let cd = cut(16);
        let env = Environment::new(0.5).unwrap();
        let beta = C64::from_polar(0.5, FRAC_PI_4);
        let rho = make_coherent(beta, cd).to_density();
        let out = corrupt(&rho, 0.5, env).unwrap();
        for q in [Quadrature::X, Quadrature::P] {
            let before = quadrature_mean(&rho, q).unwrap();
            let after = quadrature_mean(&out, q).unwrap();
            assert!((after - 0.5f64.sqrt() * before).abs() < 1e-8);
        }
    }

    #[test]
    fn direct_jump_matches_sequential() {
        let cd = cut(12);
        let sched = NoiseSchedule::from_steps(vec![0.9, 0.9]).unwrap();
        let rho = make_coherent(c(0.5), cd).to_density();
        for nbar in [0.0, 0.5] {
            let env = Environment::new(nbar).unwrap();
            let direct = diffuse_to(&rho, 2, &sched, env).unwrap();
            let seq = diffuse_sequential(&rho, 2, &sched, env).unwrap();
            let td = linalg::trace_distance(direct.matrix(), seq.matrix());
            assert!(td <= 1e-9, "nbar {nbar}: {td:e}");
        }
    }

    #[test]
    fn per_step_truncation_error_shrinks_with_cutoff() {
        let sched = NoiseSchedule::from_steps(vec![0.9, 0.9]).unwrap();
        let env = Environment::new(0.5).unwrap();
        let mut last = f64::INFINITY;
        for cdim in [8, 12, 16] {
            let cd = cut(cdim);
            let rho = make_coherent(c(0.5), cd).to_density();
            let direct = diffuse_to(&rho, 2, &sched, env).unwrap();
            let naive = diffuse_sequential_at(&rho, 2, &sched, env, cd).unwrap();
            let td = linalg::trace_distance(direct.matrix(), naive.matrix());
            assert!(td < last);
            last = td;
        }
        assert!(last < 1e-11);
    }

    #[test]
    fn fidelity_decreases_along_constant_schedule() {
        let cd = cut(12);
        let sched = linear_schedule(0.9, 0.9, 10).unwrap();
        let env = Environment::new(0.5).unwrap();
        let rho = make_coherent(c(1.0), cd).to_density();
        let mut last = 1.0;
        for t in 0..=10 {
            let f = fock::fidelity(&rho, &diffuse_to(&rho, t, &sched, env).unwrap()).unwrap();
            assert!(f <= last + 1e-12);
            last = f;
        }
    }

    #[test]
    fn pure_loss_endpoint_has_closed_form() {
        // vacuum environment: ρ_T = |√η̄ α⟩, so F(ρ_T, |0⟩) = e^{−η̄|α|²}
        let cd = cut(15);
        let sched = linear_schedule(0.99974, 0.99331, 112).unwrap();
        let rho = make_coherent(c(1.0), cd).to_density();
        let end = diffuse_to(&rho, 112, &sched, Environment::vacuum()).unwrap();
        let f = fock::fidelity(&make_vacuum(cd), &end).unwrap();
        let eta_bar = sched.eta_bar(112).unwrap();
        assert!((f - (-eta_bar).exp()).abs() < 1e-9);
    }

    #[test]
    fn exact_channel_agrees_with_truncated_composition() {
        // joint-space truncation error falls off with the cutoff
        let env = Environment::new(0.5).unwrap();
        let mut last = f64::INFINITY;
        for cdim in [8, 12, 16, 20] {
            let cd = cut(cdim);
            let rho = make_coherent(C64::new(0.6, -0.3), cd).to_density();
            let a = thermal_loss_step(&rho, 0.6, env).unwrap();
            let b = thermal_loss_step_truncated(&rho, 0.6, env).unwrap();
            let low = 4;
            let diff = linalg::max_abs_diff(
                &a.matrix().view((0, 0), (low, low)).into_owned(),
                &b.matrix().view((0, 0), (low, low)).into_owned(),
            );
            assert!(diff < last);
            last = diff;
        }
        assert!(last < 1e-8, "{last:e}");
        let cd = cut(6);
        let rho = make_coherent(c(0.4), cd).to_density();
        let a = thermal_loss_step(&rho, 0.7, Environment::vacuum()).unwrap();
        let b = thermal_loss_step_truncated(&rho, 0.7, Environment::vacuum()).unwrap();
        assert!(linalg::max_abs_diff(a.matrix(), b.matrix()) < 1e-14);
    }

    #[test]
    fn forward_process_matches_free_functions() {
        let cd = cut(8);
        let sched = linear_schedule(0.95, 0.8, 6).unwrap();
        let env = Environment::new(0.3).unwrap();
        let fp = ForwardProcess::new(sched.clone(), env, cd);
        let rho = make_coherent(C64::new(0.4, -0.3), cd).to_density();
        for t in 0..=6 {
            let a = fp.diffuse_to(&rho, t).unwrap();
            let b = diffuse_to(&rho, t, &sched, env).unwrap();
            assert!(linalg::max_abs_diff(a.matrix(), b.matrix()) < 1e-14);
        }
        assert!(fp.diffuse_to(&rho, 7).is_err());
    }

    #[test]
    fn channel_is_trace_preserving_for_contained_inputs() {
        let cd = cut(20);
        let env = Environment::new(0.2).unwrap();
        let rho = make_coherent(c(0.8), cd).to_density();
        for eta in [0.1, 0.5, 0.9] {
            let out = thermal_loss_step(&rho, eta, env).unwrap();
            assert!(out.trace() <= 1.0 + 1e-12);
            assert!(rho.trace() - out.trace() <= 1e-6);
            out.check_invariants().unwrap();
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn theorem_one_on_random_schedules(seed in any::<u64>(), pure_loss in any::<bool>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let len = rng.random_range(1..=6);
                let etas: Vec<f64> = (0..len).map(|_| rng.random_range(0.7..=1.0)).collect();
                let sched = NoiseSchedule::from_steps(etas).unwrap();
                let alpha = C64::from_polar(rng.random_range(0.0..1.0), rng.random_range(0.0..6.3));
                let cd = cut(12);
                let env = Environment::new(if pure_loss { 0.0 } else { 0.5 }).unwrap();
                let rho = make_coherent(alpha, cd).to_density();
                let direct = diffuse_to(&rho, len, &sched, env).unwrap();
                let seq = diffuse_sequential(&rho, len, &sched, env).unwrap();
                prop_assert!(linalg::trace_distance(direct.matrix(), seq.matrix()) <= 1e-8);
            }
        }
    }
}
