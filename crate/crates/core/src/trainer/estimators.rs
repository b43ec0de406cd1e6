//! Black-box gradient estimators: central finite differences and SPSA.

use rand::Rng;

use crate::par::{self, ExecMode};
use crate::{Error, Result};

/// (f(x + εe_k) − f(x − εe_k)) / 2ε for every coordinate k. Probes run in
/// parallel; each coordinate is independent so the result does not depend on
/// the worker count.
pub fn grad_central_fd<F>(f: F, x: &[f64], step: f64, mode: ExecMode) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("fd_step must be positive, got {step}")));
    }
    let probes = par::map_range(mode, x.len(), |k| {
        let mut p = x.to_vec();
        p[k] = x[k] + step;
        let up = f(&p)?;
        p[k] = x[k] - step;
        let down = f(&p)?;
        Ok((up - down) / (2.0 * step))
    });
    probes.into_iter().collect()
}

/// Per-direction SPSA estimates `(f(x + cΔ) − f(x − cΔ)) / (2cΔ_k)` for `n`
/// Rademacher directions Δ drawn from `rng` up front.
pub fn spsa_samples<F, R>(f: F, x: &[f64], perturb: f64, rng: &mut R, n: usize, mode: ExecMode) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
    R: Rng + ?Sized,
{
    if !(perturb > 0.0) {
        return Err(Error::Config(format!("SPSA perturbation must be positive, got {perturb}")));
    }
    let dirs: Vec<Vec<f64>> =
        (0..n).map(|_| (0..x.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()).collect();
    par::try_map(mode, &dirs, |d| {
        let plus: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + perturb * di).collect();
        let minus: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi - perturb * di).collect();
        let diff = (f(&plus)? - f(&minus)?) / (2.0 * perturb);
        Ok(d.iter().map(|di| diff / di).collect())
    })
}

/// Mean of `n_avg` SPSA estimates; costs 2·n_avg evaluations of `f`.
pub fn grad_spsa<F, R>(f: F, x: &[f64], perturb: f64, rng: &mut R, n_avg: usize, mode: ExecMode) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
    R: Rng + ?Sized,
{
    if n_avg == 0 {
        return Err(Error::Config("SPSA needs at least one direction".into()));
    }
    let samples = spsa_samples(f, x, perturb, rng, n_avg, mode)?;
    let mut mean = vec![0.0; x.len()];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_avg as f64);
    Ok(mean)
}
