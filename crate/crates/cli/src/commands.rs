//! Subcommand definitions and their implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use cvqd_core::denoiser::{ChainResult, Denoiser};
use cvqd_core::diffusion::{self, Environment};
use cvqd_core::fock::{self, fmt_f64, DensityMatrix};
use cvqd_core::trainer::{self, RestorationSampler, TrainOutcome, MAX_TAIL_MASS};
use cvqd_core::{CutoffDim, TrainConfig};

use crate::checkpoint::{Checkpoint, TrainingSummary};
use crate::config::{self, Profile, Role, TargetSpec};
use crate::error::{CliError, CliResult};
use crate::output::{curve_csv, RunManifest};
use crate::verify::{self, Fault, Suite};

#[derive(Debug, Parser)]
#[command(name = "cvqd", version, about = "Continuous-variable quantum diffusion in a truncated Fock basis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat TOML file; keys override the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generative denoiser for the configured target.
    TrainGen(Common),
    /// Run the backward chain of a generative checkpoint from thermal noise.
    Generate(GenerateArgs),
    /// Apply the forward diffusion to the configured target.
    Diffuse(DiffuseArgs),
    /// Train a restoration denoiser on random coherent states.
    TrainRestore(TrainRestoreArgs),
    /// Restore a corrupted state with a restoration checkpoint.
    Restore(RestoreArgs),
    /// Run the property suites; exits 1 if any check fails.
    Verify(VerifyArgs),
    /// Train and generate over a list of target parameters.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Thermal occupation of the starting state; defaults to the training value.
    #[arg(long)]
    pub nbar: Option<f64>,
    /// Also write the per-step fidelity curve.
    #[arg(long)]
    pub record: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DiffuseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, conflicts_with = "curve")]
    pub t: Option<usize>,
    /// Fidelity against the initial and thermal states for every t.
    #[arg(long)]
    pub curve: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainRestoreArgs {
    #[command(flatten)]
    pub common: Common,
    /// Largest displacement amplitude drawn during training.
    #[arg(long)]
    pub s_max: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RestoreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corrupted state JSON. Without it a state is synthesized from --s, --phase, --eta-ch.
    #[arg(long, conflicts_with_all = ["s", "eta_ch"])]
    pub input: Option<PathBuf>,
    /// Clean state JSON used for the curve when --input is given.
    #[arg(long, requires = "input")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub phase: f64,
    #[arg(long)]
    pub eta_ch: Option<f64>,
    /// Corruption noise; defaults to the training value.
    #[arg(long)]
    pub nbar: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Suites to run, comma separated; all when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub suite: Vec<Suite>,
    #[arg(long, value_enum)]
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    /// Coherent amplitude.
    Alpha,
    /// Squeezing parameter.
    R,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub nbar: Vec<f64>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainGen(c) => train_gen(&c),
        Command::Generate(a) => generate(&a),
        Command::Diffuse(a) => diffuse(&a),
        Command::TrainRestore(a) => train_restore(&a),
        Command::Restore(a) => restore(&a),
        Command::Verify(a) => run_verify(&a),
        Command::Sweep(a) => sweep(&a),
    }
}

/// Backward chain from ρ_th(n̄) at t = T with the fidelity to `target` at every step.
pub fn generate_chain(den: &Denoiser, steps: usize, target: &DensityMatrix, nbar: f64) -> CliResult<ChainResult> {
    let start = fock::make_thermal(nbar, den.cutoff())?;
    Ok(den.chain(&start, steps, Some(target))?)
}

pub fn final_fidelity(res: &ChainResult) -> f64 {
    res.curve.as_ref().and_then(|c| c.last()).map_or(f64::NAN, |p| p.1)
}

/// Synthetic restoration: corrupt R(φ)D(s)|0⟩ once with loss `eta_ch` and
/// noise `nbar`, then run the chain from t = T. Returns the clean state, the
/// fidelity of the corrupted input and the chain.
pub fn restore_synthetic(
    den: &Denoiser,
    steps: usize,
    s: f64,
    phase: f64,
    eta_ch: f64,
    nbar: f64,
) -> CliResult<(DensityMatrix, f64, ChainResult)> {
    let clean = trainer::x_rotated_coherent(s, phase, den.cutoff()).to_density();
    let corrupted = diffusion::corrupt(&clean, eta_ch, Environment::new(nbar)?)?;
    let before = fock::fidelity(&clean, &corrupted)?;
    let res = den.chain(&corrupted, steps, Some(&clean))?;
    Ok((clean, before, res))
}

/// Trains against `target` and measures the chain from the configured noise.
pub fn train_target(target: &TargetSpec, cfg: &TrainConfig) -> CliResult<(TrainOutcome, f64)> {
    let state = target.state(cfg.cutoff_dim()?)?;
    let out = trainer::train_generative(&state, cfg)?;
    let den = Denoiser::new(&out.theta, cfg.embed_config()?, cfg.cutoff_dim()?)?;
    let fid = final_fidelity(&generate_chain(&den, cfg.steps, &state, cfg.nbar)?);
    Ok((out, fid))
}

fn train_gen(c: &Common) -> CliResult<()> {
    let rc = config::load(c.config.as_deref(), c.profile, Role::Generative, c.seed)?;
    let target = rc.require_target()?.clone();
    let mut manifest = RunManifest::start("train-gen", c.config.as_deref(), Some(rc.train.seed));
    let (out, fid) = train_target(&target, &rc.train)?;
    let mut summary = TrainingSummary::from_outcome(&out);
    summary.generation_fidelity = Some(fid);
    let mut ck = Checkpoint::new(Role::Generative, rc.train.clone(), &out.theta, summary);
    ck.target = Some(target.clone());
    manifest.write(c.out.join("checkpoint.json"), ck.to_json()?.as_bytes())?;
    manifest.write(c.out.join("metrics.csv"), trainer::metrics_csv(&out.metrics).as_bytes())?;
    manifest.finish(&c.out)?;
    println!("target {}", target.describe());
    print_outcome(&out);
    println!("generation fidelity {fid:.6}");
    Ok(())
}

fn print_outcome(out: &TrainOutcome) {
    println!(
        "iterations {} ({}), loss {:.6e} -> best {:.6e}",
        out.iterations,
        if out.converged { "converged" } else { "iteration cap" },
        out.initial_loss,
        out.best_loss
    );
}

fn generate(a: &GenerateArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    ck.expect_role(Role::Generative)?;
    let target = ck.target.as_ref().ok_or_else(|| CliError::Io("generative checkpoint without a target".into()))?;
    let state = target.state(ck.cfg.cutoff_dim()?)?;
    let nbar = a.nbar.unwrap_or(ck.cfg.nbar);
    let mut manifest = RunManifest::start("generate", None, None);
    let res = generate_chain(&ck.denoiser()?, ck.cfg.steps, &state, nbar)?;
    manifest.write(a.common.out.join("state.json"), res.state.to_json().as_bytes())?;
    if a.record {
        let curve = res.curve.as_deref().unwrap_or_default();
        manifest.write(a.common.out.join("curve.csv"), curve_csv("fidelity_vs_target", curve).as_bytes())?;
    }
    manifest.finish(&a.common.out)?;
    println!("target {}, start thermal nbar={nbar}", target.describe());
    println!("final fidelity {:.12}", final_fidelity(&res));
    Ok(())
}

fn diffuse(a: &DiffuseArgs) -> CliResult<()> {
    let c = &a.common;
    let rc = config::load(c.config.as_deref(), c.profile, Role::Generative, c.seed)?;
    let target = rc.require_target()?;
    let cd = rc.train.cutoff_dim()?;
    let rho0 = target.state(cd)?;
    let (sched, env) = (rc.train.schedule()?, rc.train.environment()?);
    let thermal = fock::make_thermal(env.nbar(), cd)?;
    let mut manifest = RunManifest::start("diffuse", c.config.as_deref(), c.seed);
    if a.curve {
        let mut csv = String::from("t,fidelity_vs_initial,fidelity_vs_thermal\n");
        for t in 0..=sched.steps() {
            let rho_t = diffusion::diffuse_to(&rho0, t, &sched, env)?;
            let (fi, ft) = (fock::fidelity(&rho0, &rho_t)?, fock::fidelity(&thermal, &rho_t)?);
            let _ = writeln!(csv, "{t},{},{}", fmt_f64(fi), fmt_f64(ft));
        }
        manifest.write(c.out.join("diffusion_curve.csv"), csv.as_bytes())?;
        manifest.write(c.out.join("schedule.csv"), sched.to_csv().as_bytes())?;
    } else {
        let t = a.t.ok_or_else(|| CliError::Config("give --t or --curve".into()))?;
        let rho_t = diffusion::diffuse_to(&rho0, t, &sched, env)?;
        manifest.write(c.out.join(format!("state_t{t}.json")), rho_t.to_json().as_bytes())?;
        println!("t={t}: F(initial) {:.6}, F(thermal) {:.6}", fock::fidelity(&rho0, &rho_t)?, fock::fidelity(&thermal, &rho_t)?);
    }
    manifest.finish(&c.out)?;
    Ok(())
}

fn train_restore(a: &TrainRestoreArgs) -> CliResult<()> {
    let c = &a.common;
    let rc = config::load(c.config.as_deref(), c.profile, Role::Restoration, c.seed)?;
    let s_max = a.s_max.or(rc.s_max).unwrap_or(1.0);
    let sampler = RestorationSampler::new(s_max, rc.train.seed)?;
    let mut manifest = RunManifest::start("train-restore", c.config.as_deref(), Some(rc.train.seed));
    let out = trainer::train_restoration(&sampler, &rc.train)?;
    let mut ck = Checkpoint::new(Role::Restoration, rc.train.clone(), &out.theta, TrainingSummary::from_outcome(&out));
    ck.s_max = Some(s_max);
    manifest.write(c.out.join("checkpoint.json"), ck.to_json()?.as_bytes())?;
    manifest.write(c.out.join("metrics.csv"), trainer::metrics_csv(&out.metrics).as_bytes())?;
    manifest.finish(&c.out)?;
    println!("restoration training, s_max {s_max}");
    print_outcome(&out);
    Ok(())
}

/// State JSON from a user-supplied file. Unreadable files are I/O errors;
/// malformed or mismatched content is a configuration error.
fn read_state(path: &Path, cutoff: CutoffDim) -> CliResult<DensityMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    let st = DensityMatrix::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if st.modes() != 1 || st.cutoff() != cutoff {
        return Err(CliError::Config(format!(
            "{}: need a single-mode state at cutoff {}, got {} mode(s) at {}",
            path.display(),
            cutoff.get(),
            st.modes(),
            st.cutoff().get()
        )));
    }
    Ok(st)
}

fn restore(a: &RestoreArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    ck.expect_role(Role::Restoration)?;
    let cd = ck.cfg.cutoff_dim()?;
    let den = ck.denoiser()?;
    let steps = ck.cfg.steps;
    let mut manifest = RunManifest::start("restore", None, None);
    let res = match &a.input {
        Some(path) => {
            let start = read_state(path, cd)?;
            let reference = a.reference.as_deref().map(|p| read_state(p, cd)).transpose()?;
            if let Some(r) = &reference {
                println!("input fidelity {:.6}", fock::fidelity(r, &start)?);
            }
            den.chain(&start, steps, reference.as_ref())?
        }
        None => {
            let (s, eta_ch) = match (a.s, a.eta_ch) {
                (Some(s), Some(e)) => (s, e),
                _ => return Err(CliError::Config("give --input, or --s and --eta-ch for a synthetic state".into())),
            };
            let nbar = a.nbar.unwrap_or(ck.cfg.nbar);
            let (_, before, res) = restore_synthetic(&den, steps, s, a.phase, eta_ch, nbar)?;
            println!("corrupted s={s} phase={} eta_ch={eta_ch} nbar={nbar}: fidelity {before:.6}", a.phase);
            res
        }
    };
    manifest.write(a.common.out.join("restored.json"), res.state.to_json().as_bytes())?;
    if let Some(curve) = &res.curve {
        manifest.write(a.common.out.join("curve.csv"), curve_csv("fidelity_vs_clean", curve).as_bytes())?;
        println!("restored fidelity {:.6}", final_fidelity(&res));
    }
    manifest.finish(&a.common.out)?;
    Ok(())
}

fn run_verify(a: &VerifyArgs) -> CliResult<()> {
    let suites = if a.suite.is_empty() { Suite::ALL.to_vec() } else { a.suite.clone() };
    let seed = a.common.seed.unwrap_or(0);
    let mut manifest = RunManifest::start("verify", None, Some(seed));
    let report = verify::run(&suites, a.fault, seed)?;
    let text = report.to_text();
    print!("{text}");
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::io("verify report", e))?;
    manifest.write(a.common.out.join("verify_report.json"), json.as_bytes())?;
    manifest.write(a.common.out.join("verify_report.txt"), text.as_bytes())?;
    manifest.finish(&a.common.out)?;
    match report.failures() {
        0 => Ok(()),
        n => Err(CliError::Verify(n)),
    }
}

fn sweep(a: &SweepArgs) -> CliResult<()> {
    let c = &a.common;
    let rc = config::load(c.config.as_deref(), c.profile, Role::Generative, c.seed)?;
    let cd = rc.train.cutoff_dim()?;
    let (name, targets): (&str, Vec<TargetSpec>) = match a.param {
        SweepParam::Alpha => ("alpha", a.values.iter().map(|&alpha| TargetSpec::Coherent { alpha, phase: 0.0 }).collect()),
        SweepParam::R => ("r", a.values.iter().map(|&r| TargetSpec::Squeezed { r }).collect()),
    };
    // reject every unsafe value before spending time on training
    for (value, target) in a.values.iter().zip(&targets) {
        let lost = 1.0 - target.state(cd)?.trace();
        if lost >= MAX_TAIL_MASS {
            return Err(CliError::Physics(format!("{name}={value}: {lost:.2e} of the state lies above cutoff {}", cd.get())));
        }
    }
    let mut manifest = RunManifest::start("sweep", c.config.as_deref(), Some(rc.train.seed));
    let mut csv = String::from("param,value,nbar,fidelity,iters\n");
    for (value, target) in a.values.iter().zip(&targets) {
        for &nbar in &a.nbar {
            let cfg = TrainConfig { nbar, ..rc.train.clone() };
            let (out, fid) = train_target(target, &cfg)?;
            println!("{name}={value} nbar={nbar}: fidelity {fid:.6} after {} iterations", out.iterations);
            let _ = writeln!(csv, "{name},{},{},{},{}", fmt_f64(*value), fmt_f64(nbar), fmt_f64(fid), out.iterations);
        }
    }
    manifest.write(c.out.join("sweep.csv"), csv.as_bytes())?;
    manifest.finish(&c.out)?;
    Ok(())
}
