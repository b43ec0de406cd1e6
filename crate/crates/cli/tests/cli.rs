use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvqd_cli::checkpoint::FORMAT_VERSION;
use cvqd_cli::output::RunManifest;
use cvqd_cli::{Checkpoint, Role, TargetSpec, TrainingSummary};
use cvqd_core::denoiser::{time_embed, ThetaVector};
use cvqd_core::fock::{self, DensityMatrix};
use cvqd_core::trainer::METRICS_HEADER;
use cvqd_core::TrainConfig;

const TINY: &str = "cutoff_dim = 6\nlayers = 2\ntotal_timesteps = 6\nbatch_size = 3\nepochs = 20\n";

fn cvqd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvqd")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Metrics with the wall-clock column removed.
fn numeric_metrics(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_owned()).collect()
}

fn train_tiny(dir: &Path, extra: &str, out: &str) -> PathBuf {
    let cfg = write(dir, &format!("{out}.toml"), &format!("{TINY}target = \"coherent\"\nalpha = 0.5\n{extra}"));
    let out_dir = dir.join(out);
    let o = cvqd(&["train-gen", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out_dir
}

#[test]
fn train_gen_writes_checkpoint_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "", "a");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(metrics.lines().count(), 21);
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ck.format_version, FORMAT_VERSION);
    assert_eq!(ck.role, Role::Generative);
    assert_eq!(ck.theta.len(), 32);
    assert_eq!(ck.target, Some(TargetSpec::Coherent { alpha: 0.5, phase: 0.0 }));
    assert!(ck.summary.best_loss <= ck.summary.initial_loss);
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "train-gen");
    assert_eq!(manifest.seed, Some(0));
    for name in ["checkpoint.json", "metrics.csv"] {
        assert!(manifest.outputs.contains(&out.join(name)), "{name} missing from manifest");
    }
}

#[test]
fn seed_repeat_is_reproducible_and_seed_flag_matters() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "seed = 3\n", "a");
    let b = train_tiny(dir.path(), "seed = 3\n", "b");
    assert_eq!(numeric_metrics(&a.join("metrics.csv")), numeric_metrics(&b.join("metrics.csv")));
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());

    let cfg = write(dir.path(), "c.toml", &format!("{TINY}target = \"coherent\"\nalpha = 0.5\nseed = 3\n"));
    let o = cvqd(&["train-gen", "--config", s(&cfg), "--seed", "4", "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&o), 0);
    let ck = Checkpoint::load(&dir.path().join("c/checkpoint.json")).unwrap();
    assert_eq!(ck.cfg.seed, 4);
    assert_ne!(numeric_metrics(&a.join("metrics.csv")), numeric_metrics(&dir.path().join("c/metrics.csv")));
}

#[test]
fn config_errors_exit_2_and_cutoff_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (TINY.to_owned(), 2),
        (format!("{TINY}target = \"coherent\"\nalpha = 0.5\nbogus = 1\n"), 2),
        ("this is = = not toml".to_owned(), 2),
        (format!("{TINY}target = \"coherent\"\nalpha = 2.5\n"), 3),
        (format!("{TINY}target = \"fock\"\nn = 6\n"), 3),
    ];
    for (i, (text, expect)) in cases.iter().enumerate() {
        let cfg = write(dir.path(), &format!("{i}.toml"), text);
        let o = cvqd(&["train-gen", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
        assert_eq!(code(&o), *expect, "case {i}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = cvqd(&["train-gen", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(code(&o), 4);
    assert!(!dir.path().join("x").exists());
}

#[test]
fn generate_reproduces_the_training_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "", "a");
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    let gen = dir.path().join("gen");
    let o = cvqd(&["generate", "--checkpoint", s(&out.join("checkpoint.json")), "--record", "--out", s(&gen)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve = fs::read_to_string(gen.join("curve.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().collect();
    assert_eq!(rows[0], "t,fidelity_vs_target");
    assert_eq!(rows.len(), 1 + 7);
    assert!(rows[1].starts_with("6,"));
    let last: f64 = rows[7].strip_prefix("0,").unwrap().parse().unwrap();
    assert!((last - ck.summary.generation_fidelity.unwrap()).abs() < 1e-9);

    let state = DensityMatrix::from_json(&fs::read_to_string(gen.join("state.json")).unwrap()).unwrap();
    let target = fock::make_coherent(cvqd_core::linalg::c(0.5), state.cutoff()).to_density();
    assert!((fock::fidelity(&target, &state).unwrap() - last).abs() < 1e-12);
}

#[test]
fn identity_checkpoint_generates_the_first_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { cutoff: 6, layers: 1, steps: 6, batch_size: 3, ..TrainConfig::desk_generative() };
    let summary = TrainingSummary { best_loss: 0.0, initial_loss: 0.0, iterations: 0, converged: false, generation_fidelity: None };
    let mut ck = Checkpoint::new(Role::Generative, cfg.clone(), &ThetaVector::zeros(1), summary);
    ck.target = Some(TargetSpec::Fock { n: 1 });
    let path = dir.path().join("zero.json");
    ck.save(&path).unwrap();
    let o = cvqd(&["generate", "--checkpoint", s(&path), "--out", s(&dir.path().join("g"))]);
    assert_eq!(code(&o), 0);
    let state = DensityMatrix::from_json(&fs::read_to_string(dir.path().join("g/state.json")).unwrap()).unwrap();
    let tau1 = time_embed(1, &cfg.embed_config().unwrap(), cfg.cutoff_dim().unwrap()).unwrap();
    assert!(cvqd_core::linalg::max_abs_diff(state.matrix(), tau1.matrix()) < 1e-12);
    assert!(!dir.path().join("g/curve.csv").exists());
}

#[test]
fn checkpoint_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "", "a");
    let text = fs::read_to_string(out.join("checkpoint.json")).unwrap();
    let broken = write(dir.path(), "broken.json", &text[..text.len() / 3]);
    let newer = write(dir.path(), "newer.json", &text.replace(FORMAT_VERSION, "cvqd-ckpt-9"));
    for path in [broken, newer, dir.path().join("absent.json")] {
        let o = cvqd(&["generate", "--checkpoint", s(&path), "--out", s(&dir.path().join("g"))]);
        assert_eq!(code(&o), 4, "{}", path.display());
    }
    // a generative checkpoint cannot restore
    let o = cvqd(&["restore", "--checkpoint", s(&out.join("checkpoint.json")), "--s", "0.5", "--eta-ch", "0.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diffuse_state_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", &format!("{TINY}target = \"fock\"\nn = 1\n"));
    let o = cvqd(&["diffuse", "--config", s(&cfg), "--t", "0", "--out", s(&dir.path().join("t0"))]);
    assert_eq!(code(&o), 0);
    let st = DensityMatrix::from_json(&fs::read_to_string(dir.path().join("t0/state_t0.json")).unwrap()).unwrap();
    assert_eq!(st.populations()[1], 1.0);

    let o = cvqd(&["diffuse", "--config", s(&cfg), "--curve", "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&o), 0);
    let curve = fs::read_to_string(dir.path().join("c/diffusion_curve.csv")).unwrap();
    let rows: Vec<Vec<f64>> = curve.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(curve.lines().next().unwrap(), "t,fidelity_vs_initial,fidelity_vs_thermal");
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[0][..2], [0.0, 1.0]);
    assert!(rows.windows(2).all(|w| w[1][1] < w[0][1]));
    assert!(fs::read_to_string(dir.path().join("c/schedule.csv")).unwrap().lines().count() >= 7);

    let o = cvqd(&["diffuse", "--config", s(&cfg), "--out", s(&dir.path().join("n"))]);
    assert_eq!(code(&o), 2);
    let o = cvqd(&["diffuse", "--config", s(&cfg), "--t", "7", "--out", s(&dir.path().join("n"))]);
    assert_eq!(code(&o), 2);
}

fn train_restore_tiny(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let cfg = write(dir, "r.toml", "cutoff_dim = 6\nlayers = 2\ntotal_timesteps = 6\nbatch_size = 3\nepochs = 15\n");
    let out_dir = dir.join(out);
    let mut args = vec!["train-restore", "--config", s(&cfg), "--out", s(&out_dir)];
    args.extend_from_slice(extra);
    let o = cvqd(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out_dir
}

#[test]
fn train_restore_and_restore() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_restore_tiny(dir.path(), "a", &["--s-max", "0.6"]);
    let b = train_restore_tiny(dir.path(), "b", &["--s-max", "0.6"]);
    assert_eq!(numeric_metrics(&a.join("metrics.csv")), numeric_metrics(&b.join("metrics.csv")));
    let ckp = a.join("checkpoint.json");
    let ck = Checkpoint::load(&ckp).unwrap();
    assert_eq!((ck.role, ck.s_max), (Role::Restoration, Some(0.6)));

    let r = dir.path().join("r");
    let o = cvqd(&["restore", "--checkpoint", s(&ckp), "--s", "0.5", "--phase", "0.785", "--eta-ch", "0.5", "--nbar", "0.5", "--out", s(&r)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("restored fidelity"));
    let curve = fs::read_to_string(r.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "t,fidelity_vs_clean");
    assert!(curve.lines().last().unwrap().starts_with("0,"));

    // the restored state fed back as --input runs through the same chain
    let o = cvqd(&["restore", "--checkpoint", s(&ckp), "--input", s(&r.join("restored.json")), "--out", s(&dir.path().join("again"))]);
    assert_eq!(code(&o), 0);

    let bad = write(dir.path(), "bad.json", "{\"version\":1,\"modes\":1,\"cutoff\":6,\"data\":[[1,0]]}");
    let o = cvqd(&["restore", "--checkpoint", s(&ckp), "--input", s(&bad)]);
    assert_eq!(code(&o), 2);
    let garbage = write(dir.path(), "garbage.json", "not json");
    assert_eq!(code(&cvqd(&["restore", "--checkpoint", s(&ckp), "--input", s(&garbage)])), 2);
    assert_eq!(code(&cvqd(&["restore", "--checkpoint", s(&ckp)])), 2);
}

#[test]
fn sweep_rows_and_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", TINY);
    let o = cvqd(&["sweep", "--config", s(&cfg), "--param", "alpha", "--values", "0.3,0.5", "--nbar", "0,0.5", "--out", s(&dir.path().join("s"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "param,value,nbar,fidelity,iters");
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], "alpha");
        let f: f64 = cols[3].parse().unwrap();
        assert!((0.0..=1.0 + 1e-9).contains(&f));
        assert!(cols[4].parse::<usize>().unwrap() <= 20);
    }
    let o = cvqd(&["sweep", "--config", s(&cfg), "--param", "alpha", "--values", "0.5,3.0", "--out", s(&dir.path().join("big"))]);
    assert_eq!(code(&o), 3);
    assert!(!dir.path().join("big/sweep.csv").exists());
}

#[test]
fn verify_selects_suites_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = cvqd(&["verify", "--suite", "theorem1", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify_report.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 1);
    assert_eq!(checks[0]["suite"], "theorem1");

    let o = cvqd(&["verify", "--suite", "channel", "--fault", "eta-bar", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("[FAIL]"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["fault"], "eta_bar");
}
