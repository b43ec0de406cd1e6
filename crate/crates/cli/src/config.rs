//! Flat TOML run configuration: training keys, an optional target
//! description and an optional `profile` selecting the base values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use cvqd_core::fock::{self, CatParity, CutoffDim, DensityMatrix};
use cvqd_core::linalg::C64;
use cvqd_core::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// c=8, L=8, small T; minutes on a laptop.
    #[default]
    Desk,
    /// Full-scale hyperparameters.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generative,
    Restoration,
}

impl Profile {
    pub fn base(self, role: Role) -> TrainConfig {
        match (self, role) {
            (Profile::Desk, Role::Generative) => TrainConfig::desk_generative(),
            (Profile::Desk, Role::Restoration) => TrainConfig::desk_restoration(),
            (Profile::Paper, Role::Generative) => TrainConfig::paper_generative(),
            (Profile::Paper, Role::Restoration) => TrainConfig::paper_restoration(),
        }
    }
}

/// Generative target. `phase` of a coherent state is in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetSpec {
    Coherent {
        alpha: f64,
        #[serde(default)]
        phase: f64,
    },
    Squeezed {
        r: f64,
    },
    Fock {
        n: usize,
    },
    Cat {
        alpha: f64,
        parity: CatParity,
    },
}

impl TargetSpec {
    /// The target truncated at `cutoff`, not renormalized, so the tail check
    /// in training sees the lost mass.
    pub fn state(&self, cutoff: CutoffDim) -> CliResult<DensityMatrix> {
        Ok(match *self {
            TargetSpec::Coherent { alpha, phase } => fock::make_coherent(C64::from_polar(alpha, phase), cutoff).to_density(),
            TargetSpec::Squeezed { r } => fock::make_squeezed_vacuum(r, cutoff).to_density(),
            TargetSpec::Fock { n } => fock::make_fock(n, cutoff)?,
            TargetSpec::Cat { alpha, parity } => fock::make_cat(alpha, parity, cutoff)?.to_density(),
        })
    }

    pub fn describe(&self) -> String {
        match self {
            TargetSpec::Coherent { alpha, phase } => format!("coherent(alpha={alpha}, phase={phase})"),
            TargetSpec::Squeezed { r } => format!("squeezed(r={r})"),
            TargetSpec::Fock { n } => format!("fock(n={n})"),
            TargetSpec::Cat { alpha, parity } => format!("cat(alpha={alpha}, parity={parity:?})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub target: Option<TargetSpec>,
    pub s_max: Option<f64>,
}

impl RunConfig {
    pub fn require_target(&self) -> CliResult<&TargetSpec> {
        self.target.as_ref().ok_or_else(|| CliError::Config("missing `target` (coherent, squeezed, fock or cat)".into()))
    }
}

const TARGET_PARAMS: [&str; 5] = ["alpha", "phase", "r", "n", "parity"];

/// Reads `path` (if any) and overlays its keys on the profile defaults.
/// The profile flag beats a `profile` key in the file; `seed` beats both.
pub fn load(path: Option<&Path>, profile: Option<Profile>, role: Role, seed: Option<u64>) -> CliResult<RunConfig> {
    let table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p.display(), e))?;
            text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    from_table(table, profile, role, seed)
}

pub fn from_table(mut table: toml::Table, profile: Option<Profile>, role: Role, seed: Option<u64>) -> CliResult<RunConfig> {
    let file_profile = match table.remove("profile") {
        Some(v) => Some(v.try_into::<Profile>().map_err(|e| CliError::Config(format!("profile: {e}")))?),
        None => None,
    };
    let profile = profile.or(file_profile).unwrap_or_default();
    let target = take_target(&mut table)?;
    let s_max = match table.remove("s_max") {
        Some(v) => Some(number(&v).ok_or_else(|| CliError::Config("s_max must be a number".into()))?),
        None => None,
    };
    if let Some(v) = table.remove("epochs") {
        table.insert("max_iters".into(), v);
    }
    let mut merged = match toml::Value::try_from(profile.base(role)) {
        Ok(toml::Value::Table(t)) => t,
        _ => return Err(CliError::Config("profile defaults are not a table".into())),
    };
    merged.extend(table);
    let mut train: TrainConfig = toml::Value::Table(merged).try_into().map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        train.seed = s;
    }
    train.validate()?;
    Ok(RunConfig { profile, train, target, s_max })
}

fn number(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn take_target(table: &mut toml::Table) -> CliResult<Option<TargetSpec>> {
    let kind = table.remove("target");
    let mut params = toml::Table::new();
    for key in TARGET_PARAMS {
        if let Some(v) = table.remove(key) {
            params.insert(key.into(), v);
        }
    }
    let Some(kind) = kind else {
        if let Some(k) = params.keys().next() {
            return Err(CliError::Config(format!("`{k}` given without `target`")));
        }
        return Ok(None);
    };
    let kind = kind.as_str().ok_or_else(|| CliError::Config("target must be a string".into()))?.to_owned();
    params.insert("kind".into(), toml::Value::String(kind.clone()));
    // integer amplitudes such as `alpha = 1` are accepted
    for key in ["alpha", "phase", "r"] {
        if let Some(toml::Value::Integer(i)) = params.get(key) {
            let f = *i as f64;
            params.insert(key.into(), toml::Value::Float(f));
        }
    }
    toml::Value::Table(params)
        .try_into::<TargetSpec>()
        .map(Some)
        .map_err(|e| CliError::Config(format!("target `{kind}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, role: Role) -> CliResult<RunConfig> {
        from_table(text.parse().unwrap(), None, role, None)
    }

    #[test]
    fn empty_file_gives_profile_defaults() {
        let rc = parse("", Role::Generative).unwrap();
        assert_eq!(rc.train, TrainConfig::desk_generative());
        assert_eq!(rc.target, None);
        let rc = from_table(toml::Table::new(), Some(Profile::Paper), Role::Restoration, Some(9)).unwrap();
        assert_eq!(rc.train, TrainConfig { seed: 9, ..TrainConfig::paper_restoration() });
    }

    #[test]
    fn table_names_are_accepted() {
        let rc = parse(
            "profile = \"paper\"\ntarget = \"cat\"\nalpha = 1\nparity = \"even\"\neta_0 = 0.9\neta_T = 0.8\nlambda = 0.5\nepochs = 7\ntotal_timesteps = 20\nbatch_size = 4",
            Role::Generative,
        )
        .unwrap();
        assert_eq!(rc.profile, Profile::Paper);
        assert_eq!(rc.target, Some(TargetSpec::Cat { alpha: 1.0, parity: CatParity::Even }));
        assert_eq!((rc.train.eta0, rc.train.eta_t, rc.train.lambda), (0.9, 0.8, 0.5));
        assert_eq!((rc.train.max_iters, rc.train.steps, rc.train.cutoff), (7, 20, 15));
    }

    #[test]
    fn flag_profile_wins_over_file() {
        let rc = from_table("profile = \"paper\"".parse().unwrap(), Some(Profile::Desk), Role::Generative, None).unwrap();
        assert_eq!(rc.train.cutoff, 8);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "cutoff_dim = 1",
            "no_such_key = 3",
            "target = \"banana\"",
            "target = \"fock\"",
            "alpha = 1.0",
            "target = \"coherent\"\nalpha = 1.0\nr = 0.2",
            "batch_size = 100",
            "profile = \"huge\"",
        ] {
            match parse(text, Role::Generative) {
                Err(CliError::Config(_)) => {}
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(RunConfig { target: None, ..parse("", Role::Generative).unwrap() }.require_target().is_err());
    }

    #[test]
    fn target_states() {
        let cd = CutoffDim::new(8).unwrap();
        let s = TargetSpec::Fock { n: 1 }.state(cd).unwrap();
        assert_eq!(s.populations()[1], 1.0);
        assert!(matches!(TargetSpec::Fock { n: 8 }.state(cd), Err(CliError::Physics(_))));
        let coh = TargetSpec::Coherent { alpha: 1.0, phase: 0.0 }.state(cd).unwrap();
        assert!(coh.trace() < 1.0 && coh.trace() > 0.9999);
    }
}
