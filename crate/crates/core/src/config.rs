//! Run configuration: defaults, then a config file, then command-line overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::perturb::PerturbSpec;
use crate::saliency::PolicyKind;
use crate::tasks::{SplitConfig, TaskConfig};
use crate::training::{Algorithm, EvalOptions, TrainConfig};

/// Environment variable that replaces the default output root.
pub const OUT_ENV: &str = "LONGACT_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Drives parameter init, batch sampling and rollouts. Copied into `train.seed`.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub split: SplitConfig,
    pub eval: EvalOptions,
    pub perturb: PerturbSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: 0,
            out: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            split: SplitConfig::default(),
            eval: EvalOptions::default(),
            perturb: PerturbSpec::default(),
        }
    }
}

/// Values given on the command line; each one beats the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub policy: Option<PolicyKind>,
    pub algorithm: Option<Algorithm>,
    pub sft_steps: Option<usize>,
    pub rl_steps: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults, or the file at `path` when given, with `ov` applied on top.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if cfg.train.seed != 0 && cfg.train.seed != cfg.seed {
            log::warn!("train.seed is taken from the top-level seed; ignoring {}", cfg.train.seed);
        }
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(n) = &ov.name {
            self.name = n.clone();
        }
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(l) = ov.lambda {
            self.train.lambda = l;
        }
        if let Some(p) = ov.policy {
            self.train.policy = p;
        }
        if let Some(a) = ov.algorithm {
            self.train.algorithm = a;
        }
        if let Some(s) = ov.sft_steps {
            self.train.sft_steps = s;
        }
        if let Some(s) = ov.rl_steps {
            self.train.rl_steps = s;
        }
        if let Some(o) = &ov.out {
            self.out = Some(o.clone());
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        self.perturb.validate()?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::Config(format!("run name `{}` is not a plain directory name", self.name)));
        }
        if self.task.context_len + 16 > self.model.max_seq {
            return Err(Error::Config(format!(
                "task.context_len {} leaves no room for the question and response within model.max_seq {}",
                self.task.context_len, self.model.max_seq
            )));
        }
        Ok(())
    }

    /// Output root: explicit setting, then the environment, then `runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root().join(&self.name)
    }

    /// Every field as one `dotted.key = value` line, sorted. Parses back with [`RunConfig::from_toml`].
    pub fn to_flat(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut s = String::new();
        for l in lines {
            writeln!(s, "{l}").unwrap();
        }
        Ok(s)
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults() {
        let c = RunConfig::from_toml("seed = 3\ntrain.lambda = 0.2\ntrain.algorithm = \"grpo\"\nmodel.n_layers = 1\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.lambda, 0.2);
        assert_eq!(c.train.algorithm, Algorithm::Grpo);
        assert_eq!(c.model.n_layers, 1);
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.train.group_size, 8);
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::from_toml("seed = 3\ntrain.lambda = 0.2\n").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            lambda: Some(0.4),
            policy: Some(PolicyKind::Min),
            ..Overrides::default()
        });
        assert_eq!((c.seed, c.train.seed, c.train.lambda, c.train.policy), (9, 9, 0.4, PolicyKind::Min));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("train.lamda = 0.2\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn flat_form_round_trips() {
        let mut c = RunConfig::default();
        c.train.sft_target_acc = None;
        c.train.max_grad_norm = None;
        c.perturb.layers = Some(vec![0, 1]);
        let flat = c.to_flat().unwrap();
        assert!(flat.lines().all(|l| l.contains(" = ")));
        assert!(flat.contains("train.lambda = 0.3"));
        assert_eq!(RunConfig::from_toml(&flat).unwrap(), c);
    }

    #[test]
    fn run_names_must_be_plain() {
        let c = RunConfig {
            name: "../x".into(),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
