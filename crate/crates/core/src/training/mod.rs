//! Supervised warm-up and group-relative RL with saliency-masked updates.

mod objective;
mod optim;
mod reward;
mod run;

pub use objective::{
    compute_advantages, dapo_filter, group_log_probs, group_loss, has_reward_variance, rl_loss_and_grad,
    sft_loss_and_grad, ObjectiveConfig, ObjectiveStats, RolloutGroup, ADV_EPS,
};
pub use optim::{clip_grad_norm, AdamConfig, OptimState};
pub use reward::{compute_reward, extract_answer_span, reward_from_text, RewardBreakdown};
pub use run::{
    calibration_masks, collect_groups, evaluate, rl_step, run_rl, run_sft, sft_step, sync_old_policy, EvalOptions,
    EvalReport, RlEvent, RlOutcome, SftOutcome, SftRecord, StepMetrics,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CaptureMode;
use crate::saliency::{PolicyKind, SelectionPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Symmetric clip, KL penalty against the post-SFT reference, masked Q/K.
    Grpo,
    /// Asymmetric clip, zero-variance group filtering, no KL, masked Q/K.
    Dapo,
    /// The DAPO objective with every parameter fully updated.
    FullUpdate,
}

impl Algorithm {
    pub fn uses_masks(self) -> bool {
        !matches!(self, Algorithm::FullUpdate)
    }

    pub fn filters_groups(self) -> bool {
        !matches!(self, Algorithm::Grpo)
    }

    pub fn default_objective(self) -> ObjectiveConfig {
        match self {
            Algorithm::Grpo => ObjectiveConfig {
                eps_low: 0.2,
                eps_high: 0.2,
                beta: 0.001,
                token_level: false,
            },
            Algorithm::Dapo | Algorithm::FullUpdate => ObjectiveConfig {
                eps_low: 0.2,
                eps_high: 0.28,
                beta: 0.0,
                token_level: false,
            },
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Algorithm::Grpo),
            "dapo" => Ok(Algorithm::Dapo),
            "full" | "full_update" => Ok(Algorithm::FullUpdate),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Grpo => "grpo",
            Algorithm::Dapo => "dapo",
            Algorithm::FullUpdate => "full_update",
        })
    }
}

/// `Option<f64>` stored as a plain number with 0 standing for `None`, since
/// TOML has no null.
mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let x = f64::deserialize(d)?;
        Ok((x != 0.0).then_some(x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub policy: PolicyKind,
    pub lambda: f64,
    pub group_size: usize,
    /// Clip bounds and KL weight; unset values take the algorithm's defaults.
    pub eps_low: Option<f64>,
    pub eps_high: Option<f64>,
    pub beta: Option<f64>,
    pub token_level: bool,
    pub rl_lr: f64,
    pub sft_lr: f64,
    /// Prompts (groups) per RL step.
    pub rl_batch: usize,
    pub sft_batch: usize,
    /// Upper bound on supervised steps.
    pub sft_steps: usize,
    /// Stop supervised training once validation accuracy reaches this value.
    /// Written as 0 in config files when unset.
    #[serde(with = "zero_is_none")]
    pub sft_target_acc: Option<f64>,
    pub sft_eval_every: usize,
    /// Held out from the end of the supervised split for validation.
    pub sft_val_size: usize,
    pub rl_steps: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    /// Steps between refreshes of the rollout policy.
    pub sync_interval: usize,
    /// Prompts used to compute the magnitude matrices.
    pub calib_size: usize,
    /// Recompute masks every N RL steps; 0 keeps the initial masks.
    pub mask_refresh: usize,
    pub capture: CaptureMode,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 in config files disables it.
    #[serde(with = "zero_is_none")]
    pub max_grad_norm: Option<f64>,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Dapo,
            policy: PolicyKind::Massive,
            lambda: 0.3,
            group_size: 8,
            eps_low: None,
            eps_high: None,
            beta: None,
            token_level: false,
            rl_lr: 3e-4,
            sft_lr: 1e-3,
            rl_batch: 4,
            sft_batch: 16,
            sft_steps: 4000,
            sft_target_acc: Some(0.7),
            sft_eval_every: 5,
            sft_val_size: 64,
            rl_steps: 300,
            max_new_tokens: 64,
            temperature: 1.0,
            sync_interval: 1,
            calib_size: 8,
            mask_refresh: 0,
            capture: CaptureMode::PreRotary,
            eval_every: 50,
            checkpoint_every: 100,
            max_grad_norm: Some(1.0),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        let d = self.algorithm.default_objective();
        ObjectiveConfig {
            eps_low: self.eps_low.unwrap_or(d.eps_low),
            eps_high: self.eps_high.unwrap_or(d.eps_high),
            beta: self.beta.unwrap_or(d.beta),
            token_level: self.token_level,
        }
    }

    /// Copy with the algorithm-dependent values written out.
    pub fn resolved(&self) -> TrainConfig {
        let o = self.objective();
        TrainConfig {
            eps_low: Some(o.eps_low),
            eps_high: Some(o.eps_high),
            beta: Some(o.beta),
            ..self.clone()
        }
    }

    pub fn selection(&self) -> Result<SelectionPolicy> {
        SelectionPolicy::new(self.policy, self.lambda, self.seed)
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective().validate()?;
        self.selection()?;
        let positive = [
            ("group_size", self.group_size >= 2),
            ("rl_batch", self.rl_batch > 0),
            ("sft_batch", self.sft_batch > 0),
            ("max_new_tokens", self.max_new_tokens > 0),
            ("sync_interval", self.sync_interval > 0),
            ("calib_size", self.calib_size > 0),
            ("temperature", self.temperature > 0.0),
            ("rl_lr", self.rl_lr > 0.0),
            ("sft_lr", self.sft_lr > 0.0),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::Config(format!("train.{name} is out of range (group_size needs >= 2)")));
            }
        }
        if let Some(t) = self.sft_target_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("train.sft_target_acc {t} outside [0, 1]")));
            }
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::Config("train.max_grad_norm must be positive, or 0 to disable".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_defaults() {
        let g = TrainConfig {
            algorithm: Algorithm::Grpo,
            ..TrainConfig::default()
        };
        assert_eq!(g.objective().beta, 0.001);
        assert_eq!(g.objective().eps_high, 0.2);
        let d = TrainConfig::default().objective();
        assert_eq!((d.eps_low, d.eps_high, d.beta), (0.2, 0.28, 0.0));
        let r = g.resolved();
        assert_eq!(r.beta, Some(0.001));
        assert!("full".parse::<Algorithm>().unwrap() == Algorithm::FullUpdate);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            group_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            eps_low: Some(0.5),
            eps_high: Some(0.1),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda: 1.2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
