use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Real, Tape, Tensor, Var};
use crate::model::{bind, response_log_probs, run_segment, BoundParams, ForwardOptions, ModelParams, TokenId};

/// Added to the group standard deviation before dividing.
pub const ADV_EPS: f64 = 1e-6;

/// `A_i = (r_i - mean) / (std + 1e-6)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return vec![0.0; rewards.len()];
    }
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect()
}

pub fn has_reward_variance(rewards: &[f64]) -> bool {
    rewards.windows(2).any(|w| w[0] != w[1])
}

/// One prompt with its sampled responses, scores and rollout-time log-probs.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<TokenId>,
    pub answer: String,
    pub responses: Vec<Vec<TokenId>>,
    pub old_log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        prompt: Vec<TokenId>,
        answer: String,
        responses: Vec<Vec<TokenId>>,
        old_log_probs: Vec<Vec<f64>>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let g = responses.len();
        if g < 2 || old_log_probs.len() != g || rewards.len() != g {
            return Err(Error::Contract(format!(
                "group needs at least 2 responses with matching log-probs and rewards, got {g}/{}/{}",
                old_log_probs.len(),
                rewards.len()
            )));
        }
        for (r, lp) in responses.iter().zip(&old_log_probs) {
            if r.is_empty() || r.len() != lp.len() {
                return Err(Error::Contract("each response needs one log-prob per token".into()));
            }
        }
        let advantages = compute_advantages(&rewards);
        Ok(RolloutGroup {
            prompt,
            answer,
            responses,
            old_log_probs,
            rewards,
            advantages,
        })
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }
}

/// Drops groups whose rewards are all equal.
pub fn dapo_filter(groups: Vec<RolloutGroup>) -> Vec<RolloutGroup> {
    groups.into_iter().filter(|g| has_reward_variance(&g.rewards)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    /// Weight of the per-token KL penalty against the reference policy.
    pub beta: f64,
    /// Average over all tokens of the group instead of per sequence first.
    pub token_level: bool,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "need 0 < eps_low <= eps_high and beta >= 0, got {} / {} / {}",
                self.eps_low, self.eps_high, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveStats {
    /// Sum of the group objectives (the quantity maximised).
    pub objective: f64,
    pub tokens: usize,
    pub clipped_tokens: usize,
    pub mean_kl: f64,
}

/// Records `-J` for one group on `tape` and returns it with statistics.
///
/// Per token: `min(rho A, clip(rho, 1 - eps_low, 1 + eps_high) A) - beta KL`,
/// where `rho = exp(logp - logp_old)` and `KL = exp(d) - d - 1` with
/// `d = logp_ref - logp`.
pub fn group_loss<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    group: &RolloutGroup,
    ref_log_probs: Option<&[Vec<f64>]>,
    cfg: &ObjectiveConfig,
) -> Result<(Var, ObjectiveStats)> {
    if cfg.beta > 0.0 && ref_log_probs.is_none() {
        return Err(Error::Contract("a positive beta needs reference log-probs".into()));
    }
    let pseg = run_segment(tape, bound, &group.prompt, None, &ForwardOptions::default())?;
    let total_tokens: usize = group.responses.iter().map(Vec::len).sum();
    let mut stats = ObjectiveStats {
        tokens: total_tokens,
        ..ObjectiveStats::default()
    };
    let mut parts = Vec::with_capacity(group.size());
    let mut kl_sum = 0.0;
    for (i, resp) in group.responses.iter().enumerate() {
        let len = resp.len();
        let lp = response_log_probs(tape, bound, &group.prompt, resp, Some(&pseg))?;
        let old = tape.constant(Tensor::new(vec![len], group.old_log_probs[i].iter().map(|&v| T::c(v)).collect())?)?;
        let delta = tape.sub(lp, old)?;
        let ratio = tape.exp(delta)?;
        let a = group.advantages[i];
        let unclipped = tape.scale(ratio, T::c(a))?;
        let clipped = tape.clamp(ratio, T::c(1.0 - cfg.eps_low), T::c(1.0 + cfg.eps_high))?;
        let clipped = tape.scale(clipped, T::c(a))?;
        let mut per_token = tape.minimum(unclipped, clipped)?;
        for &r in tape.value(ratio).data() {
            let r = r.f64();
            if (a > 0.0 && r > 1.0 + cfg.eps_high) || (a < 0.0 && r < 1.0 - cfg.eps_low) {
                stats.clipped_tokens += 1;
            }
        }
        if let Some(refs) = ref_log_probs {
            let rf = tape.constant(Tensor::new(vec![len], refs[i].iter().map(|&v| T::c(v)).collect())?)?;
            let d = tape.sub(rf, lp)?;
            let ed = tape.exp(d)?;
            let kl = tape.sub(ed, d)?;
            let kl = tape.add_scalar(kl, -T::one())?;
            kl_sum += tape.value(kl).data().iter().map(|v| v.f64()).sum::<f64>();
            if cfg.beta > 0.0 {
                let pen = tape.scale(kl, T::c(cfg.beta))?;
                per_token = tape.sub(per_token, pen)?;
            }
        }
        let s = tape.sum(per_token)?;
        let weight = if cfg.token_level {
            1.0 / total_tokens as f64
        } else {
            1.0 / (len * group.size()) as f64
        };
        parts.push(tape.scale(s, T::c(weight))?);
    }
    let mut j = parts[0];
    for &p in &parts[1..] {
        j = tape.add(j, p)?;
    }
    stats.objective = tape.value(j).item()?.f64();
    stats.mean_kl = kl_sum / total_tokens as f64;
    let loss = tape.scale(j, -T::one())?;
    Ok((loss, stats))
}

/// `-sum_g J_g` over a batch of groups and its gradient.
pub fn rl_loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    groups: &[RolloutGroup],
    ref_log_probs: Option<&[Vec<Vec<f64>>]>,
    cfg: &ObjectiveConfig,
) -> Result<(f64, ModelParams<T>, ObjectiveStats)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true)?;
    let mut total = ObjectiveStats::default();
    let mut loss: Option<Var> = None;
    let mut kl_weighted = 0.0;
    for (gi, g) in groups.iter().enumerate() {
        let refs = ref_log_probs.map(|r| r[gi].as_slice());
        let (l, s) = group_loss(&mut tape, &bound, g, refs, cfg)?;
        total.objective += s.objective;
        total.tokens += s.tokens;
        total.clipped_tokens += s.clipped_tokens;
        kl_weighted += s.mean_kl * s.tokens as f64;
        loss = Some(match loss {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::Argument("no rollout groups to optimise".into()))?;
    if total.tokens > 0 {
        total.mean_kl = kl_weighted / total.tokens as f64;
    }
    let value = tape.value(loss).item()?.f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "rl objective" });
    }
    tape.backward(loss)?;
    let grads = bound.take_grads(&mut tape, params)?;
    Ok((value, grads, total))
}

/// Log-probabilities of each response under `params`, sharing one prompt pass.
pub fn group_log_probs<T: Real>(
    params: &ModelParams<T>,
    prompt: &[TokenId],
    responses: &[Vec<TokenId>],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let pseg = run_segment(&mut tape, &bound, prompt, None, &ForwardOptions::default())?;
    responses
        .iter()
        .map(|r| {
            if r.is_empty() {
                return Ok(Vec::new());
            }
            let lp = response_log_probs(&mut tape, &bound, prompt, r, Some(&pseg))?;
            Ok(tape.value(lp).to_f64_vec())
        })
        .collect()
}

/// Mean response-token cross-entropy over `(prompt, response)` pairs and its gradient.
pub fn sft_loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    batch: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<(f64, ModelParams<T>)> {
    let total: usize = batch.iter().map(|(_, r)| r.len()).sum();
    if total == 0 {
        return Err(Error::Argument("supervised batch has no response tokens".into()));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true)?;
    let mut acc: Option<Var> = None;
    for (prompt, resp) in batch.iter().filter(|(_, r)| !r.is_empty()) {
        let lp = response_log_probs(&mut tape, &bound, prompt, resp, None)?;
        let s = tape.sum(lp)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let loss = tape.scale(acc.expect("non-empty batch"), T::c(-1.0 / total as f64))?;
    let value = tape.value(loss).item()?.f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "sft loss" });
    }
    tape.backward(loss)?;
    let grads = bound.take_grads(&mut tape, params)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_reference_cases() {
        let a = compute_advantages(&[2.0, 0.0, 0.0, 2.0]);
        for (x, y) in a.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((x - y).abs() < 1e-5);
        }
        assert_eq!(compute_advantages(&[1.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn filter_keeps_only_varied_groups() {
        let mk = |r: Vec<f64>| RolloutGroup::new(vec![1], "x".into(), vec![vec![1]; 4], vec![vec![0.0]; 4], r).unwrap();
        let kept = dapo_filter(vec![mk(vec![2.0; 4]), mk(vec![2.0, 0.0, 2.0, 0.0])]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].rewards, vec![2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn group_contract() {
        assert!(RolloutGroup::new(vec![1], "x".into(), vec![vec![1]], vec![vec![0.0]], vec![1.0]).is_err());
        assert!(RolloutGroup::new(vec![1], "x".into(), vec![vec![1], vec![2]], vec![vec![0.0], vec![]], vec![1.0, 0.0])
            .is_err());
    }

    #[test]
    fn objective_config_bounds() {
        let ok = ObjectiveConfig {
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.0,
            token_level: false,
        };
        assert!(ok.validate().is_ok());
        assert!(ObjectiveConfig { eps_high: 0.1, ..ok }.validate().is_err());
        assert!(ObjectiveConfig { beta: -1.0, ..ok }.validate().is_err());
    }
}
