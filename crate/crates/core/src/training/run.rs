use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{group_log_probs, rl_loss_and_grad, sft_loss_and_grad, RolloutGroup};
use super::optim::{clip_grad_norm, AdamConfig, OptimState};
use super::reward::compute_reward;
use super::{dapo_filter, TrainConfig};
use crate::error::{Error, Result};
use crate::math::Real;
use crate::model::{
    forward_with, sample_group, ClampHook, ForwardOptions, ModelParams, ParamRole, SampleOptions, TokenId,
};
use crate::perturb::detect_collapse;
use crate::saliency::{apply_mask_in_place, MaskSet};
use crate::tasks::{Dataset, TaskInstance, Vocab, EOS};

/// Deep copy of the parameters used to generate rollouts.
pub fn sync_old_policy<T: Real>(params: &ModelParams<T>) -> ModelParams<T> {
    params.clone()
}

/// One full-parameter supervised update; returns the loss before the update.
pub fn sft_step<T: Real>(
    params: &mut ModelParams<T>,
    optim: &mut OptimState<T>,
    batch: &[(Vec<TokenId>, Vec<TokenId>)],
    cfg: &AdamConfig,
) -> Result<f64> {
    let (loss, mut grads) = sft_loss_and_grad(params, batch)?;
    clip_grad_norm(&mut grads, cfg.max_grad_norm);
    optim.apply(params, &grads, cfg, None)?;
    Ok(loss)
}

/// One JSON line of the RL metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub clip_frac: f64,
    pub grad_norm_qk: f64,
    pub grad_norm_other: f64,
    pub groups: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
}

/// Samples `group_size` responses per instance from `policy` and scores them.
pub fn collect_groups<T: Real>(
    policy: &ModelParams<T>,
    instances: &[&TaskInstance],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RolloutGroup>> {
    let vocab = Vocab::standard();
    let opts = SampleOptions {
        max_new: cfg.max_new_tokens,
        temperature: cfg.temperature,
        greedy: false,
        stop: Some(vocab.id(EOS)?),
    };
    instances
        .iter()
        .map(|inst| {
            let prompt = inst.prompt();
            let rollouts = sample_group(policy, &prompt, cfg.group_size, &opts, None, rng)?;
            let rewards = rollouts
                .iter()
                .map(|r| compute_reward(vocab, &r.tokens, &inst.answer).total() as f64)
                .collect();
            let (responses, old) = rollouts.into_iter().map(|r| (r.tokens, r.log_probs)).unzip();
            RolloutGroup::new(prompt, inst.answer.clone(), responses, old, rewards)
        })
        .collect()
}

/// Objective, masking and optimizer update for one batch of groups.
///
/// `masks` must be present exactly when the algorithm trains a sparse subset
/// of W_Q / W_K rows. `reference` is required when the KL weight is positive.
#[allow(clippy::too_many_arguments)]
pub fn rl_step<T: Real>(
    params: &mut ModelParams<T>,
    optim: &mut OptimState<T>,
    masks: Option<&MaskSet>,
    groups: &[RolloutGroup],
    reference: Option<&ModelParams<T>>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    if cfg.algorithm.uses_masks() != masks.is_some() {
        return Err(Error::Contract(format!(
            "algorithm {} {} gradient masks",
            cfg.algorithm,
            if masks.is_some() { "does not take" } else { "requires" }
        )));
    }
    if let Some(m) = masks {
        m.validate(&params.config)?;
    }
    let obj = cfg.objective();
    let mean_reward = mean(groups.iter().flat_map(|g| g.rewards.iter().copied()));
    let mut metrics = StepMetrics {
        step,
        mean_reward,
        objective: 0.0,
        clip_frac: 0.0,
        grad_norm_qk: 0.0,
        grad_norm_other: 0.0,
        groups: groups.len(),
        eval_acc: None,
    };
    if groups.is_empty() {
        return Ok(metrics);
    }
    let refs = if obj.beta > 0.0 {
        let r = reference.ok_or_else(|| Error::Contract("a positive beta needs a reference policy".into()))?;
        Some(
            groups
                .iter()
                .map(|g| group_log_probs(r, &g.prompt, &g.responses))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let (_, mut grads, stats) = rl_loss_and_grad(params, groups, refs.as_deref(), &obj)?;
    let roles = params.roles();
    let (mut qk, mut other) = (0.0, 0.0);
    for (t, role) in grads.tensors_mut().into_iter().zip(roles) {
        if let Some(mask) = masks.and_then(|m| m.for_role(role)) {
            apply_mask_in_place(t, mask)?;
        }
        match role {
            ParamRole::Other => other += t.norm_sq(),
            _ => qk += t.norm_sq(),
        }
    }
    let adam = cfg.adam(cfg.rl_lr);
    clip_grad_norm(&mut grads, adam.max_grad_norm);
    optim.apply(params, &grads, &adam, masks)?;
    metrics.objective = stats.objective;
    metrics.clip_frac = stats.clipped_tokens as f64 / stats.tokens.max(1) as f64;
    metrics.grad_norm_qk = qk.sqrt();
    metrics.grad_norm_other = other.sqrt();
    Ok(metrics)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub greedy: bool,
    pub max_new: usize,
    pub temperature: f64,
    pub seed: u64,
    pub collapse_threshold: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            greedy: true,
            max_new: 64,
            temperature: 1.0,
            seed: 0,
            collapse_threshold: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub format_rate: f64,
    pub collapse_rate: f64,
    #[serde(skip)]
    pub correct: Vec<bool>,
    #[serde(skip)]
    pub outputs: Vec<Vec<TokenId>>,
}

/// Decodes every instance (greedy by default) and scores the outputs.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    instances: &[TaskInstance],
    opts: &EvalOptions,
    clamp: Option<&ClampHook<T>>,
) -> Result<EvalReport> {
    let vocab = Vocab::standard();
    let sopts = SampleOptions {
        max_new: opts.max_new,
        temperature: opts.temperature,
        greedy: opts.greedy,
        stop: Some(vocab.id(EOS)?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = EvalReport {
        n: instances.len(),
        accuracy: 0.0,
        mean_reward: 0.0,
        format_rate: 0.0,
        collapse_rate: 0.0,
        correct: Vec::with_capacity(instances.len()),
        outputs: Vec::with_capacity(instances.len()),
    };
    if instances.is_empty() {
        return Ok(report);
    }
    for inst in instances {
        let out = sample_group(params, &inst.prompt(), 1, &sopts, clamp, &mut rng)?.remove(0).tokens;
        let r = compute_reward(vocab, &out, &inst.answer);
        report.accuracy += r.answer as f64;
        report.format_rate += r.format as f64;
        report.mean_reward += r.total() as f64;
        report.collapse_rate += detect_collapse(&out, opts.collapse_threshold).0 as u8 as f64;
        report.correct.push(r.answer == 1);
        report.outputs.push(out);
    }
    let n = instances.len() as f64;
    report.accuracy /= n;
    report.format_rate /= n;
    report.mean_reward /= n;
    report.collapse_rate /= n;
    Ok(report)
}

fn eval_options(cfg: &TrainConfig) -> EvalOptions {
    EvalOptions {
        max_new: cfg.max_new_tokens,
        ..EvalOptions::default()
    }
}

/// One JSON line of the supervised metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SftRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub params: ModelParams<f32>,
    pub steps: usize,
    pub val_acc: f64,
}

/// Supervised warm-up on gold responses.
///
/// The last `sft_val_size` instances are held out; training stops after
/// `sft_steps` or as soon as held-out greedy accuracy reaches `sft_target_acc`.
pub fn run_sft(
    mut params: ModelParams<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&SftRecord) -> Result<()>,
) -> Result<SftOutcome> {
    cfg.validate()?;
    let responses = data
        .responses
        .as_ref()
        .ok_or_else(|| Error::Argument("supervised split carries no gold responses".into()))?;
    let n_val = cfg.sft_val_size.min(data.len() / 2);
    let n_train = data.len() - n_val;
    if n_train == 0 {
        return Err(Error::Argument("supervised split is empty".into()));
    }
    let val = &data.instances[n_train..];
    let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = data.instances[..n_train]
        .iter()
        .zip(responses)
        .map(|(i, r)| (i.prompt(), r.clone()))
        .collect();
    let adam = cfg.adam(cfg.sft_lr);
    let eopts = eval_options(cfg);
    let mut optim = OptimState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5f73_6674);
    let mut val_acc = 0.0;
    let mut steps = 0;
    for step in 1..=cfg.sft_steps {
        let idx = sample(&mut rng, n_train, cfg.sft_batch.min(n_train));
        let batch: Vec<_> = idx.iter().map(|i| pairs[i].clone()).collect();
        let loss = sft_step(&mut params, &mut optim, &batch, &adam)?;
        steps = step;
        let check = !val.is_empty() && (step % cfg.sft_eval_every.max(1) == 0 || step == cfg.sft_steps);
        let acc = if check {
            val_acc = evaluate(&params, val, &eopts, None)?.accuracy;
            Some(val_acc)
        } else {
            None
        };
        log(&SftRecord { step, loss, val_acc: acc })?;
        if let (Some(a), Some(target)) = (acc, cfg.sft_target_acc) {
            if a >= target {
                break;
            }
        }
    }
    Ok(SftOutcome { params, steps, val_acc })
}

/// Masks from the magnitudes of the first `calib_size` prompts.
pub fn calibration_masks(params: &ModelParams<f32>, calib: &[TaskInstance], cfg: &TrainConfig) -> Result<MaskSet> {
    let policy = cfg.selection()?;
    let opts = ForwardOptions {
        capture: Some(cfg.capture),
        clamp: None,
    };
    let traces = calib
        .iter()
        .take(cfg.calib_size)
        .map(|inst| {
            forward_with(params, &[inst.prompt()], &opts)?
                .trace
                .ok_or_else(|| Error::Contract("forward did not capture activations".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    MaskSet::from_traces(&traces, &policy)
}

pub enum RlEvent<'a> {
    Step(&'a StepMetrics),
    Checkpoint { step: usize, params: &'a ModelParams<f32> },
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    pub params: ModelParams<f32>,
    pub masks: Option<MaskSet>,
    pub metrics: Vec<StepMetrics>,
    pub final_eval: Option<EvalReport>,
}

/// The RL loop: calibrate masks, then sample, score, filter and update for
/// `rl_steps` steps, evaluating every `eval_every` steps.
pub fn run_rl(
    init: &ModelParams<f32>,
    rl: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(RlEvent<'_>) -> Result<()>,
) -> Result<RlOutcome> {
    cfg.validate()?;
    if rl.is_empty() {
        return Err(Error::Argument("RL split is empty".into()));
    }
    let mut params = init.clone();
    let mut masks = if cfg.algorithm.uses_masks() {
        Some(calibration_masks(&params, &rl.instances, cfg)?)
    } else {
        None
    };
    let reference = (cfg.objective().beta > 0.0).then(|| sync_old_policy(init));
    let mut optim = OptimState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x726c_5f72);
    let eopts = eval_options(cfg);
    let mut old = sync_old_policy(&params);
    let mut history = Vec::with_capacity(cfg.rl_steps);
    let mut final_eval = None;
    for step in 1..=cfg.rl_steps {
        if (step - 1) % cfg.sync_interval == 0 {
            old = sync_old_policy(&params);
        }
        if cfg.mask_refresh > 0 && step > 1 && (step - 1) % cfg.mask_refresh == 0 && masks.is_some() {
            masks = Some(calibration_masks(&params, &rl.instances, cfg)?);
        }
        let picks: Vec<&TaskInstance> = sample(&mut rng, rl.len(), cfg.rl_batch.min(rl.len()))
            .iter()
            .map(|i| &rl.instances[i])
            .collect();
        let sampled = collect_groups(&old, &picks, cfg, &mut rng)?;
        let sampled_reward = mean(sampled.iter().flat_map(|g| g.rewards.iter().copied()));
        let groups = if cfg.algorithm.filters_groups() {
            dapo_filter(sampled)
        } else {
            sampled
        };
        let mut m = rl_step(&mut params, &mut optim, masks.as_ref(), &groups, reference.as_ref(), cfg, step)?;
        m.mean_reward = sampled_reward;
        let last = step == cfg.rl_steps;
        if !eval.is_empty() && ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || last) {
            let rep = evaluate(&params, &eval.instances, &eopts, None)?;
            m.eval_acc = Some(rep.accuracy);
            if last {
                final_eval = Some(rep);
            }
        }
        observer(RlEvent::Step(&m))?;
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || last {
            observer(RlEvent::Checkpoint { step, params: &params })?;
        }
        history.push(m);
    }
    Ok(RlOutcome {
        params,
        masks,
        metrics: history,
        final_eval,
    })
}
