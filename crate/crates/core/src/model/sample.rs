use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{bind, run_segment, ClampHook, ForwardOptions};
use super::{ModelParams, TokenId};
use crate::error::{Error, Result};
use crate::math::{Real, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub max_new: usize,
    pub temperature: f64,
    /// Argmax decoding; ignores temperature and the seed.
    pub greedy: bool,
    pub stop: Option<TokenId>,
}

/// One sampled continuation together with the untempered log-probability of
/// every emitted token under the sampling policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<f64>,
}

fn choose(logits: &[f64], opts: &SampleOptions, rng: &mut ChaCha8Rng) -> usize {
    if opts.greedy {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let inv_t = 1.0 / opts.temperature;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&v| ((v - max) * inv_t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn log_prob_of(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    logits[idx] - max - z.ln()
}

/// Autoregressive generation of `n` continuations sharing one prompt pass.
/// Each continuation stops at the stop token, at `max_new` tokens, or at
/// the context limit.
pub fn sample_group<T: Real>(
    params: &ModelParams<T>,
    prompt: &[TokenId],
    n: usize,
    opts: &SampleOptions,
    clamp: Option<&ClampHook<T>>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Rollout>> {
    if !opts.greedy && !(opts.temperature > 0.0) {
        return Err(Error::Argument(format!(
            "sampling temperature must be positive, got {}",
            opts.temperature
        )));
    }
    if prompt.is_empty() {
        return Err(Error::Argument("cannot sample from an empty prompt".into()));
    }
    let max_seq = params.config.max_seq;
    let fopts = ForwardOptions { capture: None, clamp };
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let pseg = run_segment(&mut tape, &bound, prompt, None, &fopts)?;
    let last = tape.select_rows(pseg.hidden, &[prompt.len() - 1])?;
    let lg = tape.matmul_nt(last, bound.unembed)?;
    let prompt_logits = tape.value(lg).to_f64_vec();

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut prefix = pseg.kv.clone();
        let mut logits = prompt_logits.clone();
        let mut rollout = Rollout {
            tokens: Vec::new(),
            log_probs: Vec::new(),
        };
        while rollout.tokens.len() < opts.max_new {
            let tok = choose(&logits, opts, rng);
            rollout.tokens.push(tok as TokenId);
            rollout.log_probs.push(log_prob_of(&logits, tok));
            if opts.stop == Some(tok as TokenId)
                || rollout.tokens.len() == opts.max_new
                || prefix.len + 1 >= max_seq
            {
                break;
            }
            let seg = run_segment(&mut tape, &bound, &[tok as TokenId], Some(&prefix), &fopts)?;
            let lg = tape.matmul_nt(seg.hidden, bound.unembed)?;
            logits = tape.value(lg).to_f64_vec();
            prefix = seg.kv;
        }
        out.push(rollout);
    }
    Ok(out)
}

/// Samples one continuation; deterministic given `seed`.
pub fn sample_sequence<T: Real>(
    params: &ModelParams<T>,
    prompt: &[TokenId],
    opts: &SampleOptions,
    seed: u64,
) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut group = sample_group(params, prompt, 1, opts, None, &mut rng)?;
    Ok(group.remove(0).tokens)
}
