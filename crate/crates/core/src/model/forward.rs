use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, TokenId};
use crate::error::{Error, Result};
use crate::math::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Parameters recorded as leaves on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub config: ModelConfig,
    pub embed: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub unembed: Var,
}

impl BoundParams {
    /// Leaves in the canonical order of [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w_up, l.w_down]);
        }
        out.extend([self.final_norm, self.unembed]);
        out
    }

    /// Collects the accumulated gradients into a parameter-shaped container.
    pub fn take_grads<T: Real>(&self, tape: &mut Tape<T>, like: &ModelParams<T>) -> Result<ModelParams<T>> {
        let grads = self.vars().into_iter().map(|v| tape.take_grad(v)).collect();
        like.with_tensors(grads)
    }
}

pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>, requires_grad: bool) -> Result<BoundParams> {
    let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
    let embed = leaf(&params.embed)?;
    let layers = params
        .layers
        .iter()
        .map(|l| {
            Ok(BoundLayer {
                attn_norm: leaf(&l.attn_norm)?,
                wq: leaf(&l.wq)?,
                wk: leaf(&l.wk)?,
                wv: leaf(&l.wv)?,
                wo: leaf(&l.wo)?,
                mlp_norm: leaf(&l.mlp_norm)?,
                w_up: leaf(&l.w_up)?,
                w_down: leaf(&l.w_down)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundParams {
        config: params.config.clone(),
        embed,
        layers,
        final_norm: leaf(&params.final_norm)?,
        unembed: leaf(&params.unembed)?,
    })
}

/// Post-rotary keys and values of every position already processed.
#[derive(Clone, Debug)]
pub struct KvPrefix {
    pub len: usize,
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureMode {
    #[default]
    PreRotary,
    PostRotary,
}

/// Replacement of selected Q/K columns by a constant, applied right after the
/// projection (before rotary embedding).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerClamp<T> {
    pub q_cols: Vec<usize>,
    pub q_value: T,
    pub k_cols: Vec<usize>,
    pub k_value: T,
}

/// Per-layer clamps; `None` leaves a layer untouched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClampHook<T> {
    pub layers: Vec<Option<LayerClamp<T>>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a, T> {
    pub capture: Option<CaptureMode>,
    pub clamp: Option<&'a ClampHook<T>>,
}

/// Q/K/V of one layer for one sequence, `(S, heads * head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

pub struct Segment {
    /// Final-normed hidden states of the new positions.
    pub hidden: Var,
    pub kv: KvPrefix,
    pub trace: Vec<LayerTrace<f64>>,
}

/// Runs `tokens` through the decoder, continuing after `prefix` if given.
pub fn run_segment<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    tokens: &[TokenId],
    prefix: Option<&KvPrefix>,
    opts: &ForwardOptions<'_, T>,
) -> Result<Segment> {
    let cfg = &bound.config;
    let start = prefix.map_or(0, |p| p.len);
    let end = start + tokens.len();
    if end > cfg.max_seq {
        return Err(Error::Length {
            len: end,
            max: cfg.max_seq,
        });
    }
    if tokens.is_empty() {
        return Err(Error::Argument("empty token segment".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (start..end).collect();
    let (hq, hkv, hd) = (cfg.n_heads_q, cfg.n_heads_kv, cfg.head_dim);

    let mut h = tape.embedding(bound.embed, &ids)?;
    let mut kv_layers = Vec::with_capacity(bound.layers.len());
    let mut trace = Vec::new();
    for (li, layer) in bound.layers.iter().enumerate() {
        let x = tape.rms_norm(h, layer.attn_norm)?;
        let mut q = tape.matmul_nt(x, layer.wq)?;
        let mut k = tape.matmul_nt(x, layer.wk)?;
        let v = tape.matmul_nt(x, layer.wv)?;
        if let Some(c) = opts.clamp.and_then(|c| c.layers.get(li)).and_then(Option::as_ref) {
            if !c.q_cols.is_empty() {
                q = tape.fill_columns(q, &c.q_cols, c.q_value)?;
            }
            if !c.k_cols.is_empty() {
                k = tape.fill_columns(k, &c.k_cols, c.k_value)?;
            }
        }
        let qr = tape.rope(q, &positions, hq, hd, cfg.rope_base)?;
        let kr = tape.rope(k, &positions, hkv, hd, cfg.rope_base)?;
        match opts.capture {
            Some(CaptureMode::PreRotary) => trace.push(LayerTrace {
                q: tape.value(q).cast(),
                k: tape.value(k).cast(),
                v: tape.value(v).cast(),
            }),
            Some(CaptureMode::PostRotary) => trace.push(LayerTrace {
                q: tape.value(qr).cast(),
                k: tape.value(kr).cast(),
                v: tape.value(v).cast(),
            }),
            None => {}
        }
        let (k_all, v_all) = match prefix {
            Some(p) => {
                let (pk, pv) = p.layers[li];
                (tape.concat_rows(&[pk, kr])?, tape.concat_rows(&[pv, v])?)
            }
            None => (kr, v),
        };
        let att = tape.attention(qr, k_all, v_all, hq, hkv, hd, start)?;
        let o = tape.matmul_nt(att, layer.wo)?;
        h = tape.add(h, o)?;
        let x2 = tape.rms_norm(h, layer.mlp_norm)?;
        let up = tape.matmul_nt(x2, layer.w_up)?;
        let act = tape.silu(up)?;
        let down = tape.matmul_nt(act, layer.w_down)?;
        h = tape.add(h, down)?;
        kv_layers.push((k_all, v_all));
    }
    let hidden = tape.rms_norm(h, bound.final_norm)?;
    Ok(Segment {
        hidden,
        kv: KvPrefix {
            len: end,
            layers: kv_layers,
        },
        trace,
    })
}

/// Per-layer Q/K/V activations of a batch, each `(B, S, heads, head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace<f64>>,
    pub batch: usize,
    pub seq_len: usize,
    pub n_heads_q: usize,
    pub n_heads_kv: usize,
    pub head_dim: usize,
    pub post_rotary: bool,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

pub struct ForwardOutput<T> {
    /// `(B, S, vocab)`.
    pub logits: Tensor<T>,
    pub trace: Option<ActivationTrace>,
}

/// Full-sequence forward over an equal-length batch. Captures pre-rotary
/// activations when `capture` is set; capturing never changes the logits.
pub fn forward<T: Real>(params: &ModelParams<T>, batch: &[Vec<TokenId>], capture: bool) -> Result<ForwardOutput<T>> {
    let opts = ForwardOptions {
        capture: capture.then_some(CaptureMode::PreRotary),
        clamp: None,
    };
    forward_with(params, batch, &opts)
}

pub fn forward_with<T: Real>(
    params: &ModelParams<T>,
    batch: &[Vec<TokenId>],
    opts: &ForwardOptions<'_, T>,
) -> Result<ForwardOutput<T>> {
    let cfg = &params.config;
    let seq_len = batch.first().map_or(0, Vec::len);
    if batch.is_empty() || seq_len == 0 {
        return Err(Error::Argument("forward needs a non-empty batch".into()));
    }
    if batch.iter().any(|s| s.len() != seq_len) {
        return Err(Error::Dimension("batch sequences must share one length".into()));
    }
    let mut logits = Vec::with_capacity(batch.len() * seq_len * cfg.vocab_size);
    let mut per_layer: Vec<[Vec<f64>; 3]> = vec![Default::default(); cfg.n_layers];
    for seq in batch {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, false)?;
        let seg = run_segment(&mut tape, &bound, seq, None, opts)?;
        let lg = tape.matmul_nt(seg.hidden, bound.unembed)?;
        logits.extend_from_slice(tape.value(lg).data());
        for (acc, lt) in per_layer.iter_mut().zip(&seg.trace) {
            acc[0].extend_from_slice(lt.q.data());
            acc[1].extend_from_slice(lt.k.data());
            acc[2].extend_from_slice(lt.v.data());
        }
    }
    let logits = Tensor::new(vec![batch.len(), seq_len, cfg.vocab_size], logits)?;
    let trace = match opts.capture {
        None => None,
        Some(mode) => {
            let b = batch.len();
            let mk = |data: Vec<f64>, heads: usize| Tensor::new(vec![b, seq_len, heads, cfg.head_dim], data);
            let layers = per_layer
                .into_iter()
                .map(|[q, k, v]| {
                    Ok(LayerTrace {
                        q: mk(q, cfg.n_heads_q)?,
                        k: mk(k, cfg.n_heads_kv)?,
                        v: mk(v, cfg.n_heads_kv)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(ActivationTrace {
                layers,
                batch: b,
                seq_len,
                n_heads_q: cfg.n_heads_q,
                n_heads_kv: cfg.n_heads_kv,
                head_dim: cfg.head_dim,
                post_rotary: mode == CaptureMode::PostRotary,
            })
        }
    };
    Ok(ForwardOutput { logits, trace })
}

/// `log pi(response_t | prompt, response_<t)` for each response token.
pub fn log_probs_of<T: Real>(params: &ModelParams<T>, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<T>> {
    if response.is_empty() {
        return Ok(Vec::new());
    }
    if prompt.is_empty() {
        return Err(Error::Argument("log_probs_of needs a non-empty prompt".into()));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let lp = response_log_probs(&mut tape, &bound, prompt, response, None)?;
    Ok(tape.value(lp).data().to_vec())
}

/// Records the response-token log-probabilities of `prompt ++ response` on
/// `tape`, optionally continuing from an already-computed prompt prefix.
pub(crate) fn response_log_probs<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    prompt: &[TokenId],
    response: &[TokenId],
    prompt_segment: Option<&Segment>,
) -> Result<Var> {
    let owned;
    let pseg = match prompt_segment {
        Some(s) => s,
        None => {
            owned = run_segment(tape, bound, prompt, None, &ForwardOptions::default())?;
            &owned
        }
    };
    let last_prompt = tape.select_rows(pseg.hidden, &[prompt.len() - 1])?;
    let mut rows = vec![last_prompt];
    if response.len() > 1 {
        let rseg = run_segment(
            tape,
            bound,
            &response[..response.len() - 1],
            Some(&pseg.kv),
            &ForwardOptions::default(),
        )?;
        rows.push(rseg.hidden);
    }
    let hidden = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    let logits = tape.matmul_nt(hidden, bound.unembed)?;
    let logp = tape.log_softmax_rows(logits)?;
    let targets: Vec<usize> = response.iter().map(|&t| t as usize).collect();
    tape.gather_cols(logp, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::kernels::{log_softmax_rows, softmax_rows};

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads_q: 4,
            n_heads_kv: 2,
            head_dim: 4,
            mlp_hidden: 24,
            vocab_size: 20,
            max_seq: 32,
            rope_base: 10000.0,
        }
    }

    fn scrambled(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
        // Larger weights than the default init so that attention is far from uniform.
        let p = ModelParams::<f64>::init(cfg, seed).unwrap();
        let ts = p.tensors().into_iter().map(|(_, t)| t.map(|v| v * 20.0)).collect();
        p.with_tensors(ts).unwrap()
    }

    #[test]
    fn single_token_logits_shape() {
        let p = ModelParams::<f32>::init(&small(), 0).unwrap();
        let out = forward(&p, &[vec![3]], false).unwrap();
        assert_eq!(out.logits.shape(), &[1, 1, 20]);
    }

    #[test]
    fn capture_does_not_change_logits() {
        let p = scrambled(&small(), 1);
        let batch = vec![vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1]];
        let a = forward(&p, &batch, false).unwrap();
        let b = forward(&p, &batch, true).unwrap();
        assert_eq!(a.logits, b.logits);
        let trace = b.trace.unwrap();
        assert_eq!(trace.layers[0].q.shape(), &[2, 5, 4, 4]);
        assert_eq!(trace.layers[1].k.shape(), &[2, 5, 2, 4]);
        assert!(!trace.post_rotary);
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let p = ModelParams::<f32>::init(&small(), 0).unwrap();
        assert!(matches!(forward(&p, &[vec![20]], false), Err(Error::Index(_))));
        assert!(matches!(forward(&p, &[vec![1; 33]], false), Err(Error::Length { .. })));
    }

    #[test]
    fn causal() {
        let p = scrambled(&small(), 2);
        let a = forward(&p, &[vec![1, 2, 3, 4, 5, 6]], false).unwrap();
        let b = forward(&p, &[vec![1, 2, 3, 9, 9, 9]], false).unwrap();
        let v = 20;
        assert_eq!(a.logits.data()[..3 * v], b.logits.data()[..3 * v]);
        assert_ne!(a.logits.data()[3 * v..4 * v], b.logits.data()[3 * v..4 * v]);
    }

    #[test]
    fn prefix_continuation_matches_full_forward() {
        let p = scrambled(&small(), 3);
        let seq: Vec<TokenId> = vec![4, 7, 1, 1, 9, 12, 3];
        let full = forward(&p, &[seq.clone()], false).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &p, false).unwrap();
        let first = run_segment(&mut tape, &bound, &seq[..4], None, &ForwardOptions::default()).unwrap();
        let second = run_segment(&mut tape, &bound, &seq[4..], Some(&first.kv), &ForwardOptions::default()).unwrap();
        let lg = tape.matmul_nt(second.hidden, bound.unembed).unwrap();
        for (a, b) in tape.value(lg).data().iter().zip(&full.logits.data()[4 * 20..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_probs_match_cross_entropy_decomposition() {
        let p = scrambled(&small(), 4);
        let prompt = vec![1, 2, 3, 4];
        let response = vec![5, 6, 7];
        let lp = log_probs_of(&p, &prompt, &response).unwrap();
        let mut seq = prompt.clone();
        seq.extend(&response);
        let out = forward(&p, &[seq], false).unwrap();
        let logits = out.logits.reshape(&[7, 20]).unwrap();
        let ls = log_softmax_rows(&logits).unwrap();
        for (t, &tok) in response.iter().enumerate() {
            let want = ls.row(prompt.len() - 1 + t)[tok as usize];
            assert!((lp[t] - want).abs() < 1e-6);
        }
        assert!(log_probs_of(&p, &prompt, &[]).unwrap().is_empty());
        let again = log_probs_of(&p, &prompt, &response).unwrap();
        assert!(lp.iter().zip(&again).all(|(a, b)| (a - b).exp() == 1.0));
        // probabilities sanity
        let sm = softmax_rows(&logits).unwrap();
        assert!((sm.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// Standard multi-head attention written out directly, for H_Q == H_KV.
    fn reference_mha(p: &ModelParams<f64>, seq: &[TokenId]) -> Vec<f64> {
        use crate::math::kernels::{matmul_nt, rms_norm};
        let cfg = &p.config;
        let s = seq.len();
        let d = cfg.d_model;
        let mut h = Tensor::<f64>::zeros(&[s, d]);
        for (i, &t) in seq.iter().enumerate() {
            h.row_mut(i).copy_from_slice(p.embed.row(t as usize));
        }
        let rope = |x: &mut Tensor<f64>| {
            for i in 0..s {
                for head in 0..cfg.n_heads_q {
                    for pp in 0..cfg.head_dim / 2 {
                        let theta = i as f64 * cfg.rope_base.powf(-2.0 * pp as f64 / cfg.head_dim as f64);
                        let j = head * cfg.head_dim + 2 * pp;
                        let (a, b) = (x.row(i)[j], x.row(i)[j + 1]);
                        x.row_mut(i)[j] = a * theta.cos() - b * theta.sin();
                        x.row_mut(i)[j + 1] = a * theta.sin() + b * theta.cos();
                    }
                }
            }
        };
        for l in &p.layers {
            let x = rms_norm(&h, &l.attn_norm).unwrap();
            let mut q = matmul_nt(&x, &l.wq).unwrap();
            let mut k = matmul_nt(&x, &l.wk).unwrap();
            let v = matmul_nt(&x, &l.wv).unwrap();
            rope(&mut q);
            rope(&mut k);
            let mut att = Tensor::<f64>::zeros(&[s, d]);
            for head in 0..cfg.n_heads_q {
                let off = head * cfg.head_dim;
                for i in 0..s {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..cfg.head_dim).map(|t| q.row(i)[off + t] * k.row(j)[off + t]).sum::<f64>()
                                / (cfg.head_dim as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
                    for (j, sc) in scores.iter().enumerate() {
                        let w = (sc - m).exp() / z;
                        for t in 0..cfg.head_dim {
                            att.row_mut(i)[off + t] += w * v.row(j)[off + t];
                        }
                    }
                }
            }
            let o = matmul_nt(&att, &l.wo).unwrap();
            h.add_assign(&o);
            let x2 = rms_norm(&h, &l.mlp_norm).unwrap();
            let up = matmul_nt(&x2, &l.w_up).unwrap().map(|u| u / (1.0 + (-u).exp()));
            let down = matmul_nt(&up, &l.w_down).unwrap();
            h.add_assign(&down);
        }
        let hf = rms_norm(&h, &p.final_norm).unwrap();
        matmul_nt(&hf, &p.unembed).unwrap().into_data()
    }

    #[test]
    fn grouped_query_degenerates_to_multi_head() {
        let cfg = ModelConfig {
            n_heads_kv: 4,
            ..small()
        };
        let p = scrambled(&cfg, 5);
        let seq = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let out = forward(&p, &[seq.clone()], false).unwrap();
        for (a, b) in out.logits.data().iter().zip(reference_mha(&p, &seq)) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}
