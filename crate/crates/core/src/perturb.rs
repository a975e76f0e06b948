//! Clamping selected Q/K activation coordinates to a global mean and
//! measuring what that does to outputs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::kernels::log_softmax_rows;
use crate::math::{Real, Tensor};
use crate::model::{forward_with, ActivationTrace, ClampHook, ForwardOptions, LayerClamp, ModelParams, Projection};
use crate::saliency::{compute_magnitude, select_dims, MagnitudeMatrix, PolicyKind, SelectionPolicy};
use crate::tasks::TaskInstance;
use crate::training::{evaluate, EvalOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Q,
    K,
    Both,
}

impl Target {
    fn includes(self, p: Projection) -> bool {
        matches!((self, p), (Target::Both, _) | (Target::Q, Projection::Q) | (Target::K, Projection::K))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Highest-magnitude dimensions of each head.
    Top,
    /// Lowest-magnitude dimensions of each head.
    Bottom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// One mean per layer and projection.
    #[default]
    PerLayer,
    /// One mean per projection over all selected layers.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSpec {
    pub target: Target,
    pub fraction: f64,
    pub side: Side,
    /// `None` selects every layer.
    pub layers: Option<Vec<usize>>,
    pub mean_mode: MeanMode,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec {
            target: Target::Both,
            fraction: 0.3,
            side: Side::Top,
            layers: None,
            mean_mode: MeanMode::PerLayer,
        }
    }
}

impl PerturbSpec {
    pub fn new(target: Target, fraction: f64, side: Side) -> Result<Self> {
        let s = PerturbSpec {
            target,
            fraction,
            side,
            layers: None,
            mean_mode: MeanMode::PerLayer,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config(format!("perturbation fraction {} outside [0, 1]", self.fraction)));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let side = match self.side {
            Side::Top => "top",
            Side::Bottom => "bottom",
        };
        let target = match self.target {
            Target::Q => "q",
            Target::K => "k",
            Target::Both => "qk",
        };
        format!("{side}-{:.0}%-{target}", self.fraction * 100.0)
    }

    fn layer_list(&self, n_layers: usize) -> Result<Vec<usize>> {
        match &self.layers {
            None => Ok((0..n_layers).collect()),
            Some(ls) => {
                if let Some(l) = ls.iter().find(|&&l| l >= n_layers) {
                    return Err(Error::Contract(format!("layer {l} does not exist (model has {n_layers})")));
                }
                Ok(ls.clone())
            }
        }
    }
}

fn tensor_of(trace: &ActivationTrace, layer: usize, p: Projection) -> Result<&Tensor<f64>> {
    let lt = trace
        .layers
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} not captured")))?;
    Ok(match p {
        Projection::Q => &lt.q,
        Projection::K => &lt.k,
        Projection::V => &lt.v,
    })
}

/// Arithmetic mean of every element of the projection's activations over
/// the given layers of all traces.
pub fn global_mean(traces: &[ActivationTrace], projection: Projection, layers: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for tr in traces {
        for &l in layers {
            let t = tensor_of(tr, l, projection)?;
            sum += t.data().iter().sum::<f64>();
            n += t.len();
        }
    }
    if n == 0 {
        return Err(Error::Argument("global mean of an empty trace".into()));
    }
    Ok(sum / n as f64)
}

/// Unperturbed statistics the clamps are derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub query: Vec<MagnitudeMatrix>,
    pub key: Vec<MagnitudeMatrix>,
    traces: Vec<ActivationTrace>,
}

impl Calibration {
    /// Traces must be captured before rotary embedding, where clamps apply.
    pub fn from_traces(traces: Vec<ActivationTrace>) -> Result<Self> {
        let layers = traces
            .first()
            .ok_or_else(|| Error::Argument("calibration needs at least one trace".into()))?
            .layers
            .len();
        if traces.iter().any(|t| t.post_rotary) {
            return Err(Error::Contract("clamps act before rotary embedding; capture pre-rotary".into()));
        }
        let mags = |p| (0..layers).map(|l| compute_magnitude(&traces, l, p)).collect::<Result<Vec<_>>>();
        Ok(Calibration {
            query: mags(Projection::Q)?,
            key: mags(Projection::K)?,
            traces,
        })
    }

    pub fn from_prompts<T: Real>(params: &ModelParams<T>, prompts: &[Vec<u32>]) -> Result<Self> {
        let opts = ForwardOptions {
            capture: Some(crate::model::CaptureMode::PreRotary),
            clamp: None,
        };
        let traces = prompts
            .iter()
            .map(|p| {
                forward_with(params, std::slice::from_ref(p), &opts)?
                    .trace
                    .ok_or_else(|| Error::Contract("forward did not capture activations".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_traces(traces)
    }

    pub fn n_layers(&self) -> usize {
        self.query.len()
    }

    pub fn mean(&self, projection: Projection, layers: &[usize]) -> Result<f64> {
        global_mean(&self.traces, projection, layers)
    }
}

/// Builds the forward hook realising `spec`: per head, the top or bottom
/// `floor(fraction * D)` dimensions by magnitude are set to the global mean.
pub fn build_clamp<T: Real>(spec: &PerturbSpec, calib: &Calibration) -> Result<ClampHook<T>> {
    spec.validate()?;
    let n = calib.n_layers();
    let layers = spec.layer_list(n)?;
    let kind = match spec.side {
        Side::Top => PolicyKind::Massive,
        Side::Bottom => PolicyKind::Min,
    };
    let policy = SelectionPolicy::new(kind, spec.fraction, 0)?;
    let cols = |m: &MagnitudeMatrix| -> Result<Vec<usize>> {
        let dims = select_dims(m, &policy)?;
        Ok(dims
            .iter()
            .enumerate()
            .flat_map(|(h, ds)| ds.iter().map(move |d| h * m.head_dim() + d))
            .collect())
    };
    let mut hook = ClampHook {
        layers: vec![None; n],
    };
    for &l in &layers {
        let scope: Vec<usize> = match spec.mean_mode {
            MeanMode::PerLayer => vec![l],
            MeanMode::Joint => layers.clone(),
        };
        let mut c = LayerClamp::<T>::default();
        if spec.target.includes(Projection::Q) {
            c.q_cols = cols(&calib.query[l])?;
            c.q_value = T::c(calib.mean(Projection::Q, &scope)?);
        }
        if spec.target.includes(Projection::K) {
            c.k_cols = cols(&calib.key[l])?;
            c.k_value = T::c(calib.mean(Projection::K, &scope)?);
        }
        if !c.q_cols.is_empty() || !c.k_cols.is_empty() {
            hook.layers[l] = Some(c);
        }
    }
    Ok(hook)
}

/// Logits of `tokens` with the clamps of `spec` active, `(S, V)`.
pub fn clamp_activations<T: Real>(
    params: &ModelParams<T>,
    tokens: &[u32],
    spec: &PerturbSpec,
    calib: &Calibration,
) -> Result<Tensor<T>> {
    if calib.n_layers() != params.config.n_layers {
        return Err(Error::Contract(format!(
            "calibration covers {} layers, model has {}",
            calib.n_layers(),
            params.config.n_layers
        )));
    }
    let hook = build_clamp(spec, calib)?;
    let opts = ForwardOptions {
        capture: None,
        clamp: Some(&hook),
    };
    let out = forward_with(params, &[tokens.to_vec()], &opts)?;
    out.logits.reshape(&[tokens.len(), params.config.vocab_size])
}

/// Whether some token repeats at least `threshold` times in a row, and the
/// longest such run.
pub fn detect_collapse(tokens: &[u32], threshold: usize) -> (bool, usize) {
    let mut longest = 0;
    let mut run = 0;
    let mut prev = None;
    for &t in tokens {
        run = if prev == Some(t) { run + 1 } else { 1 };
        prev = Some(t);
        longest = longest.max(run);
    }
    (longest >= threshold, longest)
}

/// Mean over rows of `KL(softmax(p) || softmax(q))`.
pub fn mean_kl_rows(p_logits: &Tensor<f64>, q_logits: &Tensor<f64>) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::Dimension("logit shapes differ".into()));
    }
    let lp = log_softmax_rows(p_logits)?;
    let lq = log_softmax_rows(q_logits)?;
    let rows = lp.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let kl: f64 = lp.row(r).iter().zip(lq.row(r)).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl.max(0.0);
    }
    Ok(total / rows as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbReport {
    pub label: String,
    pub n: usize,
    pub accuracy: f64,
    pub collapse_rate: f64,
    pub divergence: f64,
    #[serde(skip)]
    pub per_prompt_divergence: Vec<f64>,
}

/// Evaluation under clamping plus the mean next-token divergence from the
/// unperturbed model over every prompt position.
pub fn perturb_eval<T: Real>(
    params: &ModelParams<T>,
    instances: &[TaskInstance],
    spec: &PerturbSpec,
    calib: &Calibration,
    opts: &EvalOptions,
) -> Result<PerturbReport> {
    let hook = build_clamp(spec, calib)?;
    let rep = evaluate(params, instances, opts, Some(&hook))?;
    let fopts = ForwardOptions {
        capture: None,
        clamp: Some(&hook),
    };
    let v = params.config.vocab_size;
    let mut per_prompt = Vec::with_capacity(instances.len());
    for inst in instances {
        let prompt = inst.prompt();
        let s = prompt.len();
        let base = forward_with(params, &[prompt.clone()], &ForwardOptions::default())?.logits;
        let pert = forward_with(params, &[prompt], &fopts)?.logits;
        let base: Tensor<f64> = base.cast::<f64>().reshape(&[s, v])?;
        let pert: Tensor<f64> = pert.cast::<f64>().reshape(&[s, v])?;
        per_prompt.push(mean_kl_rows(&base, &pert)?);
    }
    let divergence = if per_prompt.is_empty() {
        0.0
    } else {
        per_prompt.iter().sum::<f64>() / per_prompt.len() as f64
    };
    Ok(PerturbReport {
        label: spec.label(),
        n: rep.n,
        accuracy: rep.accuracy,
        collapse_rate: rep.collapse_rate,
        divergence,
        per_prompt_divergence: per_prompt,
    })
}

/// Plain-text table: one row per setting, columns accuracy / collapse / divergence.
pub fn render_report(rows: &[PerturbReport]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let mut s = String::new();
    writeln!(s, "{:<w$}  {:>5}  {:>8}  {:>8}  {:>10}", "setting", "n", "accuracy", "collapse", "divergence").unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<w$}  {:>5}  {:>8.4}  {:>8.4}  {:>10.6}",
            r.label, r.n, r.accuracy, r.collapse_rate, r.divergence
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerTrace, ModelConfig};

    fn trace_of(q: Vec<f64>, k: Vec<f64>, s: usize, h: usize, d: usize) -> ActivationTrace {
        ActivationTrace {
            layers: vec![LayerTrace {
                q: Tensor::new(vec![1, s, h, d], q).unwrap(),
                k: Tensor::new(vec![1, s, h, d], k.clone()).unwrap(),
                v: Tensor::new(vec![1, s, h, d], k).unwrap(),
            }],
            batch: 1,
            seq_len: s,
            n_heads_q: h,
            n_heads_kv: h,
            head_dim: d,
            post_rotary: false,
        }
    }

    #[test]
    fn mean_cases() {
        let t = trace_of(vec![2.5; 8], vec![1.0; 8], 2, 2, 2);
        assert_eq!(global_mean(&[t.clone()], Projection::Q, &[0]).unwrap(), 2.5);
        let pos = trace_of(vec![1.0, -3.0, 2.0, 7.0], vec![0.0; 4], 1, 1, 4);
        let neg = trace_of(vec![-1.0, 3.0, -2.0, -7.0], vec![0.0; 4], 1, 1, 4);
        assert_eq!(global_mean(&[pos, neg], Projection::Q, &[0]).unwrap(), 0.0);
        assert!(global_mean(&[], Projection::Q, &[0]).is_err());
        assert!(global_mean(&[t], Projection::Q, &[]).is_err());
    }

    #[test]
    fn collapse_cases() {
        assert_eq!(detect_collapse(&[3; 25], 20), (true, 25));
        let alt: Vec<u32> = (0..40).map(|i| i % 2).collect();
        assert_eq!(detect_collapse(&alt, 20), (false, 1));
        assert_eq!(detect_collapse(&[], 20), (false, 0));
    }

    #[test]
    fn spec_validation_and_labels() {
        assert!(PerturbSpec::new(Target::Q, 1.5, Side::Top).is_err());
        assert_eq!(PerturbSpec::new(Target::Both, 0.3, Side::Bottom).unwrap().label(), "bottom-30%-qk");
    }

    fn tiny() -> ModelParams<f64> {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads_q: 2,
            n_heads_kv: 1,
            head_dim: 8,
            mlp_hidden: 16,
            vocab_size: 12,
            max_seq: 32,
            rope_base: 10000.0,
        };
        let p = ModelParams::<f64>::init(&cfg, 4).unwrap();
        let ts = p.tensors().into_iter().map(|(_, t)| t.map(|v| v * 25.0)).collect();
        p.with_tensors(ts).unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let p = tiny();
        let toks = vec![1, 4, 2, 8, 5, 7];
        let calib = Calibration::from_prompts(&p, &[toks.clone()]).unwrap();
        let spec = PerturbSpec::new(Target::Both, 0.0, Side::Top).unwrap();
        let hook: ClampHook<f64> = build_clamp(&spec, &calib).unwrap();
        assert!(hook.layers.iter().all(Option::is_none));
        let a = clamp_activations(&p, &toks, &spec, &calib).unwrap();
        let b = forward_with(&p, &[toks.clone()], &ForwardOptions::default()).unwrap().logits;
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn clamp_selects_per_head_columns() {
        let p = tiny();
        let toks = vec![3, 1, 4, 1, 5];
        let calib = Calibration::from_prompts(&p, &[toks]).unwrap();
        let spec = PerturbSpec::new(Target::Q, 0.25, Side::Top).unwrap();
        let hook: ClampHook<f64> = build_clamp(&spec, &calib).unwrap();
        for l in hook.layers.iter() {
            let c = l.as_ref().unwrap();
            assert_eq!(c.q_cols.len(), 2 * 2);
            assert!(c.k_cols.is_empty());
            assert_eq!(c.q_cols.iter().filter(|&&x| x < 8).count(), 2);
        }
    }

    #[test]
    fn clamping_twice_equals_once() {
        let p = tiny();
        let toks = vec![2, 9, 6, 3, 1, 1];
        let calib = Calibration::from_prompts(&p, &[toks.clone()]).unwrap();
        let spec = PerturbSpec::new(Target::Both, 0.5, Side::Bottom).unwrap();
        let once: ClampHook<f64> = build_clamp(&spec, &calib).unwrap();
        let mut twice = once.clone();
        for c in twice.layers.iter_mut().flatten() {
            let (q, k) = (c.q_cols.clone(), c.k_cols.clone());
            c.q_cols.extend(q);
            c.k_cols.extend(k);
        }
        let run = |h: &ClampHook<f64>| {
            let o = ForwardOptions {
                capture: None,
                clamp: Some(h),
            };
            forward_with(&p, &[toks.clone()], &o).unwrap().logits
        };
        assert_eq!(run(&once), run(&twice));
    }

    #[test]
    fn kl_is_zero_on_identical_and_positive_otherwise() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 2.0, 1.0], vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(mean_kl_rows(&a, &a).unwrap(), 0.0);
        assert!(mean_kl_rows(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn report_has_one_line_per_row() {
        let r = PerturbReport {
            label: "top-30%-qk".into(),
            n: 10,
            accuracy: 0.5,
            collapse_rate: 0.1,
            divergence: 0.25,
            per_prompt_divergence: vec![],
        };
        let t = render_report(&[r.clone(), r]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.starts_with("setting"));
    }
}
