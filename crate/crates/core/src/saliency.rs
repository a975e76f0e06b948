//! Activation magnitude statistics and the per-head row masks derived from them.
//!
//! A projection weight of shape `(H * D, d_model)` produces head `h`,
//! dimension `d` from row `h * D + d`. Selecting dimensions per head from the
//! magnitude matrix therefore selects rows of the weight; only those rows
//! receive gradient.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Real, Tensor};
use crate::model::{ActivationTrace, LayerTrace, ModelConfig, ParamRole, Projection};

/// Per-head, per-dimension mean over batch items of the sequence-axis l2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeMatrix {
    pub layer: usize,
    pub projection: Projection,
    /// `(H, D)`.
    pub values: Tensor<f64>,
    pub batch_count: usize,
}

impl MagnitudeMatrix {
    pub fn new(layer: usize, projection: Projection, values: Tensor<f64>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "magnitude matrix must be (H, D), got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Argument("magnitudes must be finite and non-negative".into()));
        }
        Ok(MagnitudeMatrix {
            layer,
            projection,
            values,
            batch_count: 1,
        })
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, h: usize, d: usize) -> f64 {
        self.values.row(h)[d]
    }
}

fn projection_tensor(layer: &LayerTrace<f64>, p: Projection) -> &Tensor<f64> {
    match p {
        Projection::Q => &layer.q,
        Projection::K => &layer.k,
        Projection::V => &layer.v,
    }
}

/// `M[h, d] = (1/B) * sum_i sqrt(sum_s Q_i[s, h, d]^2)` over every batch item
/// of every trace. Items may differ in sequence length across traces.
pub fn compute_magnitude(traces: &[ActivationTrace], layer: usize, projection: Projection) -> Result<MagnitudeMatrix> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Argument("no activation traces given".into()))?;
    let heads = match projection {
        Projection::Q => first.n_heads_q,
        _ => first.n_heads_kv,
    };
    let dim = first.head_dim;
    let width = heads * dim;
    let mut sums = vec![0.0f64; width];
    let mut items = 0usize;
    for tr in traces {
        let lt = tr.layers.get(layer).ok_or_else(|| {
            Error::Index(format!("layer {layer} not captured (trace has {})", tr.layers.len()))
        })?;
        let t = projection_tensor(lt, projection);
        if t.shape() != [tr.batch, tr.seq_len, heads, dim] {
            return Err(Error::Dimension(format!(
                "trace tensor {:?} inconsistent with ({heads}, {dim})",
                t.shape()
            )));
        }
        for b in 0..tr.batch {
            let item = &t.data()[b * tr.seq_len * width..(b + 1) * tr.seq_len * width];
            let mut sq = vec![0.0f64; width];
            for row in item.chunks(width) {
                for (acc, &v) in sq.iter_mut().zip(row) {
                    *acc += v * v;
                }
            }
            for (s, q) in sums.iter_mut().zip(sq) {
                *s += q.sqrt();
            }
            items += 1;
        }
    }
    if items == 0 {
        return Err(Error::Argument("traces contain no batch items".into()));
    }
    let values = sums.into_iter().map(|s| s / items as f64).collect();
    Ok(MagnitudeMatrix {
        layer,
        projection,
        values: Tensor::new(vec![heads, dim], values)?,
        batch_count: items,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Largest magnitudes per head.
    Massive,
    /// Smallest magnitudes per head.
    Min,
    /// Uniform without replacement per head.
    Random,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "massive" => Ok(PolicyKind::Massive),
            "min" => Ok(PolicyKind::Min),
            "random" => Ok(PolicyKind::Random),
            other => Err(Error::Config(format!("unknown selection policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyKind::Massive => "massive",
            PolicyKind::Min => "min",
            PolicyKind::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub kind: PolicyKind,
    /// Fraction of each head's dimensions that stay trainable.
    pub lambda: f64,
    pub seed: u64,
}

impl SelectionPolicy {
    pub fn new(kind: PolicyKind, lambda: f64, seed: u64) -> Result<Self> {
        let p = SelectionPolicy { kind, lambda, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("sparsity ratio {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    /// `floor(lambda * D)`, tolerant of products like `0.29 * 100 = 28.999..`.
    pub fn per_head(&self, head_dim: usize) -> usize {
        ((self.lambda * head_dim as f64 + 1e-9).floor() as usize).min(head_dim)
    }
}

fn random_seed(base: u64, layer: usize, projection: Projection) -> u64 {
    let tag = match projection {
        Projection::Q => 1u64,
        Projection::K => 2,
        Projection::V => 3,
    };
    base ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Per-head selected dimensions, each list ascending. Ties are broken toward
/// the lower dimension index.
pub fn select_dims(m: &MagnitudeMatrix, policy: &SelectionPolicy) -> Result<Vec<Vec<usize>>> {
    policy.validate()?;
    let dim = m.head_dim();
    let k = policy.per_head(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(random_seed(policy.seed, m.layer, m.projection));
    let mut out = Vec::with_capacity(m.heads());
    for h in 0..m.heads() {
        let row = m.values.row(h);
        let mut chosen: Vec<usize> = match (policy.kind, k) {
            (_, 0) => Vec::new(),
            (_, k) if k == dim => (0..dim).collect(),
            (PolicyKind::Random, k) => sample(&mut rng, dim, k).into_vec(),
            (kind, k) => {
                let mut idx: Vec<usize> = (0..dim).collect();
                let ord = |a: &usize, b: &usize| {
                    let by_value = match kind {
                        PolicyKind::Massive => row[*b].total_cmp(&row[*a]),
                        _ => row[*a].total_cmp(&row[*b]),
                    };
                    by_value.then(a.cmp(b))
                };
                idx.select_nth_unstable_by(k - 1, ord);
                idx.truncate(k);
                idx
            }
        };
        chosen.sort_unstable();
        out.push(chosen);
    }
    Ok(out)
}

/// Global weight row of head `h`, dimension `d`.
pub fn row_index(h: usize, d: usize, head_dim: usize, heads: usize) -> Result<usize> {
    if h >= heads || d >= head_dim {
        return Err(Error::Index(format!(
            "(head {h}, dim {d}) outside {heads} heads x {head_dim} dims"
        )));
    }
    Ok(h * head_dim + d)
}

/// Binary row mask over one projection weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientMask {
    pub layer: usize,
    pub projection: Projection,
    pub heads: usize,
    pub head_dim: usize,
    pub rows: Vec<bool>,
    /// Selected dimensions of each head.
    pub selected: Vec<Vec<usize>>,
}

impl GradientMask {
    /// Every row trainable.
    pub fn all(layer: usize, projection: Projection, heads: usize, head_dim: usize) -> Self {
        GradientMask {
            layer,
            projection,
            heads,
            head_dim,
            rows: vec![true; heads * head_dim],
            selected: vec![(0..head_dim).collect(); heads],
        }
    }

    pub fn trainable_rows(&self) -> Vec<usize> {
        self.rows.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
    }

    pub fn count(&self) -> usize {
        self.rows.iter().filter(|&&f| f).count()
    }
}

pub fn build_mask(m: &MagnitudeMatrix, policy: &SelectionPolicy) -> Result<GradientMask> {
    let selected = select_dims(m, policy)?;
    let (heads, dim) = (m.heads(), m.head_dim());
    if policy.per_head(dim) == 0 {
        log::warn!(
            "sparsity ratio {} selects no dimension: layer {} {} projection is fully frozen",
            policy.lambda,
            m.layer,
            m.projection
        );
    }
    let mut rows = vec![false; heads * dim];
    for (h, dims) in selected.iter().enumerate() {
        for &d in dims {
            rows[row_index(h, d, dim, heads)?] = true;
        }
    }
    Ok(GradientMask {
        layer: m.layer,
        projection: m.projection,
        heads,
        head_dim: dim,
        rows,
        selected,
    })
}

/// Query and key masks for every layer of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub query: Vec<GradientMask>,
    pub key: Vec<GradientMask>,
}

impl MaskSet {
    /// Every W_Q / W_K row trainable.
    pub fn all_true(cfg: &ModelConfig) -> Self {
        MaskSet {
            query: (0..cfg.n_layers)
                .map(|l| GradientMask::all(l, Projection::Q, cfg.n_heads_q, cfg.head_dim))
                .collect(),
            key: (0..cfg.n_layers)
                .map(|l| GradientMask::all(l, Projection::K, cfg.n_heads_kv, cfg.head_dim))
                .collect(),
        }
    }

    /// Masks from magnitudes of calibration traces, one per layer and projection.
    pub fn from_traces(traces: &[ActivationTrace], policy: &SelectionPolicy) -> Result<Self> {
        let layers = traces.first().map_or(0, |t| t.layers.len());
        let build = |p: Projection| -> Result<Vec<GradientMask>> {
            (0..layers)
                .map(|l| build_mask(&compute_magnitude(traces, l, p)?, policy))
                .collect()
        };
        let set = MaskSet {
            query: build(Projection::Q)?,
            key: build(Projection::K)?,
        };
        if layers == 0 {
            return Err(Error::Argument("no activation traces given".into()));
        }
        Ok(set)
    }

    pub fn for_role(&self, role: ParamRole) -> Option<&GradientMask> {
        match role {
            ParamRole::Query(l) => self.query.get(l),
            ParamRole::Key(l) => self.key.get(l),
            ParamRole::Other => None,
        }
    }

    /// Checks that every layer's W_Q and W_K is covered with matching sizes.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.query.len() != cfg.n_layers || self.key.len() != cfg.n_layers {
            return Err(Error::Contract(format!(
                "masks cover {} query / {} key layers, model has {}",
                self.query.len(),
                self.key.len(),
                cfg.n_layers
            )));
        }
        for (l, (q, k)) in self.query.iter().zip(&self.key).enumerate() {
            let ok = q.layer == l
                && k.layer == l
                && q.projection == Projection::Q
                && k.projection == Projection::K
                && q.rows.len() == cfg.q_width()
                && k.rows.len() == cfg.kv_width();
            if !ok {
                return Err(Error::Contract(format!("mask for layer {l} does not match the model")));
            }
        }
        Ok(())
    }

    pub fn trainable_rows(&self) -> usize {
        self.query.iter().chain(&self.key).map(GradientMask::count).sum()
    }
}

/// Zeroes the gradient rows whose flag is false; other rows are untouched.
pub fn apply_mask_in_place<T: Real>(grad: &mut Tensor<T>, mask: &GradientMask) -> Result<()> {
    if grad.shape().len() != 2 || grad.shape()[0] != mask.rows.len() {
        return Err(Error::Dimension(format!(
            "gradient {:?} does not have {} rows",
            grad.shape(),
            mask.rows.len()
        )));
    }
    for (r, &keep) in mask.rows.iter().enumerate() {
        if !keep {
            grad.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(())
}

pub fn apply_mask<T: Real>(grad: &Tensor<T>, mask: &GradientMask) -> Result<Tensor<T>> {
    let mut out = grad.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

/// What a saliency dump shows.
pub enum SaliencyView<'a> {
    /// The `H x D` magnitude grid.
    HeadDim(&'a MagnitudeMatrix),
    /// Per-position l2 norms of one batch item, per head and across all features.
    Sequence {
        trace: &'a ActivationTrace,
        layer: usize,
        projection: Projection,
        item: usize,
    },
}

pub fn render_saliency(view: &SaliencyView<'_>) -> Result<String> {
    let mut s = String::new();
    match view {
        SaliencyView::HeadDim(m) => {
            s.push_str("head");
            for d in 0..m.head_dim() {
                write!(s, ",d{d}").unwrap();
            }
            s.push('\n');
            for h in 0..m.heads() {
                write!(s, "{h}").unwrap();
                for v in m.values.row(h) {
                    write!(s, ",{v}").unwrap();
                }
                s.push('\n');
            }
        }
        SaliencyView::Sequence {
            trace,
            layer,
            projection,
            item,
        } => {
            let lt = trace
                .layers
                .get(*layer)
                .ok_or_else(|| Error::Index(format!("layer {layer} not captured")))?;
            if *item >= trace.batch {
                return Err(Error::Index(format!("batch item {item} of {}", trace.batch)));
            }
            let t = projection_tensor(lt, *projection);
            let heads = t.shape()[2];
            let dim = trace.head_dim;
            let width = heads * dim;
            s.push_str("position");
            for h in 0..heads {
                write!(s, ",h{h}").unwrap();
            }
            s.push_str(",all\n");
            let base = item * trace.seq_len * width;
            for pos in 0..trace.seq_len {
                let row = &t.data()[base + pos * width..base + (pos + 1) * width];
                write!(s, "{pos}").unwrap();
                let mut total = 0.0;
                for h in 0..heads {
                    let sq: f64 = row[h * dim..(h + 1) * dim].iter().map(|v| v * v).sum();
                    total += sq;
                    write!(s, ",{}", sq.sqrt()).unwrap();
                }
                writeln!(s, ",{}", total.sqrt()).unwrap();
            }
        }
    }
    Ok(s)
}

/// Writes the view as CSV: header row, index column, values at full precision.
pub fn dump_saliency(view: &SaliencyView<'_>, path: &Path) -> Result<()> {
    let text = render_saliency(view)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`dump_saliency`] back into a `(rows, cols)` grid,
/// dropping the header row and the index column.
pub fn read_saliency_csv(path: &Path) -> Result<Tensor<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .skip(1)
            .map(|c| c.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", ln + 1))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    Tensor::from_rows(&rows).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn appendix_matrix() -> MagnitudeMatrix {
        let values = Tensor::from_rows(&[vec![0.8, 0.2, 0.9, 0.5], vec![0.3, 0.7, 0.6, 0.4]]).unwrap();
        MagnitudeMatrix::new(0, Projection::Q, values).unwrap()
    }

    fn trace_from(q: Vec<f64>, batch: usize, seq: usize, heads: usize, dim: usize) -> ActivationTrace {
        let q = Tensor::new(vec![batch, seq, heads, dim], q).unwrap();
        ActivationTrace {
            layers: vec![LayerTrace {
                k: q.clone(),
                v: q.clone(),
                q,
            }],
            batch,
            seq_len: seq,
            n_heads_q: heads,
            n_heads_kv: heads,
            head_dim: dim,
            post_rotary: false,
        }
    }

    #[test]
    fn magnitude_three_four_five() {
        let tr = trace_from(vec![3.0, 4.0], 1, 2, 1, 1);
        let m = compute_magnitude(&[tr], 0, Projection::Q).unwrap();
        assert_eq!(m.values.data(), &[5.0]);
        let zeros = trace_from(vec![0.0; 24], 2, 3, 2, 2);
        let m = compute_magnitude(&[zeros], 0, Projection::K).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.batch_count, 2);
    }

    #[test]
    fn magnitude_averages_items_of_different_lengths() {
        let a = trace_from(vec![3.0, 4.0], 1, 2, 1, 1);
        let b = trace_from(vec![1.0], 1, 1, 1, 1);
        let m = compute_magnitude(&[a, b], 0, Projection::Q).unwrap();
        assert_eq!(m.values.data(), &[3.0]);
        assert!(compute_magnitude(&[], 0, Projection::Q).is_err());
    }

    #[test]
    fn appendix_selection() {
        let m = appendix_matrix();
        let p = SelectionPolicy::new(PolicyKind::Massive, 0.3, 0).unwrap();
        assert_eq!(select_dims(&m, &p).unwrap(), vec![vec![2], vec![1]]);
        let mask = build_mask(&m, &p).unwrap();
        assert_eq!(mask.trainable_rows(), vec![2, 5]);
        assert_eq!(mask.rows.len(), 8);
    }

    #[test]
    fn row_index_cases() {
        assert_eq!(row_index(1, 1, 4, 2).unwrap(), 5);
        assert_eq!(row_index(0, 2, 4, 2).unwrap(), 2);
        assert_eq!(row_index(0, 0, 7, 1).unwrap(), 0);
        assert!(row_index(2, 0, 4, 2).is_err());
        assert!(row_index(0, 4, 4, 2).is_err());
    }

    #[test]
    fn full_and_empty_selection() {
        let m = appendix_matrix();
        for kind in [PolicyKind::Massive, PolicyKind::Min, PolicyKind::Random] {
            let all = select_dims(&m, &SelectionPolicy::new(kind, 1.0, 3).unwrap()).unwrap();
            assert_eq!(all, vec![vec![0, 1, 2, 3]; 2]);
            let none = build_mask(&m, &SelectionPolicy::new(kind, 0.0, 3).unwrap()).unwrap();
            assert_eq!(none.count(), 0);
        }
        assert!(SelectionPolicy::new(PolicyKind::Massive, 1.5, 0).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let values = Tensor::from_rows(&[vec![1.0, 1.0, 1.0, 0.0]]).unwrap();
        let m = MagnitudeMatrix::new(0, Projection::K, values).unwrap();
        let top = select_dims(&m, &SelectionPolicy::new(PolicyKind::Massive, 0.5, 0).unwrap()).unwrap();
        assert_eq!(top, vec![vec![0, 1]]);
        let bottom = select_dims(&m, &SelectionPolicy::new(PolicyKind::Min, 0.5, 0).unwrap()).unwrap();
        assert_eq!(bottom, vec![vec![0, 3]]);
    }

    #[test]
    fn random_policy_depends_on_seed() {
        let values = Tensor::from_rows(&vec![vec![1.0; 32]; 4]).unwrap();
        let m = MagnitudeMatrix::new(0, Projection::Q, values).unwrap();
        let a = select_dims(&m, &SelectionPolicy::new(PolicyKind::Random, 0.25, 1).unwrap()).unwrap();
        let b = select_dims(&m, &SelectionPolicy::new(PolicyKind::Random, 0.25, 1).unwrap()).unwrap();
        let c = select_dims(&m, &SelectionPolicy::new(PolicyKind::Random, 0.25, 2).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|h| h.len() == 8));
    }

    #[test]
    fn apply_mask_cases() {
        let m = appendix_matrix();
        let mask = build_mask(&m, &SelectionPolicy::new(PolicyKind::Massive, 0.3, 0).unwrap()).unwrap();
        let data: Vec<f64> = (0..8 * 3).map(|i| i as f64 + 0.5).collect();
        let g = Tensor::new(vec![8, 3], data).unwrap();
        let out = apply_mask(&g, &mask).unwrap();
        for r in 0..8 {
            if r == 2 || r == 5 {
                assert_eq!(out.row(r), g.row(r));
            } else {
                assert!(out.row(r).iter().all(|&v| v == 0.0));
            }
        }
        let all = GradientMask::all(0, Projection::Q, 2, 4);
        assert_eq!(apply_mask(&g, &all).unwrap(), g);
        assert!(apply_mask(&Tensor::<f64>::zeros(&[7, 3]), &all).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = appendix_matrix();
        dump_saliency(&SaliencyView::HeadDim(&m), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("head,d0,d1,d2,d3\n"));
        let back = read_saliency_csv(&path).unwrap();
        assert_eq!(back.shape(), &[2, 4]);
        for (a, b) in back.data().iter().zip(m.values.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sequence_dump_has_one_row_per_position() {
        let tr = trace_from((0..2 * 5 * 2 * 3).map(|i| i as f64).collect(), 2, 5, 2, 3);
        let csv = render_saliency(&SaliencyView::Sequence {
            trace: &tr,
            layer: 0,
            projection: Projection::Q,
            item: 1,
        })
        .unwrap();
        assert_eq!(csv.lines().count(), 1 + 5);
        assert!(csv.starts_with("position,h0,h1,all"));
    }
}
