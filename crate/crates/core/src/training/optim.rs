use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Real, Tensor};
use crate::model::{ModelParams, ParamRole};
use crate::saliency::MaskSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; never applied to W_Q / W_K.
    pub weight_decay: f64,
    /// Global gradient-norm clip, disabled when `None`.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
        }
    }
}

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().into_iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One Adam update. Rows whose mask flag is false are skipped entirely:
    /// their parameters, moments and decay are left untouched. `grads` must
    /// already be masked and clipped.
    pub fn apply(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &ModelParams<T>,
        cfg: &AdamConfig,
        masks: Option<&MaskSet>,
    ) -> Result<()> {
        let roles = params.roles();
        let gs: Vec<&Tensor<T>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
        let slots = params.tensors_mut();
        if slots.len() != self.m.len() || gs.len() != slots.len() {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, p) in slots.into_iter().enumerate() {
            let g = gs[i];
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let role = roles[i];
            let decay = match role {
                ParamRole::Other => cfg.weight_decay,
                _ => 0.0,
            };
            let flags = masks.and_then(|m| m.for_role(role)).map(|m| m.rows.as_slice());
            let cols = if p.shape().len() == 2 { p.cols() } else { p.len() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let (pd, gd) = (p.data_mut(), g.data());
            for j in 0..pd.len() {
                if let Some(f) = flags {
                    if !f[j / cols] {
                        continue;
                    }
                }
                let gj = gd[j].f64();
                let mj = b1 * m[j].f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].f64() + (1.0 - b2) * gj * gj;
                m[j] = T::c(mj);
                v[j] = T::c(vj);
                let mut x = pd[j].f64();
                x -= cfg.lr * decay * x;
                x -= cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
                pd[j] = T::c(x);
            }
        }
        Ok(())
    }
}

/// Scales every gradient so the global norm is at most `max`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ModelParams<T>, max: Option<f64>) -> f64 {
    let norm = grads.tensors().iter().map(|(_, t)| t.norm_sq()).sum::<f64>().sqrt();
    if let Some(max) = max {
        if norm > max && norm > 0.0 {
            let s = T::c(max / norm);
            for t in grads.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::saliency::GradientMask;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads_q: 2,
            n_heads_kv: 1,
            head_dim: 4,
            mlp_hidden: 8,
            vocab_size: 5,
            max_seq: 16,
            rope_base: 10000.0,
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p0 = ModelParams::<f64>::init(&tiny(), 1).unwrap();
        let mut p = p0.clone();
        let g = p.with_tensors(p.tensors().iter().map(|(_, t)| t.map(|_| 0.5)).collect()).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            max_grad_norm: None,
            ..AdamConfig::default()
        };
        let mut st = OptimState::new(&p);
        st.apply(&mut p, &g, &cfg, None).unwrap();
        for ((_, a), (_, b)) in p.tensors().iter().zip(p0.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.01).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn masked_rows_keep_parameters_and_moments() {
        let cfg_m = tiny();
        let p0 = ModelParams::<f64>::init(&cfg_m, 2).unwrap();
        let mut p = p0.clone();
        let g = p.with_tensors(p.tensors().iter().map(|(_, t)| t.map(|_| 1.0)).collect()).unwrap();
        let mut masks = MaskSet::all_true(&cfg_m);
        masks.query[0] = GradientMask {
            rows: (0..8).map(|r| r % 3 == 0).collect(),
            ..masks.query[0].clone()
        };
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut st = OptimState::new(&p);
        for _ in 0..3 {
            st.apply(&mut p, &g, &cfg, Some(&masks)).unwrap();
        }
        for r in 0..8 {
            let frozen = r % 3 != 0;
            assert_eq!(p.layers[0].wq.row(r) == p0.layers[0].wq.row(r), frozen);
            assert_eq!(st.m[2].row(r).iter().all(|&v| v == 0.0), frozen);
            assert_eq!(st.v[2].row(r).iter().all(|&v| v == 0.0), frozen);
        }
        assert_ne!(p.layers[0].wv, p0.layers[0].wv);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let p = ModelParams::<f64>::init(&tiny(), 3).unwrap();
        let mut g = p.with_tensors(p.tensors().iter().map(|(_, t)| t.map(|_| 2.0)).collect()).unwrap();
        let before = clip_grad_norm(&mut g, Some(1.0));
        assert!(before > 1.0);
        let after = g.tensors().iter().map(|(_, t)| t.norm_sq()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-9);
    }
}
