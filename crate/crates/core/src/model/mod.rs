//! Toy decoder-only transformer: pre-norm blocks with grouped-query causal
//! attention, rotary positions on Q/K and a two-matrix SiLU feed-forward.

mod checkpoint;
mod forward;
mod sample;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    bind, forward, forward_with, log_probs_of, run_segment, ActivationTrace, BoundParams, CaptureMode,
    ClampHook, ForwardOptions, ForwardOutput, KvPrefix, LayerClamp, LayerTrace, Segment,
};
pub(crate) use forward::response_log_probs;
pub use sample::{sample_group, sample_sequence, Rollout, SampleOptions};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Real, Tensor};

pub type TokenId = u32;

/// Standard deviation of the normal initialisation of every weight matrix.
pub const INIT_STD: f64 = 0.02;

/// Every embedding row also gets one shared offset vector drawn with this
/// standard deviation. Rotary attention has no content-free component
/// otherwise, so purely positional heads would have nothing to rotate.
pub const EMBED_SHARED_STD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads_q: usize,
    pub n_heads_kv: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads_q: 4,
            n_heads_kv: 2,
            head_dim: 16,
            mlp_hidden: 128,
            vocab_size: 128,
            max_seq: 512,
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return fail("extents must be positive".into());
        }
        if self.n_heads_kv == 0 || self.n_heads_q % self.n_heads_kv != 0 {
            return fail(format!(
                "n_heads_q ({}) must be a multiple of n_heads_kv ({})",
                self.n_heads_q, self.n_heads_kv
            ));
        }
        if self.n_heads_q * self.head_dim != self.d_model {
            return fail(format!(
                "n_heads_q * head_dim = {} must equal d_model = {}",
                self.n_heads_q * self.head_dim,
                self.d_model
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary pairing", self.head_dim));
        }
        if !(self.rope_base > 1.0) {
            return fail(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }

    pub fn q_width(&self) -> usize {
        self.n_heads_q * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_heads_kv * self.head_dim
    }
}

/// Which attention projection a tensor or statistic belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl std::fmt::Display for Projection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    /// `(n_heads_q * head_dim, d_model)`; row `h * head_dim + d` produces dim `d` of head `h`.
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn projection(&self, p: Projection) -> &Tensor<T> {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
        }
    }
}

/// All learnable tensors. Also used as the container for gradients and as
/// the current / rollout / reference policy snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
}

/// Role of a named parameter tensor, used to route masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Query(usize),
    Key(usize),
    Other,
}

impl<T: Real> ModelParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut mat = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| T::c(normal.sample(&mut rng))).collect();
            Tensor::new(vec![rows, cols], data).expect("consistent shape")
        };
        let d = config.d_model;
        let mut embed = mat(config.vocab_size, d);
        let shared = Normal::new(0.0, EMBED_SHARED_STD).expect("valid std");
        let mut orng = ChaCha8Rng::seed_from_u64(seed ^ 0x656d_6265_6464);
        let offset: Vec<f64> = (0..d).map(|_| shared.sample(&mut orng)).collect();
        for row in embed.data_mut().chunks_mut(d) {
            for (x, o) in row.iter_mut().zip(&offset) {
                *x = *x + T::c(*o);
            }
        }
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::filled(&[d], T::one()),
                wq: mat(config.q_width(), d),
                wk: mat(config.kv_width(), d),
                wv: mat(config.kv_width(), d),
                wo: mat(d, config.q_width()),
                mlp_norm: Tensor::filled(&[d], T::one()),
                w_up: mat(config.mlp_hidden, d),
                w_down: mat(d, config.mlp_hidden),
            })
            .collect();
        let unembed = mat(config.vocab_size, d);
        Ok(ModelParams {
            config: config.clone(),
            embed,
            layers,
            final_norm: Tensor::filled(&[d], T::one()),
            unembed,
        })
    }

    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        ModelParams {
            config: self.config.clone(),
            embed: z(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    mlp_norm: z(&l.mlp_norm),
                    w_up: z(&l.w_up),
                    w_down: z(&l.w_down),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            unembed: z(&self.unembed),
        }
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for l in self.layers.iter_mut() {
            out.push(&mut l.attn_norm);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.mlp_norm);
            out.push(&mut l.w_up);
            out.push(&mut l.w_down);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    /// Roles aligned with [`ModelParams::tensors`].
    pub fn roles(&self) -> Vec<ParamRole> {
        let mut out = vec![ParamRole::Other];
        for i in 0..self.layers.len() {
            out.extend([
                ParamRole::Other,
                ParamRole::Query(i),
                ParamRole::Key(i),
                ParamRole::Other,
                ParamRole::Other,
                ParamRole::Other,
                ParamRole::Other,
                ParamRole::Other,
            ]);
        }
        out.extend([ParamRole::Other, ParamRole::Other]);
        out
    }

    /// Rebuilds a parameter set of this structure from tensors in canonical order.
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "tensor shape {:?} does not match {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let tensors: Vec<Tensor<U>> = self.tensors().into_iter().map(|(_, t)| t.cast()).collect();
        let zero = ModelParams::<U> {
            config: self.config.clone(),
            embed: Tensor::zeros(self.embed.shape()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: Tensor::zeros(l.attn_norm.shape()),
                    wq: Tensor::zeros(l.wq.shape()),
                    wk: Tensor::zeros(l.wk.shape()),
                    wv: Tensor::zeros(l.wv.shape()),
                    wo: Tensor::zeros(l.wo.shape()),
                    mlp_norm: Tensor::zeros(l.mlp_norm.shape()),
                    w_up: Tensor::zeros(l.w_up.shape()),
                    w_down: Tensor::zeros(l.w_down.shape()),
                })
                .collect(),
            final_norm: Tensor::zeros(self.final_norm.shape()),
            unembed: Tensor::zeros(self.unembed.shape()),
        };
        zero.with_tensors(tensors).expect("identical structure")
    }

    /// Checks every tensor shape against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::init(&self.config, 0)?;
        for ((name, a), (_, b)) in self.tensors().into_iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "{name}: shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Dimension("layer count does not match config".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
