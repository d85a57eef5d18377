//! The integrity-detection network.
//!
//! A query package and its top-1 retrieved reference package are each
//! balanced (one dense+ReLU layer per modality, concatenated in the order
//! image, text, gps). Two Siamese networks compare the balanced vectors:
//! a relationship classifier and a manipulation detector. The relationship
//! branch drives a forget gate over the manipulation feature. A separate
//! single-package network looks at the query alone, and a single affine
//! layer with a sigmoid reads the concatenation of the gated feature and
//! the single-package feature.
//!
//! With `related_branch = false` the retrieved package is never used
//! (single-package assessment).

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    apply_gate, attention_pool, balance, integrity_forward, related_forward, single_forward, ModelOutput,
    PairLabels, PairRef,
};
pub use train::{
    build_training_pairs, multitask_loss, train, EpochLog, QuerySample, TrainingLog, TrainingPair,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, DenseLayer, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Scale the manipulation feature by the relationship probability.
    Fixed,
    /// Elementwise `sigmoid(w x + b)` over the relationship feature.
    Learnable,
}

impl FromStr for GateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(GateMode::Fixed),
            "learnable" => Ok(GateMode::Learnable),
            other => Err(Error::Config(format!("unknown gate mode `{other}`"))),
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Fixed => "fixed",
            GateMode::Learnable => "learnable",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextPooling {
    Average,
    Attention,
}

impl FromStr for TextPooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(TextPooling::Average),
            "attention" => Ok(TextPooling::Attention),
            other => Err(Error::Config(format!("unknown text pooling `{other}`"))),
        }
    }
}

impl fmt::Display for TextPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextPooling::Average => "average",
            TextPooling::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    pub balanced_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub gate: GateMode,
    pub pooling: TextPooling,
    pub related_branch: bool,
    pub lambda_rel: f64,
    pub lambda_man: f64,
    pub missing_rate: f64,
    pub unrelated_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_dim: 96,
            text_dim: 64,
            balanced_dim: 32,
            hidden_dim: 32,
            attention_dim: 16,
            gate: GateMode::Learnable,
            pooling: TextPooling::Attention,
            related_branch: true,
            lambda_rel: 1.0,
            lambda_man: 1.0,
            missing_rate: 0.0,
            unrelated_rate: 0.3,
            epochs: 60,
            batch_size: 32,
            patience: 10,
            lr: 0.001,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Architecture at the published sizes (300-d balancing, 100-d layers).
    pub fn full_scale(image_dim: usize, text_dim: usize) -> Self {
        ModelConfig {
            image_dim,
            text_dim,
            balanced_dim: 300,
            hidden_dim: 100,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("balanced_dim", self.balanced_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be > 0")));
        }
        for (name, rate) in [("missing_rate", self.missing_rate), ("unrelated_rate", self.unrelated_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("model.{name} must be in [0, 1]")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("model.lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Applies one `key = value` setting (keys without the `model.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("model.{key}: cannot parse `{value}`")))
        }
        match key {
            "image_dim" => self.image_dim = num(key, value)?,
            "text_dim" => self.text_dim = num(key, value)?,
            "balanced_dim" => self.balanced_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "attention_dim" => self.attention_dim = num(key, value)?,
            "gate" => self.gate = value.parse()?,
            "pooling" => self.pooling = value.parse()?,
            "related_branch" => self.related_branch = num(key, value)?,
            "lambda_rel" => self.lambda_rel = num(key, value)?,
            "lambda_man" => self.lambda_man = num(key, value)?,
            "missing_rate" => self.missing_rate = num(key, value)?,
            "unrelated_rate" => self.unrelated_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `model.{other}`"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("model.{k}"), v);
        };
        put("image_dim", self.image_dim.to_string());
        put("text_dim", self.text_dim.to_string());
        put("balanced_dim", self.balanced_dim.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("attention_dim", self.attention_dim.to_string());
        put("gate", self.gate.to_string());
        put("pooling", self.pooling.to_string());
        put("related_branch", self.related_branch.to_string());
        put("lambda_rel", self.lambda_rel.to_string());
        put("lambda_man", self.lambda_man.to_string());
        put("missing_rate", self.missing_rate.to_string());
        put("unrelated_rate", self.unrelated_rate.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("patience", self.patience.to_string());
        put("lr", self.lr.to_string());
        put("seed", self.seed.to_string());
        m
    }
}

/// Additive attention over token vectors: `score_i = u . tanh(W h_i + c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub proj: DenseLayer,
    pub context: Vec<f64>,
}

/// Tower shared by both inputs plus a combining layer over
/// `[f_q, f_r, |f_q - f_r|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseParams {
    pub tower: DenseLayer,
    pub combine: DenseLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgetGate {
    pub mode: GateMode,
    /// `H x H` weight and `H` bias with sigmoid output; present iff learnable.
    pub layer: Option<DenseLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelatedParams {
    pub relationship: SiameseParams,
    pub relationship_head: DenseLayer,
    pub manipulation: SiameseParams,
    pub manipulation_head: DenseLayer,
    pub gate: ForgetGate,
}

/// Every trainable tensor of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Image, text, gps, in that order.
    pub balance: [DenseLayer; 3],
    pub attention: Option<AttentionParams>,
    pub related: Option<RelatedParams>,
    pub single: DenseLayer,
    pub integrity: DenseLayer,
}

/// Bias of the learnable forget gate at initialization.
pub const GATE_BIAS_INIT: f64 = 1.0;

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (b, h) = (cfg.balanced_dim, cfg.hidden_dim);
        let balance = [
            DenseLayer::init(cfg.image_dim, b, Activation::Relu, 0.0, &mut rng),
            DenseLayer::init(cfg.text_dim, b, Activation::Relu, 0.0, &mut rng),
            DenseLayer::init(2, b, Activation::Relu, 0.0, &mut rng),
        ];
        let attention = match cfg.pooling {
            TextPooling::Average => None,
            TextPooling::Attention => {
                let proj = DenseLayer::init(cfg.text_dim, cfg.attention_dim, Activation::Tanh, 0.0, &mut rng);
                let ctx = DenseLayer::init(cfg.attention_dim, 1, Activation::Identity, 0.0, &mut rng);
                Some(AttentionParams {
                    proj,
                    context: ctx.weight.as_slice().to_vec(),
                })
            }
        };
        let siamese = |rng: &mut ChaCha8Rng| SiameseParams {
            tower: DenseLayer::init(3 * b, h, Activation::Relu, 0.0, rng),
            combine: DenseLayer::init(3 * h, h, Activation::Relu, 0.0, rng),
        };
        let related = if cfg.related_branch {
            let relationship = siamese(&mut rng);
            let relationship_head = DenseLayer::init(h, 1, Activation::Identity, 0.0, &mut rng);
            let manipulation = siamese(&mut rng);
            let manipulation_head = DenseLayer::init(h, 3, Activation::Identity, 0.0, &mut rng);
            let layer = match cfg.gate {
                GateMode::Fixed => None,
                GateMode::Learnable => Some(DenseLayer::init(h, h, Activation::Sigmoid, GATE_BIAS_INIT, &mut rng)),
            };
            Some(RelatedParams {
                relationship,
                relationship_head,
                manipulation,
                manipulation_head,
                gate: ForgetGate { mode: cfg.gate, layer },
            })
        } else {
            None
        };
        let single = DenseLayer::init(3 * b, h, Activation::Relu, 0.0, &mut rng);
        let head_in = if cfg.related_branch { 2 * h } else { h };
        let integrity = DenseLayer::init(head_in, 1, Activation::Identity, 0.0, &mut rng);
        Ok(ModelParams {
            balance,
            attention,
            related,
            single,
            integrity,
        })
    }
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        for (layer, name) in self.balance.iter().zip(["image", "text", "gps"]) {
            layer.push_tensors(&format!("balance.{name}"), &mut out);
        }
        if let Some(att) = &self.attention {
            att.proj.push_tensors("attention.proj", &mut out);
            out.push(Tensor {
                name: "attention.context".into(),
                shape: [att.context.len(), 1],
                data: &att.context,
            });
        }
        if let Some(rel) = &self.related {
            rel.relationship.tower.push_tensors("relationship.tower", &mut out);
            rel.relationship.combine.push_tensors("relationship.combine", &mut out);
            rel.relationship_head.push_tensors("relationship.head", &mut out);
            rel.manipulation.tower.push_tensors("manipulation.tower", &mut out);
            rel.manipulation.combine.push_tensors("manipulation.combine", &mut out);
            rel.manipulation_head.push_tensors("manipulation.head", &mut out);
            if let Some(g) = &rel.gate.layer {
                g.push_tensors("gate", &mut out);
            }
        }
        self.single.push_tensors("single", &mut out);
        self.integrity.push_tensors("integrity", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.balance {
            layer.push_tensors_mut(&mut out);
        }
        if let Some(att) = &mut self.attention {
            att.proj.push_tensors_mut(&mut out);
            out.push(&mut att.context);
        }
        if let Some(rel) = &mut self.related {
            rel.relationship.tower.push_tensors_mut(&mut out);
            rel.relationship.combine.push_tensors_mut(&mut out);
            rel.relationship_head.push_tensors_mut(&mut out);
            rel.manipulation.tower.push_tensors_mut(&mut out);
            rel.manipulation.combine.push_tensors_mut(&mut out);
            rel.manipulation_head.push_tensors_mut(&mut out);
            if let Some(g) = &mut rel.gate.layer {
                g.push_tensors_mut(&mut out);
            }
        }
        self.single.push_tensors_mut(&mut out);
        self.integrity.push_tensors_mut(&mut out);
        out
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Model { config, params })
    }
}
