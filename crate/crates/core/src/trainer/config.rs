use serde::{Deserialize, Serialize};

use crate::backbone::Pooling;
use crate::error::{Error, Result};
use crate::g2a::{AdapterDims, AdapterFlags};
use crate::numerics::GeluMode;
use crate::objectives::{LossConfig, TripletWeighting};

/// Component switches shared by training and the ablation grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub attn: bool,
    pub gate: bool,
    pub mpr: bool,
    pub cls_pooling: bool,
    pub use_mpc: bool,
    pub use_mpt: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { attn: true, gate: true, mpr: true, cls_pooling: true, use_mpc: true, use_mpt: true }
    }
}

impl Ablation {
    pub fn adapter_flags(&self) -> AdapterFlags {
        AdapterFlags { attn: self.attn, gate: self.gate }
    }

    pub fn pooling(&self) -> Pooling {
        if self.cls_pooling {
            Pooling::Cls
        } else {
            Pooling::Mean
        }
    }

    /// Whether sub-perspective features take part in training and scoring.
    pub fn uses_perspectives(&self) -> bool {
        self.use_mpc || self.use_mpt
    }
}

/// Widths of the frozen encoders and the trainable modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Shared embedding width `D`.
    pub embed_dim: usize,
    /// Adapter bottleneck `d`.
    pub bottleneck: usize,
    pub adapter_heads: usize,
    pub adapter_ffn: usize,
    pub stub_layers: usize,
    pub stub_heads: usize,
    pub stub_ffn: usize,
    pub mpr_hidden: usize,
    pub mpr_dropout: f64,
    /// Give the text encoder the vision encoder's frozen weights, so both
    /// towers start out in a shared embedding space.
    pub tie_encoders: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed_dim: 32,
            bottleneck: 8,
            adapter_heads: 2,
            adapter_ffn: 16,
            stub_layers: 2,
            stub_heads: 4,
            stub_ffn: 64,
            mpr_hidden: 32,
            mpr_dropout: 0.0,
            tie_encoders: true,
        }
    }
}

impl ModelDims {
    /// Adapter dimensions for a backbone of width `width`.
    pub fn adapter(&self, width: usize) -> AdapterDims {
        AdapterDims { model_dim: width, bottleneck: self.bottleneck, heads: self.adapter_heads, ffn_hidden: self.adapter_ffn }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub betas: (f64, f64),
    pub eps_opt: f64,
    pub margin: f64,
    pub lambda_mpc: f64,
    pub lambda_mpt: f64,
    pub kappa: f64,
    pub seed: u64,
    /// Passes over the train images per epoch, each pairing every image with
    /// one of its captions.
    pub caption_rounds: usize,
    pub gelu: GeluMode,
    pub flags: Ablation,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-5,
            weight_decay: 0.04,
            batch_size: 64,
            epochs: 35,
            temperature: 0.07,
            betas: (0.9, 0.98),
            eps_opt: 1e-8,
            margin: 0.2,
            lambda_mpc: 0.5,
            lambda_mpt: 0.5,
            kappa: 10.0,
            seed: 0,
            caption_rounds: 5,
            gelu: GeluMode::Exact,
            flags: Ablation::default(),
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for the synthetic corpus on one CPU core.
    pub fn desk() -> Self {
        TrainConfig { lr: 1e-3, batch_size: 16, epochs: 30, ..Self::default() }
    }

    pub fn with_flags(&self, flags: Ablation) -> Self {
        TrainConfig { flags, ..self.clone() }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau_inv: 1.0 / self.temperature,
            margin: self.margin,
            lambda_mpc: if self.flags.use_mpc { self.lambda_mpc } else { 0.0 },
            lambda_mpt: if self.flags.use_mpt { self.lambda_mpt } else { 0.0 },
            weighting: TripletWeighting::Sigmoid { kappa: self.kappa },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.caption_rounds == 0 {
            return bad("batch size, epochs and caption rounds must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps_opt > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dims.mpr_dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dims.mpr_dropout));
        }
        self.loss().validate()
    }
}
