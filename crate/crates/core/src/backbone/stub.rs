//! Frozen pre-norm transformer encoder with per-layer adapter sites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::g2a::{g2a_forward_var, mhsa, AdapterFlags, AdapterParams, AdapterVars, AttnParams, AttnVars};
use crate::numerics::{GeluMode, Tape, Tensor, Var};
use crate::params::{bind_tensor, impl_parameters, join, Binding, Parameters};
use crate::scalar::{round_to_f32, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Row 0 of each grid.
    #[default]
    Cls,
    /// Mean over all rows.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubConfig {
    pub width: usize,
    pub out_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub ln_eps: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig { width: 32, out_dim: 32, layers: 2, heads: 4, ffn_hidden: 64, ln_eps: 1e-5 }
    }
}

impl StubConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.out_dim == 0 || self.layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("backbone extents must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub attn: AttnParams<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
}

impl_parameters!(Block { attn => "attn", ffn_w1 => "ffn.W1", ffn_b1 => "ffn.b1", ffn_w2 => "ffn.W2", ffn_b2 => "ffn.b2" });

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneStub<T> {
    pub config: StubConfig,
    pub blocks: Vec<Block<T>>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

impl_parameters!(BackboneStub { blocks => "blocks", proj_w => "proj.W", proj_b => "proj.b" });

struct BlockVars<T> {
    attn: AttnVars<T>,
    ffn_w1: Var<T>,
    ffn_b1: Var<T>,
    ffn_w2: Var<T>,
    ffn_b2: Var<T>,
}

/// Stub weights bound to a tape as constants.
pub struct StubVars<T> {
    blocks: Vec<BlockVars<T>>,
    proj_w: Var<T>,
    proj_b: Var<T>,
}

impl<T: Scalar> BackboneStub<T> {
    /// Draws every weight from a generator seeded with `seed`. Values are
    /// rounded to single precision.
    pub fn new(config: StubConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, ff) = (config.width, config.ffn_hidden);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut attn = AttnParams::init(w, &mut rng);
            for b in [&mut attn.bq, &mut attn.bk, &mut attn.bv, &mut attn.bo] {
                *b = Tensor::randn(&[w], 0.02, &mut rng);
            }
            blocks.push(Block {
                attn,
                ffn_w1: Tensor::randn(&[w, ff], 1.0 / (w as f64).sqrt(), &mut rng),
                ffn_b1: Tensor::randn(&[ff], 0.02, &mut rng),
                ffn_w2: Tensor::randn(&[ff, w], 1.0 / (ff as f64).sqrt(), &mut rng),
                ffn_b2: Tensor::randn(&[w], 0.02, &mut rng),
            });
        }
        let mut stub = BackboneStub {
            proj_w: Tensor::randn(&[w, config.out_dim], 1.0 / (w as f64).sqrt(), &mut rng),
            proj_b: Tensor::randn(&[config.out_dim], 0.02, &mut rng),
            blocks,
            config,
        };
        stub.visit_mut("", &mut |_, t| *t = t.map(round_to_f32));
        Ok(stub)
    }

    /// Rebuilds a stub from named tensors produced by [`Parameters::named_tensors`].
    pub fn from_named(config: StubConfig, prefix: &str, bank: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut stub = Self::new(config, 0)?;
        stub.load_named(prefix, bank)?;
        Ok(stub)
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn bind(&self, tape: &Tape<T>) -> StubVars<T> {
        let c = |t: &Tensor<T>| bind_tensor(tape, String::new(), t, Binding::Frozen);
        StubVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    attn: b.attn.bind(tape, "", Binding::Frozen),
                    ffn_w1: c(&b.ffn_w1),
                    ffn_b1: c(&b.ffn_b1),
                    ffn_w2: c(&b.ffn_w2),
                    ffn_b2: c(&b.ffn_b2),
                })
                .collect(),
            proj_w: c(&self.proj_w),
            proj_b: c(&self.proj_b),
        }
    }

    /// Encodes `G` grids of `seq_len` tokens stacked as `[G·seq_len × width]`
    /// into `[G × out_dim]`. When adapters are given, site `l` runs right after
    /// block `l`'s FFN residual.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_var(
        &self,
        vars: &StubVars<T>,
        tokens: &Var<T>,
        seq_len: usize,
        pooling: Pooling,
        adapters: Option<&[AdapterVars<T>]>,
        flags: AdapterFlags,
        gelu: GeluMode,
    ) -> Result<Var<T>> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[1] != self.config.width || seq_len == 0 || shape[0] % seq_len != 0 {
            return Err(Error::dim("encode", &shape, &[seq_len, self.config.width]));
        }
        if let Some(a) = adapters {
            if a.len() != self.layers() {
                return Err(Error::Config(format!("{} adapters for {} adapter sites", a.len(), self.layers())));
            }
        }
        let eps = T::lit(self.config.ln_eps);
        let mut x = tokens.clone();
        for (l, b) in vars.blocks.iter().enumerate() {
            let attn = mhsa(&x.layer_norm_rows(eps)?, &b.attn, self.config.heads, seq_len)?;
            x = x.add(&attn)?;
            let ffn = x
                .layer_norm_rows(eps)?
                .linear(&b.ffn_w1, &b.ffn_b1)?
                .gelu(gelu)
                .linear(&b.ffn_w2, &b.ffn_b2)?;
            x = x.add(&ffn)?;
            if let Some(a) = adapters {
                x = g2a_forward_var(&x, &a[l], flags, seq_len, gelu)?;
            }
        }
        let x = x.layer_norm_rows(eps)?;
        let pooled = match pooling {
            Pooling::Cls => {
                let firsts: Vec<usize> = (0..shape[0] / seq_len).map(|g| g * seq_len).collect();
                x.gather_rows(&firsts)?
            }
            Pooling::Mean => x.segment_mean(seq_len)?,
        };
        pooled.linear(&vars.proj_w, &vars.proj_b)
    }

    /// Encodes equally sized grids; returns `[G × out_dim]`.
    pub fn encode_batch(
        &self,
        grids: &[Tensor<T>],
        pooling: Pooling,
        adapters: Option<&[AdapterParams<T>]>,
        flags: AdapterFlags,
    ) -> Result<Tensor<T>> {
        let first = grids.first().ok_or_else(|| Error::Argument("no token grids".into()))?;
        if first.rank() != 2 {
            return Err(Error::Shape(format!("token grid must be a matrix, got {:?}", first.shape())));
        }
        let seq_len = first.rows();
        let stacked = Tensor::stack(grids)?.reshape(vec![grids.len() * seq_len, first.cols()])?;
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let bound: Option<Vec<AdapterVars<T>>> = adapters.map(|a| {
            a.iter()
                .enumerate()
                .map(|(l, p)| p.bind(&tape, &join("", &format!("L{l}")), Binding::Frozen))
                .collect()
        });
        let out = self.encode_var(&vars, &tape.constant(&stacked), seq_len, pooling, bound.as_deref(), flags, GeluMode::Exact)?;
        Ok(out.value())
    }

    /// Encodes one `N × width` grid into an `out_dim` vector.
    pub fn encode(
        &self,
        tokens: &Tensor<T>,
        pooling: Pooling,
        adapters: Option<&[AdapterParams<T>]>,
        flags: AdapterFlags,
    ) -> Result<Tensor<T>> {
        let out = self.encode_batch(std::slice::from_ref(tokens), pooling, adapters, flags)?;
        out.reshape(vec![self.config.out_dim])
    }
}
