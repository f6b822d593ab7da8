use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::backbone::{BackboneStub, Corpus, CorpusConfig, Split, StubConfig, StubVars, CAPTIONS_PER_IMAGE};
use crate::error::{Error, Result};
use crate::g2a::{AdapterParams, AdapterVars};
use crate::mpr::{mpr_forward_var, Dropout, MprHeadVars, MprParams};
use crate::numerics::{matmul, Tape, Tensor, Var};
use crate::objectives::{total_loss, BatchFeatures, LossBreakdown};
use crate::params::{impl_parameters, join, Binding, Parameters};
use crate::retrieval::{compute_report, RetrievalReport};
use crate::scalar::{round_to_f32, Scalar};

const NORM_EPS: f64 = 1e-8;

/// Everything the optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainables<T> {
    pub adapter_vision: Vec<AdapterParams<T>>,
    pub adapter_text: Vec<AdapterParams<T>>,
    pub mpr: MprParams<T>,
}

impl_parameters!(Trainables { adapter_vision => "adapter.vision", adapter_text => "adapter.text", mpr => "mpr" });

/// Frozen encoders plus trainable adapters and perspective heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: TrainConfig,
    pub k: usize,
    pub vision: BackboneStub<T>,
    pub text: BackboneStub<T>,
    pub trainables: Trainables<T>,
}

pub(crate) struct Bound<T> {
    vision: StubVars<T>,
    text: StubVars<T>,
    adapter_vision: Vec<AdapterVars<T>>,
    adapter_text: Vec<AdapterVars<T>>,
    mpr: Vec<MprHeadVars<T>>,
}

/// Normalized embeddings of one split.
pub struct Embeddings<T> {
    pub images: Tensor<T>,
    pub captions: Tensor<T>,
    pub perspectives: Option<Tensor<T>>,
}

fn stack<'a, T: Scalar>(grids: impl IntoIterator<Item = &'a Tensor<f64>>) -> Result<(Tensor<T>, usize)> {
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut count = 0;
    for g in grids {
        let s = (g.rows(), g.cols());
        if *shape.get_or_insert(s) != s {
            return Err(Error::dim("token grids", &[shape.unwrap().0, shape.unwrap().1], g.shape()));
        }
        data.extend(g.data().iter().map(|&v| T::lit(v)));
        count += 1;
    }
    let (n, w) = shape.ok_or_else(|| Error::Argument("no token grids".into()))?;
    Ok((Tensor::new(vec![count * n, w], data)?, n))
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. Every component is drawn regardless of the
    /// ablation flags, so configurations that share a seed share weights.
    pub fn new(config: &TrainConfig, corpus: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let dims = &config.dims;
        let stub = StubConfig {
            width: corpus.d_in,
            out_dim: dims.embed_dim,
            layers: dims.stub_layers,
            heads: dims.stub_heads,
            ffn_hidden: dims.stub_ffn,
            ..StubConfig::default()
        };
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let vision = BackboneStub::new(stub.clone(), master.next_u64())?;
        let text_seed = master.next_u64();
        let text = if dims.tie_encoders { vision.clone() } else { BackboneStub::new(stub, text_seed)? };
        let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        let adapter_dims = dims.adapter(corpus.d_in);
        let adapters = |rng: &mut ChaCha8Rng| -> Result<Vec<AdapterParams<T>>> {
            (0..dims.stub_layers).map(|_| AdapterParams::init(adapter_dims, rng)).collect()
        };
        let adapter_vision = adapters(&mut rng)?;
        let adapter_text = adapters(&mut rng)?;
        let mut mpr = MprParams::init(corpus.k, dims.embed_dim, dims.mpr_hidden, &mut rng)?;
        mpr.dropout = dims.mpr_dropout;
        let mut trainables = Trainables { adapter_vision, adapter_text, mpr };
        trainables.visit_mut("", &mut |_, t| *t = t.map(round_to_f32));
        Ok(Model { config: config.clone(), k: corpus.k, vision, text, trainables })
    }

    pub(crate) fn bind(&self, tape: &Tape<T>, mode: Binding) -> Bound<T> {
        let adapters = |set: &[AdapterParams<T>], prefix: &str| -> Vec<AdapterVars<T>> {
            set.iter().enumerate().map(|(l, p)| p.bind(tape, &join(prefix, &format!("L{l}")), mode)).collect()
        };
        Bound {
            vision: self.vision.bind(tape),
            text: self.text.bind(tape),
            adapter_vision: adapters(&self.trainables.adapter_vision, "adapter.vision"),
            adapter_text: adapters(&self.trainables.adapter_text, "adapter.text"),
            mpr: self.trainables.mpr.bind(tape, "mpr", mode),
        }
    }

    fn encode(
        &self,
        stub: &BackboneStub<T>,
        vars: &StubVars<T>,
        adapters: &[AdapterVars<T>],
        tape: &Tape<T>,
        tokens: (Tensor<T>, usize),
    ) -> Result<Var<T>> {
        let flags = self.config.flags;
        let out = stub.encode_var(
            vars,
            &tape.constant(&tokens.0),
            tokens.1,
            flags.pooling(),
            Some(adapters),
            flags.adapter_flags(),
            self.config.gelu,
        )?;
        Ok(out.l2_normalize_rows(T::lit(NORM_EPS)))
    }

    /// `[n·K × D]` perspective embeddings: MPR heads over the mean of the
    /// encoded sub-perspectives, or the encoded sub-perspectives themselves
    /// when MPR is off.
    fn perspectives(
        &self,
        b: &Bound<T>,
        tape: &Tape<T>,
        corpus: &Corpus,
        images: &[usize],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<T>> {
        let grids = stack(images.iter().flat_map(|&i| corpus.sub_perspectives[i].iter()))?;
        let g_l = self.encode(&self.vision, &b.vision, &b.adapter_vision, tape, grids)?;
        if !self.config.flags.mpr {
            return Ok(g_l);
        }
        let e = g_l.segment_mean(self.k)?;
        let mpr = &self.trainables.mpr;
        let dropout = dropout.map(|rng| Dropout { rate: mpr.dropout, rng });
        mpr_forward_var(&e, &b.mpr, mpr.eps, self.config.gelu, dropout)
    }

    /// Loss of a batch pairing `images[b]` with its caption `captions[b]`.
    pub(crate) fn batch_loss(
        &self,
        b: &Bound<T>,
        tape: &Tape<T>,
        corpus: &Corpus,
        images: &[usize],
        captions: &[usize],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<LossBreakdown<T>> {
        let g_v = self.encode(&self.vision, &b.vision, &b.adapter_vision, tape, stack(images.iter().map(|&i| &corpus.images[i]))?)?;
        let caps = images.iter().zip(captions).map(|(&i, &j)| &corpus.captions[i][j]);
        let g_t = self.encode(&self.text, &b.text, &b.adapter_text, tape, stack(caps)?)?;
        let g_m = if self.config.flags.uses_perspectives() {
            Some(self.perspectives(b, tape, corpus, images, dropout)?)
        } else {
            None
        };
        total_loss(&BatchFeatures { g_v, g_t, g_m, k: self.k }, &self.config.loss())
    }

    /// Embeds the given images, all their captions (image-major) and, when
    /// perspective losses are on, their perspective features.
    pub fn embed(&self, corpus: &Corpus, images: &[usize]) -> Result<Embeddings<T>> {
        if images.is_empty() {
            return Err(Error::Argument("no images to embed".into()));
        }
        let tape = Tape::new();
        let b = self.bind(&tape, Binding::Frozen);
        let g_v = self.encode(&self.vision, &b.vision, &b.adapter_vision, &tape, stack(images.iter().map(|&i| &corpus.images[i]))?)?;
        let caps = images.iter().flat_map(|&i| corpus.captions[i].iter());
        let g_t = self.encode(&self.text, &b.text, &b.adapter_text, &tape, stack(caps)?)?;
        let perspectives = if self.config.flags.uses_perspectives() {
            Some(self.perspectives(&b, &tape, corpus, images, None)?.value())
        } else {
            None
        };
        Ok(Embeddings { images: g_v.value(), captions: g_t.value(), perspectives })
    }

    /// Retrieval score `S_global + S_max` when perspectives are in use,
    /// `S_global` otherwise.
    pub fn similarity(&self, emb: &Embeddings<T>) -> Result<Tensor<T>> {
        let captions_t = emb.captions.transpose()?;
        let mut s = matmul(&emb.images, &captions_t)?;
        if let Some(g_m) = &emb.perspectives {
            let per = matmul(g_m, &captions_t)?;
            let cols = s.cols();
            for (i, row) in s.data_mut().chunks_mut(cols).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let best = (0..self.k).map(|k| per.at(i * self.k + k, j)).fold(T::neg_infinity(), T::max);
                    *v += best;
                }
            }
        }
        Ok(s)
    }

    pub fn evaluate(&self, corpus: &Corpus, split: Split) -> Result<RetrievalReport> {
        let images = corpus.indices(split);
        if images.is_empty() {
            return Err(Error::Argument(format!("{} split is empty", split.name())));
        }
        compute_report(&self.similarity(&self.embed(corpus, &images)?)?, CAPTIONS_PER_IMAGE)
    }

    /// Mean loss components over fixed, unshuffled batches of `images`,
    /// pairing image `i` with caption `i mod 5`. Returns `(total, base, mpc, mpt)`.
    pub fn pass_loss(&self, corpus: &Corpus, images: &[usize]) -> Result<[f64; 4]> {
        let mut sums = [0.0; 4];
        let mut n = 0usize;
        for chunk in images.chunks(self.config.batch_size).filter(|c| c.len() >= 2) {
            let tape = Tape::new();
            let b = self.bind(&tape, Binding::Frozen);
            let captions: Vec<usize> = chunk.iter().map(|&i| i % CAPTIONS_PER_IMAGE).collect();
            let values = self.batch_loss(&b, &tape, corpus, chunk, &captions, None)?.values()?;
            sums.iter_mut().zip(values).for_each(|(s, v)| *s += v.as_f64());
            n += 1;
        }
        if n == 0 {
            return Err(Error::Argument("need at least 2 images per batch".into()));
        }
        Ok(sums.map(|s| s / n as f64))
    }

    /// Trainable scalars actually used by the enabled components.
    pub fn active_params(&self) -> usize {
        let flags = self.config.flags;
        let adapters: usize = self
            .trainables
            .adapter_vision
            .iter()
            .chain(&self.trainables.adapter_text)
            .map(|a| a.count_params(flags.adapter_flags()))
            .sum();
        let mpr = if flags.mpr && flags.uses_perspectives() { self.trainables.mpr.num_scalars() } else { 0 };
        adapters + mpr
    }
}
