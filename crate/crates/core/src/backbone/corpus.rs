//! Seeded synthetic image/caption/sub-perspective corpus.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{entry, read_text_entry, text_entry};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Tensor};
use crate::scalar::round_to_f32;

pub const CAPTIONS_PER_IMAGE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub n_images: usize,
    /// Sub-perspective grids per image.
    pub k: usize,
    pub d_in: usize,
    /// Tokens per image grid, including the leading class token.
    pub n_tokens: usize,
    /// Tokens per sub-perspective grid, including the leading class token.
    pub n_sub_tokens: usize,
    /// Tokens per caption, including the leading class token.
    pub caption_len: usize,
    pub noise_level: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_classes: 4,
            n_images: 80,
            k: 4,
            d_in: 32,
            n_tokens: 9,
            n_sub_tokens: 5,
            caption_len: 7,
            noise_level: 1.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Argument(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.n_images < self.n_classes {
            return Err(Error::Argument(format!(
                "{} images cannot cover {} classes",
                self.n_images, self.n_classes
            )));
        }
        if self.k == 0 || self.d_in == 0 || self.n_tokens == 0 || self.n_sub_tokens == 0 || self.caption_len == 0 {
            return Err(Error::Argument("k, width and token counts must be positive".into()));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::Argument(format!("noise level must be finite and >= 0, got {}", self.noise_level)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    /// Unit class directions, `n_classes × d_in`.
    pub class_latents: Tensor<f64>,
    pub images: Vec<Tensor<f64>>,
    pub sub_perspectives: Vec<Vec<Tensor<f64>>>,
    pub captions: Vec<Vec<Tensor<f64>>>,
    pub class_id: Vec<usize>,
    pub split: Vec<Split>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Flattens the corpus into named tensors for the feature container.
    pub fn to_bank(&self) -> Vec<(String, Tensor<f64>)> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let mut bank = vec![text_entry("meta.corpus_json", &config)];
        bank.push(("class_latents".to_string(), self.class_latents.clone()));
        let labels: Vec<f64> = self.class_id.iter().map(|&c| c as f64).collect();
        bank.push(("class_id".into(), Tensor::vector(&labels)));
        let splits: Vec<f64> = self.split.iter().map(|&s| Split::ALL.iter().position(|&x| x == s).unwrap_or(0) as f64).collect();
        bank.push(("split".into(), Tensor::vector(&splits)));
        bank.push(("images".into(), Tensor::stack(&self.images).expect("uniform image grids")));
        let subs: Vec<Tensor<f64>> = self.sub_perspectives.iter().flatten().cloned().collect();
        bank.push(("sub_perspectives".into(), Tensor::stack(&subs).expect("uniform sub grids")));
        let caps: Vec<Tensor<f64>> = self.captions.iter().flatten().cloned().collect();
        bank.push(("captions".into(), Tensor::stack(&caps).expect("uniform captions")));
        bank
    }

    /// Inverse of [`Corpus::to_bank`].
    pub fn from_bank(bank: &[(String, Tensor<f64>)]) -> Result<Self> {
        let config: CorpusConfig = serde_json::from_str(&read_text_entry(bank, "meta.corpus_json")?)?;
        config.validate()?;
        let n = config.n_images;
        let unstack = |name: &str, per: usize, rows: usize| -> Result<Vec<Tensor<f64>>> {
            let t = entry(bank, name)?;
            let want = [n * per, rows, config.d_in];
            if t.shape() != want {
                return Err(Error::Shape(format!("{name}: expected {want:?}, got {:?}", t.shape())));
            }
            let size = rows * config.d_in;
            (0..n * per)
                .map(|g| Tensor::new(vec![rows, config.d_in], t.data()[g * size..(g + 1) * size].to_vec()))
                .collect()
        };
        let labels = |name: &str| -> Result<Vec<usize>> {
            let t = entry(bank, name)?;
            if t.numel() != n {
                return Err(Error::Shape(format!("{name}: expected {n} labels, got {:?}", t.shape())));
            }
            Ok(t.data().iter().map(|&v| v as usize).collect())
        };
        let images = unstack("images", 1, config.n_tokens)?;
        let subs = unstack("sub_perspectives", config.k, config.n_sub_tokens)?;
        let caps = unstack("captions", CAPTIONS_PER_IMAGE, config.caption_len)?;
        let split = labels("split")?
            .into_iter()
            .map(|s| Split::ALL.get(s).copied().ok_or_else(|| Error::Config(format!("bad split tag {s}"))))
            .collect::<Result<_>>()?;
        Ok(Corpus {
            class_latents: entry(bank, "class_latents")?.clone(),
            images,
            sub_perspectives: subs.chunks(config.k).map(<[_]>::to_vec).collect(),
            captions: caps.chunks(CAPTIONS_PER_IMAGE).map(<[_]>::to_vec).collect(),
            class_id: labels("class_id")?,
            split,
            config,
        })
    }
}

/// Per-image structure: image `i` of class `y` owns `K` unit perspective
/// directions `p_ik` and their normalized sum `u_i`. With `σ` the noise level
/// and `ε` fresh per-token Gaussian noise of unit expected norm:
///
/// * image tokens: `c_y + σ·u_i + σ·ε`
/// * sub-perspective `k` tokens: `c_y + σ·p_ik + σ·ε`
/// * caption `j` tokens: `c_y + σ·p_i(j mod K) + σ·ε`
///
/// Row 0 of every grid is a fixed class token shared by all grids of the same
/// kind. Classes are assigned round-robin and splits are 8:1:1 by index.
/// Values are rounded to single precision so corpus files are lossless.
pub fn gen_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let unit = |rng: &mut ChaCha8Rng| l2_normalize(&Tensor::<f64>::randn(&[c.d_in], 1.0, rng), 1e-12);

    let latents: Vec<Tensor<f64>> = (0..c.n_classes).map(|_| unit(&mut rng)).collect();
    let image_cls = unit(&mut rng);
    let caption_cls = unit(&mut rng);
    let noise_std = c.noise_level / (c.d_in as f64).sqrt();

    let grid = |rng: &mut ChaCha8Rng, cls: &Tensor<f64>, center: &[f64], tokens: usize| -> Tensor<f64> {
        let mut data = Vec::with_capacity(tokens * c.d_in);
        data.extend_from_slice(cls.data());
        for _ in 1..tokens {
            let eps = Tensor::<f64>::randn(&[c.d_in], noise_std, rng);
            data.extend(center.iter().zip(eps.data()).map(|(m, e)| m + e));
        }
        Tensor::new(vec![tokens, c.d_in], data.into_iter().map(round_to_f32).collect()).expect("positive extents")
    };
    let shifted = |base: &Tensor<f64>, dir: &Tensor<f64>| -> Vec<f64> {
        base.data().iter().zip(dir.data()).map(|(b, d)| b + c.noise_level * d).collect()
    };

    let n_train = c.n_images * 8 / 10;
    let n_val = c.n_images / 10;
    let mut corpus = Corpus {
        config: c.clone(),
        class_latents: Tensor::stack(&latents)?.map(round_to_f32),
        images: Vec::with_capacity(c.n_images),
        sub_perspectives: Vec::with_capacity(c.n_images),
        captions: Vec::with_capacity(c.n_images),
        class_id: Vec::with_capacity(c.n_images),
        split: Vec::with_capacity(c.n_images),
    };
    for i in 0..c.n_images {
        let y = i % c.n_classes;
        let persp: Vec<Tensor<f64>> = (0..c.k).map(|_| unit(&mut rng)).collect();
        let mut sum = vec![0.0; c.d_in];
        for p in &persp {
            sum.iter_mut().zip(p.data()).for_each(|(s, v)| *s += v);
        }
        let u = l2_normalize(&Tensor::vector(&sum), 1e-12);

        corpus.images.push(grid(&mut rng, &image_cls, &shifted(&latents[y], &u), c.n_tokens));
        corpus.sub_perspectives.push(
            persp
                .iter()
                .map(|p| grid(&mut rng, &image_cls, &shifted(&latents[y], p), c.n_sub_tokens))
                .collect(),
        );
        corpus.captions.push(
            (0..CAPTIONS_PER_IMAGE)
                .map(|j| grid(&mut rng, &caption_cls, &shifted(&latents[y], &persp[j % c.k]), c.caption_len))
                .collect(),
        );
        corpus.class_id.push(y);
        corpus.split.push(if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64, k: usize) -> CorpusConfig {
        CorpusConfig { n_images: 40, k, noise_level: noise, seed: 3, ..Default::default() }
    }

    #[test]
    fn zero_noise_collapses_classes() {
        let corpus = gen_corpus(&small(0.0, 1)).unwrap();
        for i in 0..corpus.len() {
            for j in 0..corpus.len() {
                if corpus.class_id[i] == corpus.class_id[j] {
                    assert_eq!(corpus.images[i], corpus.images[j]);
                    assert_eq!(corpus.captions[i], corpus.captions[j]);
                }
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = gen_corpus(&small(0.3, 4)).unwrap();
        let b = gen_corpus(&small(0.3, 4)).unwrap();
        assert_eq!(a, b);
        let c = gen_corpus(&CorpusConfig { seed: 4, ..small(0.3, 4) }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn nearest_class_latent_recovers_labels() {
        let corpus = gen_corpus(&small(0.1, 4)).unwrap();
        for i in corpus.indices(Split::Train) {
            let img = &corpus.images[i];
            let mut mean = vec![0.0; img.cols()];
            for r in 1..img.rows() {
                mean.iter_mut().zip(img.row(r)).for_each(|(m, v)| *m += v);
            }
            let best = (0..corpus.config.n_classes)
                .max_by(|&a, &b| {
                    let dot = |c: usize| -> f64 {
                        corpus.class_latents.row(c).iter().zip(&mean).map(|(x, y)| x * y).sum()
                    };
                    dot(a).partial_cmp(&dot(b)).unwrap()
                })
                .unwrap();
            assert_eq!(best, corpus.class_id[i]);
        }
    }

    #[test]
    fn structure_and_splits() {
        let corpus = gen_corpus(&CorpusConfig::default()).unwrap();
        assert_eq!(corpus.len(), 80);
        assert_eq!(corpus.indices(Split::Train).len(), 64);
        assert_eq!(corpus.indices(Split::Val), (64..72).collect::<Vec<_>>());
        assert_eq!(corpus.indices(Split::Test).len(), 8);
        assert!(corpus.captions.iter().all(|c| c.len() == CAPTIONS_PER_IMAGE));
        assert!(corpus.sub_perspectives.iter().all(|s| s.len() == 4));
        assert!(corpus.images.iter().all(|g| g.shape() == [9, 32]));
    }

    #[test]
    fn bank_round_trip_is_lossless() {
        let corpus = gen_corpus(&small(0.4, 3)).unwrap();
        let bytes = super::super::features::encode_bank(&corpus.to_bank()).unwrap();
        let back = Corpus::from_bank(&super::super::features::decode_bank(&bytes).unwrap()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn invalid_configs() {
        let bad = CorpusConfig { n_images: 3, ..Default::default() };
        assert!(matches!(gen_corpus(&bad), Err(Error::Argument(_))));
        let bad = CorpusConfig { noise_level: -1.0, ..Default::default() };
        assert!(matches!(gen_corpus(&bad), Err(Error::Argument(_))));
    }
}
