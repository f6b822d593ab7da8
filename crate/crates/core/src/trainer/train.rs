use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::{Model, Trainables};
use super::optim::AdamW;
use crate::backbone::{
    decode_bank, encode_bank, entry, read_text_entry, text_entry, BackboneStub, Corpus, CorpusConfig, Split,
    CAPTIONS_PER_IMAGE,
};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::params::{Binding, Parameters};
use crate::retrieval::RetrievalReport;
use crate::scalar::{round_to_f32, Scalar};

/// Column order of a history row.
pub const HISTORY_COLUMNS: [&str; 11] =
    ["total", "base", "mpc", "mpt", "txt_r1", "txt_r5", "txt_r10", "img_r1", "img_r5", "img_r10", "mR"];

/// Per-epoch record: train loss components from a fixed unshuffled pass at the
/// end of the epoch, then validation recalls and mR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord(pub [f64; 11]);

impl EpochRecord {
    fn new(losses: [f64; 4], val: &RetrievalReport) -> Self {
        let mut row = [0.0; 11];
        row[..4].copy_from_slice(&losses);
        row[4..10].copy_from_slice(&val.recalls());
        row[10] = val.mr;
        EpochRecord(row.map(round_to_f32))
    }

    pub fn total_loss(&self) -> f64 {
        self.0[0]
    }

    pub fn val_mr(&self) -> f64 {
        self.0[10]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub corpus: CorpusConfig,
    /// Parameters after the last epoch.
    pub model: Model<T>,
    /// Parameters after the epoch with the highest validation mR.
    pub best: Trainables<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Learning rate used at every optimizer step.
    pub lr_schedule: Vec<f64>,
}

/// Number of optimizer steps per caption round; batches of one are dropped.
fn batches_per_round(n: usize, batch: usize) -> usize {
    n / batch + usize::from(n % batch >= 2)
}

/// Trains adapters and perspective heads on the train split, evaluating on
/// the validation split after every epoch.
pub fn train<T: Scalar>(corpus: &Corpus, cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let train_idx = corpus.indices(Split::Train);
    if corpus.indices(Split::Val).is_empty() {
        return Err(Error::Argument("validation split is empty".into()));
    }
    let per_round = batches_per_round(train_idx.len(), cfg.batch_size);
    if per_round == 0 {
        return Err(Error::Argument("train split needs at least 2 images".into()));
    }
    let total_steps = cfg.epochs * cfg.caption_rounds * per_round;

    let mut model = Model::<T>::new(cfg, &corpus.config)?;
    let mut opt = AdamW::new(cfg.weight_decay, cfg.betas, cfg.eps_opt);
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut data_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(master.next_u64());

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut lr_schedule = Vec::with_capacity(total_steps);
    let mut best = (f64::NEG_INFINITY, 0, model.trainables.clone());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for round in 0..cfg.caption_rounds {
            let mut order = train_idx.clone();
            order.shuffle(&mut data_rng);
            for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
                let lr = cfg.lr * (1.0 - step as f64 / total_steps as f64);
                let tape = Tape::new();
                let bound = model.bind(&tape, Binding::Trainable);
                let captions = vec![round % CAPTIONS_PER_IMAGE; chunk.len()];
                let loss = model.batch_loss(&bound, &tape, corpus, chunk, &captions, Some(&mut dropout_rng))?;
                let value = loss.total.item()?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss {value} at step {step} (epoch {epoch})")));
                }
                let grads = loss.total.backward()?;
                model.trainables.load_grads("", &grads);
                opt.step(&mut model.trainables, lr)?;
                lr_schedule.push(round_to_f32(lr));
                step += 1;
            }
        }
        let losses = model.pass_loss(corpus, &train_idx)?;
        let report = model.evaluate(corpus, Split::Val)?;
        let record = EpochRecord::new(losses, &report);
        if record.val_mr() > best.0 {
            best = (record.val_mr(), epoch, model.trainables.clone());
        }
        history.push(record);
    }
    model.trainables.visit_mut("", &mut |_, t| t.clear_grad());
    let (_, best_epoch, mut best_params) = best;
    best_params.visit_mut("", &mut |_, t| t.clear_grad());
    Ok(Checkpoint { corpus: corpus.config.clone(), model, best: best_params, best_epoch, history, lr_schedule })
}

impl<T: Scalar> Checkpoint<T> {
    /// Model with the best-validation parameters swapped in.
    pub fn best_model(&self) -> Model<T> {
        Model { trainables: self.best.clone(), ..self.model.clone() }
    }

    pub fn to_bank(&self) -> Result<Vec<(String, Tensor<T>)>> {
        let mut bank = vec![
            text_entry("meta.config_json", &serde_json::to_string(&self.model.config)?),
            text_entry("meta.corpus_json", &serde_json::to_string(&self.corpus)?),
            ("meta.best_epoch".to_string(), Tensor::scalar(T::from_usize_lossy(self.best_epoch))),
        ];
        let mut add = |name: String, t: &Tensor<T>| bank.push((name, t.clone()));
        self.model.vision.visit("backbone.vision", &mut add);
        self.model.text.visit("backbone.text", &mut add);
        self.model.trainables.visit("", &mut add);
        self.best.visit("best", &mut add);
        let epochs = self.history.len();
        if epochs > 0 {
            let rows: Vec<T> = self.history.iter().flat_map(|r| r.0.iter().map(|&v| T::lit(v))).collect();
            bank.push(("history".into(), Tensor::new(vec![epochs, HISTORY_COLUMNS.len()], rows)?));
        }
        if !self.lr_schedule.is_empty() {
            let lrs: Vec<T> = self.lr_schedule.iter().map(|&v| T::lit(v)).collect();
            bank.push(("history.lr".into(), Tensor::vector(&lrs)));
        }
        Ok(bank)
    }

    pub fn from_bank(bank: &[(String, Tensor<T>)]) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(&read_text_entry(bank, "meta.config_json")?)?;
        let corpus: CorpusConfig = serde_json::from_str(&read_text_entry(bank, "meta.corpus_json")?)?;
        let mut model = Model::<T>::new(&config, &corpus)?;
        model.vision = BackboneStub::from_named(model.vision.config.clone(), "backbone.vision", bank)?;
        model.text = BackboneStub::from_named(model.text.config.clone(), "backbone.text", bank)?;
        model.trainables.load_named("", bank)?;
        let mut best = model.trainables.clone();
        best.load_named("best", bank)?;
        let best_epoch = entry(bank, "meta.best_epoch")?.data()[0].as_f64() as usize;
        let history = match bank.iter().find(|(n, _)| n == "history") {
            Some((_, t)) => {
                if t.rank() != 2 || t.cols() != HISTORY_COLUMNS.len() {
                    return Err(Error::Shape(format!("history has shape {:?}", t.shape())));
                }
                (0..t.rows())
                    .map(|r| {
                        let mut row = [0.0; 11];
                        row.iter_mut().zip(t.row(r)).for_each(|(d, s)| *d = s.as_f64());
                        EpochRecord(row)
                    })
                    .collect()
            }
            None => Vec::new(),
        };
        let lr_schedule = bank
            .iter()
            .find(|(n, _)| n == "history.lr")
            .map(|(_, t)| t.data().iter().map(|v| v.as_f64()).collect())
            .unwrap_or_default();
        Ok(Checkpoint { corpus, model, best, best_epoch, history, lr_schedule })
    }

    /// Writes the checkpoint as an `MPSF` feature file. The learning-rate log
    /// is stored in single precision.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_bank(&self.to_bank()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bank(&decode_bank(&std::fs::read(path)?)?)
    }
}
