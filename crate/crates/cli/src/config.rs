//! Run configuration: preset, then config file, then command-line flags.

use std::path::Path;

use mpsclip::backbone::CorpusConfig;
use mpsclip::trainer::TrainConfig;
use mpsclip::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "MPS_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small, fast settings for the synthetic corpus.
    #[default]
    Desk,
    /// Published hyperparameters (lr 4e-5, batch 64, 35 epochs).
    Paper,
}

impl Preset {
    fn train(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::default(),
        }
    }
}

/// Contents of a `--config` file. Sections are partial and merge over the
/// preset; unknown keys anywhere are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<Preset>,
    seed: Option<u64>,
    corpus: Option<Value>,
    train: Option<Value>,
}

/// Fully resolved settings. Serialized as `config.json` next to every run's
/// outputs; feeding that file back through `--config` reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (k, v) in patch {
                match base.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        base.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, patch: Option<Value>, section: &str) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    if let Some(patch) = patch {
        if !patch.is_object() {
            return Err(Error::Config(format!("section {section:?} must be a JSON object")));
        }
        merge(&mut value, patch);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{section}: {e}")))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    /// Resolves settings. Precedence, lowest first: `preset` (or the file's
    /// `preset`), the config file, then `apply` (the command-line flags). The
    /// seed comes from `--seed`, else the file, else `MPS_SEED`, else 0, and
    /// is used for both the corpus and training.
    pub fn resolve(
        path: Option<&Path>,
        preset: Option<Preset>,
        seed_flag: Option<u64>,
        apply: impl FnOnce(&mut CorpusConfig, &mut TrainConfig),
    ) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<FileConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        let preset = preset.or(file.preset).unwrap_or_default();
        let mut corpus = overlay(&CorpusConfig::default(), file.corpus, "corpus")?;
        let mut train = overlay(&preset.train(), file.train, "train")?;
        let seed = match seed_flag.or(file.seed) {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        };
        corpus.seed = seed;
        train.seed = seed;
        apply(&mut corpus, &mut train);
        corpus.validate()?;
        train.validate()?;
        Ok(RunConfig { seed, corpus, train })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn file_merges_over_preset_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"seed": 4, "train": {"epochs": 3, "flags": {"gate": false}}, "corpus": {"n_images": 40}}"#);
        let cfg = RunConfig::resolve(Some(&p), None, None, |_, t| t.lr = 0.5).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.corpus.seed), (4, 4, 4));
        assert_eq!((cfg.train.epochs, cfg.train.batch_size, cfg.train.lr), (3, 16, 0.5));
        assert!(!cfg.train.flags.gate && cfg.train.flags.attn);
        assert_eq!(cfg.corpus.n_images, 40);
        let flagged = RunConfig::resolve(Some(&p), Some(Preset::Paper), Some(9), |_, _| {}).unwrap();
        assert_eq!((flagged.seed, flagged.train.batch_size), (9, 64));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        for text in [r#"{"sed": 1}"#, r#"{"train": {"learning_rate": 1}}"#, r#"{"train": {"flags": {"atn": true}}}"#, r#"{"corpus": 3}"#] {
            let p = write(dir.path(), text);
            let err = RunConfig::resolve(Some(&p), None, None, |_, _| {}).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn resolved_config_round_trips_as_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::resolve(None, None, Some(3), |c, _| c.n_images = 30).unwrap();
        let p = write(dir.path(), &cfg.to_json().unwrap());
        assert_eq!(RunConfig::resolve(Some(&p), None, None, |_, _| {}).unwrap(), cfg);
    }
}
