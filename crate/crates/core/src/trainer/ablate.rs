use std::io::Write;
use std::str::FromStr;
use std::thread;

use super::config::{Ablation, TrainConfig};
use super::train::train;
use crate::backbone::{Corpus, Split};
use crate::error::{Error, Result};
use crate::retrieval::RetrievalReport;

/// Named ablation grids, each a list of flag overrides on a base config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Attn × Gate inside the adapter.
    Adapter,
    /// Base / +MPC / +MPT / +MPC+MPT.
    Losses,
    /// Perspective heads off / on.
    Mpr,
    /// Mean pooling / class token.
    Cls,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(Grid::Adapter),
            "losses" => Ok(Grid::Losses),
            "mpr" => Ok(Grid::Mpr),
            "cls" => Ok(Grid::Cls),
            other => Err(Error::Argument(format!("unknown grid {other:?} (adapter, losses, mpr, cls)"))),
        }
    }
}

impl Grid {
    pub fn rows(self, base: Ablation) -> Vec<(String, Ablation)> {
        let row = |label: &str, flags: Ablation| (label.to_string(), flags);
        match self {
            Grid::Adapter => vec![
                row("-", Ablation { attn: false, gate: false, ..base }),
                row("Attn", Ablation { attn: true, gate: false, ..base }),
                row("Gate", Ablation { attn: false, gate: true, ..base }),
                row("Attn+Gate", Ablation { attn: true, gate: true, ..base }),
            ],
            Grid::Losses => vec![
                row("Base", Ablation { use_mpc: false, use_mpt: false, ..base }),
                row("Base+MPC", Ablation { use_mpc: true, use_mpt: false, ..base }),
                row("Base+MPT", Ablation { use_mpc: false, use_mpt: true, ..base }),
                row("Base+MPC+MPT", Ablation { use_mpc: true, use_mpt: true, ..base }),
            ],
            Grid::Mpr => vec![
                row("w/o MPR", Ablation { mpr: false, ..base }),
                row("MPR", Ablation { mpr: true, ..base }),
            ],
            Grid::Cls => vec![
                row("mean", Ablation { cls_pooling: false, ..base }),
                row("[CLS]", Ablation { cls_pooling: true, ..base }),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub flags: Ablation,
    /// Final-epoch parameters evaluated on the test split.
    pub report: RetrievalReport,
    /// Trainable scalars of one adapter site under these flags.
    pub adapter_params: usize,
}

fn run_row(corpus: &Corpus, base: &TrainConfig, label: &str, flags: Ablation) -> Result<AblationRow> {
    let cfg = base.with_flags(flags);
    let ckpt = train::<f64>(corpus, &cfg)?;
    let report = ckpt.model.evaluate(corpus, Split::Test)?;
    let adapter_params = ckpt.model.trainables.adapter_vision[0].count_params(flags.adapter_flags());
    Ok(AblationRow { label: label.to_string(), flags, report, adapter_params })
}

/// Trains one model per grid row from the same seed and data order. Rows run
/// on up to `jobs` threads; output order follows the grid.
pub fn ablate(corpus: &Corpus, base: &TrainConfig, grid: &[(String, Ablation)], jobs: usize) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Argument("empty ablation grid".into()));
    }
    let jobs = jobs.clamp(1, grid.len());
    let mut results: Vec<Option<Result<AblationRow>>> = (0..grid.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in grid.chunks(jobs).enumerate() {
        let outs: Vec<Result<AblationRow>> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(label, flags)| s.spawn(move || run_row(corpus, base, label, *flags)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("ablation worker panicked".into()))))
                .collect()
        });
        for (i, out) in outs.into_iter().enumerate() {
            results[chunk_idx * jobs + i] = Some(out);
        }
    }
    results.into_iter().map(|r| r.expect("every row ran")).collect()
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "×"
    }
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| Config | Attn | Gate | MPR | CLS | MPC | MPT | Text R@1 | R@5 | R@10 | Image R@1 | R@5 | R@10 | mR | Params |\n\
         |---|:-:|:-:|:-:|:-:|:-:|:-:|---:|---:|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let f = r.flags;
        let flags = [f.attn, f.gate, f.mpr, f.cls_pooling, f.use_mpc, f.use_mpt].map(mark).join(" | ");
        let recalls: Vec<String> = r.report.recalls().iter().map(|v| format!("{v:.2}")).collect();
        s.push_str(&format!(
            "| {} | {flags} | {} | {:.2} | {} |\n",
            r.label,
            recalls.join(" | "),
            r.report.mr,
            r.adapter_params
        ));
    }
    s
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "config", "attn", "gate", "mpr", "cls", "mpc", "mpt", "txt_r1", "txt_r5", "txt_r10", "img_r1", "img_r5", "img_r10",
        "mR", "params",
    ])?;
    for r in rows {
        let f = r.flags;
        let mut rec = vec![r.label.clone()];
        rec.extend([f.attn, f.gate, f.mpr, f.cls_pooling, f.use_mpc, f.use_mpt].map(|b| u8::from(b).to_string()));
        rec.extend(r.report.recalls().iter().chain([&r.report.mr]).map(|v| format!("{v:.2}")));
        rec.push(r.adapter_params.to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
