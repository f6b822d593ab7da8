//! Bidirectional Recall@K and mean recall under the
//! several-captions-per-image protocol.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const CUTOFFS: [usize; 3] = [1, 5, 10];

/// Recall at 1, 5 and 10, in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recalls {
    pub fn as_array(&self) -> [f64; 3] {
        [self.r1, self.r5, self.r10]
    }

    fn from_hits(hits: [usize; 3], queries: usize) -> Self {
        let pct = |h: usize| 100.0 * h as f64 / queries as f64;
        Recalls { r1: pct(hits[0]), r5: pct(hits[1]), r10: pct(hits[2]) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Image queries ranking captions.
    pub text_r: Recalls,
    /// Caption queries ranking images.
    pub image_r: Recalls,
    pub mr: f64,
    /// Image queries first, then caption queries; each list is the full
    /// ranking of candidate indices.
    #[serde(skip)]
    pub rankings: Vec<Vec<usize>>,
}

impl RetrievalReport {
    /// `[text R@1, R@5, R@10, image R@1, R@5, R@10]`.
    pub fn recalls(&self) -> [f64; 6] {
        let (t, i) = (self.text_r, self.image_r);
        [t.r1, t.r5, t.r10, i.r1, i.r5, i.r10]
    }

    /// A report carrying only recalls, with `mr` derived from them.
    pub fn from_recalls(r: [f64; 6]) -> Self {
        RetrievalReport {
            text_r: Recalls { r1: r[0], r5: r[1], r10: r[2] },
            image_r: Recalls { r1: r[3], r5: r[4], r10: r[5] },
            mr: mean_recall(&r),
            rankings: Vec::new(),
        }
    }
}

pub fn mean_recall(r: &[f64; 6]) -> f64 {
    r.iter().sum::<f64>() / 6.0
}

fn check_inputs<T: Scalar>(s: &Tensor<T>, captions_per_image: usize) -> Result<(usize, usize)> {
    if s.rank() != 2 {
        return Err(Error::Shape(format!("similarity must be a matrix, got {:?}", s.shape())));
    }
    let (n_img, n_txt) = (s.rows(), s.cols());
    if captions_per_image == 0 || n_txt != n_img * captions_per_image {
        return Err(Error::Argument(format!(
            "{n_txt} captions cannot be split into {captions_per_image} per image for {n_img} images"
        )));
    }
    if !s.is_finite() {
        return Err(Error::Numeric("similarity matrix contains non-finite values".into()));
    }
    Ok((n_img, n_txt))
}

/// Descending by score, then ascending by index.
fn ranked<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Zero-based position `target` would take in [`ranked`] order.
fn rank_of<T: Scalar>(scores: &[T], target: usize) -> usize {
    let v = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > v || (s == v && j < target))
        .count()
}

fn tally(best_ranks: impl Iterator<Item = usize>) -> ([usize; 3], usize) {
    let mut hits = [0; 3];
    let mut n = 0;
    for r in best_ranks {
        n += 1;
        for (h, &k) in hits.iter_mut().zip(&CUTOFFS) {
            if r < k {
                *h += 1;
            }
        }
    }
    (hits, n)
}

fn columns<T: Scalar>(s: &Tensor<T>) -> Vec<Vec<T>> {
    let t = s.transpose().expect("matrix");
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn assemble(text_hits: ([usize; 3], usize), image_hits: ([usize; 3], usize), rankings: Vec<Vec<usize>>) -> RetrievalReport {
    let text_r = Recalls::from_hits(text_hits.0, text_hits.1);
    let image_r = Recalls::from_hits(image_hits.0, image_hits.1);
    let mut report = RetrievalReport::from_recalls([0.0; 6]);
    report.text_r = text_r;
    report.image_r = image_r;
    report.mr = mean_recall(&report.recalls());
    report.rankings = rankings;
    report
}

/// Recall report for an `I × T` similarity matrix where captions
/// `[i·c, (i+1)·c)` belong to image `i`.
pub fn compute_report<T: Scalar>(s: &Tensor<T>, captions_per_image: usize) -> Result<RetrievalReport> {
    let (n_img, n_txt) = check_inputs(s, captions_per_image)?;
    let c = captions_per_image;
    let cols = columns(s);

    let text = tally((0..n_img).map(|i| {
        let row = s.row(i);
        (i * c..(i + 1) * c).map(|t| rank_of(row, t)).min().expect("at least one caption")
    }));
    let image = tally((0..n_txt).map(|t| rank_of(&cols[t], t / c)));

    let rankings = (0..n_img).map(|i| ranked(s.row(i))).chain(cols.iter().map(|c| ranked(c))).collect();
    Ok(assemble(text, image, rankings))
}

/// Same report as [`compute_report`], obtained by sorting every query's
/// candidate list and scanning each top-K prefix.
pub fn brute_force_oracle<T: Scalar>(s: &Tensor<T>, captions_per_image: usize) -> Result<RetrievalReport> {
    let (n_img, n_txt) = check_inputs(s, captions_per_image)?;
    let c = captions_per_image;
    let mut rankings = Vec::with_capacity(n_img + n_txt);
    let mut text_hits = [0; 3];
    for i in 0..n_img {
        let order = ranked(s.row(i));
        for (h, &k) in text_hits.iter_mut().zip(&CUTOFFS) {
            if order.iter().take(k).any(|&t| t / c == i) {
                *h += 1;
            }
        }
        rankings.push(order);
    }
    let mut image_hits = [0; 3];
    for (t, col) in columns(s).iter().enumerate() {
        let order = ranked(col);
        for (h, &k) in image_hits.iter_mut().zip(&CUTOFFS) {
            if order.iter().take(k).any(|&i| i == t / c) {
                *h += 1;
            }
        }
        rankings.push(order);
    }
    Ok(assemble((text_hits, n_img), (image_hits, n_txt), rankings))
}

/// Labelled reports rendered as CSV or a markdown table.
#[derive(Clone, Debug, Default)]
pub struct ReportTable {
    pub rows: Vec<(String, RetrievalReport)>,
}

const HEADER: [&str; 8] = ["config", "txt_r1", "txt_r5", "txt_r10", "img_r1", "img_r5", "img_r10", "mR"];

impl ReportTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: impl Into<String>, report: RetrievalReport) {
        self.rows.push((label.into(), report));
    }

    fn cells(report: &RetrievalReport) -> Vec<String> {
        report
            .recalls()
            .iter()
            .chain(std::iter::once(&report.mr))
            .map(|v| format!("{v:.2}"))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(HEADER)?;
        for (label, report) in &self.rows {
            let mut record = vec![label.clone()];
            record.extend(Self::cells(report));
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Config | Image→Text R@1 | R@5 | R@10 | Text→Image R@1 | R@5 | R@10 | mR |\n\
             |---|---:|---:|---:|---:|---:|---:|---:|\n",
        );
        for (label, report) in &self.rows {
            s.push_str(&format!("| {label} | {} |\n", Self::cells(report).join(" | ")));
        }
        s
    }
}
