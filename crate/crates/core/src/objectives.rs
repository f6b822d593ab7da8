//! Contrastive and ranking objectives over global and multi-perspective
//! similarities.
//!
//! All features are expected to be L2-normalized, so every similarity is a
//! cosine. `S[i][j]` always pairs image `i` with text `j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::scalar::Scalar;

/// How a triplet violation is weighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TripletWeighting {
    /// `w = σ(kappa · (s_neg − s_pos))`.
    Sigmoid { kappa: f64 },
    /// `w = 1`.
    Uniform,
}

impl Default for TripletWeighting {
    fn default() -> Self {
        TripletWeighting::Sigmoid { kappa: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Logit scale, the reciprocal of the temperature.
    pub tau_inv: f64,
    pub margin: f64,
    pub lambda_mpc: f64,
    pub lambda_mpt: f64,
    pub weighting: TripletWeighting,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_inv: 1.0 / DEFAULT_TEMPERATURE,
            margin: 0.2,
            lambda_mpc: 0.5,
            lambda_mpt: 0.5,
            weighting: TripletWeighting::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_inv > 0.0) {
            return Err(Error::Config(format!("logit scale must be positive, got {}", self.tau_inv)));
        }
        if !(self.margin >= 0.0) || !(self.lambda_mpc >= 0.0) || !(self.lambda_mpt >= 0.0) {
            return Err(Error::Config("margin and loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Features of one batch. Row `i` of each array refers to the same pair.
pub struct BatchFeatures<T> {
    /// `B × D` global image features.
    pub g_v: Var<T>,
    /// `B × D` global text features.
    pub g_t: Var<T>,
    /// `B·K × D` perspective features, sample-major.
    pub g_m: Option<Var<T>>,
    pub k: usize,
}

pub struct LossBreakdown<T> {
    pub total: Var<T>,
    pub base: Var<T>,
    pub mpc: Option<Var<T>>,
    pub mpt: Option<Var<T>>,
}

impl<T: Scalar> LossBreakdown<T> {
    /// `(total, base, mpc, mpt)` with absent terms reported as 0.
    pub fn values(&self) -> Result<[T; 4]> {
        let opt = |v: &Option<Var<T>>| v.as_ref().map_or(Ok(T::zero()), Var::item);
        Ok([self.total.item()?, self.base.item()?, opt(&self.mpc)?, opt(&self.mpt)?])
    }
}

/// `S[i][j] = ⟨a_i, c_j⟩`.
pub fn similarity_matrix<T: Scalar>(a: &Var<T>, c: &Var<T>) -> Result<Var<T>> {
    let (sa, sc) = (a.shape(), c.shape());
    if sa.len() != 2 || sc.len() != 2 || sa[1] != sc[1] {
        return Err(Error::dim("similarity_matrix", &sa, &sc));
    }
    a.matmul(&c.transpose()?)
}

/// `S_max[i][j] = max_k ⟨v_k^i, t_j⟩` for `g_m` of shape `B·K × D`.
pub fn s_max_matrix<T: Scalar>(g_m: &Var<T>, g_t: &Var<T>, k: usize) -> Result<Var<T>> {
    similarity_matrix(g_m, g_t)?.segment_max(k)
}

/// Symmetric cross-entropy over rows (image→text) and columns (text→image)
/// of `tau_inv · S`.
pub fn info_nce<T: Scalar>(s: &Var<T>, tau_inv: f64) -> Result<Var<T>> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!("contrastive loss needs a square matrix, got {shape:?}")));
    }
    let b = shape[0];
    let logits = s.scale(T::lit(tau_inv));
    let rows = logits.log_softmax_rows()?.diag()?.sum();
    let cols = logits.transpose()?.log_softmax_rows()?.diag()?.sum();
    Ok(rows.add(&cols)?.scale(-T::one() / T::from_usize_lossy(2 * b)))
}

/// Contrastive loss on the max-over-perspectives similarity.
pub fn mpc_loss<T: Scalar>(s_max: &Var<T>, tau_inv: f64) -> Result<Var<T>> {
    info_nce(s_max, tau_inv)
}

/// Hardest-negative hinge in both directions, each averaged over the batch:
/// `mean_i w·[m + S(i,j*) − S(i,i)]₊ + mean_i w·[m + S(j*,i) − S(i,i)]₊`.
/// Ties in the hardest negative go to the lowest index.
pub fn weighted_triplet<T: Scalar>(s: &Var<T>, margin: f64, weighting: TripletWeighting) -> Result<Var<T>> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!("triplet loss needs a square matrix, got {shape:?}")));
    }
    if shape[0] == 1 {
        return Ok(s.tape().scalar(T::zero()));
    }
    let pos = s.diag()?;
    let direction = |neg: Var<T>| -> Result<Var<T>> {
        let gap = neg.sub(&pos)?;
        let hinge = gap.add_scalar(T::lit(margin)).relu();
        let weighted = match weighting {
            TripletWeighting::Sigmoid { kappa } => hinge.mul(&gap.scale(T::lit(kappa)).sigmoid())?,
            TripletWeighting::Uniform => hinge,
        };
        Ok(weighted.mean())
    };
    let image_anchor = direction(s.hardest_negative()?)?;
    let text_anchor = direction(s.transpose()?.hardest_negative()?)?;
    image_anchor.add(&text_anchor)
}

/// Weighted triplet loss on the max-over-perspectives similarity.
pub fn mpt_loss<T: Scalar>(s_max: &Var<T>, margin: f64, weighting: TripletWeighting) -> Result<Var<T>> {
    weighted_triplet(s_max, margin, weighting)
}

/// `L = L_base + λ_mpc·L_mpc + λ_mpt·L_mpt`, where
/// `L_base = info_nce(S) + weighted_triplet(S)` on the global pair.
///
/// A term with zero weight is left out of the sum entirely, so `λ = 0` gives
/// exactly `L_base`. The multi-perspective terms are still reported when
/// perspective features are present.
pub fn total_loss<T: Scalar>(batch: &BatchFeatures<T>, cfg: &LossConfig) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    let s = similarity_matrix(&batch.g_v, &batch.g_t)?;
    let base = info_nce(&s, cfg.tau_inv)?.add(&weighted_triplet(&s, cfg.margin, cfg.weighting)?)?;

    let (mpc, mpt) = match &batch.g_m {
        Some(g_m) => {
            let s_max = s_max_matrix(g_m, &batch.g_t, batch.k)?;
            (
                Some(mpc_loss(&s_max, cfg.tau_inv)?),
                Some(mpt_loss(&s_max, cfg.margin, cfg.weighting)?),
            )
        }
        None if cfg.lambda_mpc > 0.0 || cfg.lambda_mpt > 0.0 => {
            return Err(Error::Config(
                "multi-perspective loss weighted but no perspective features given".into(),
            ))
        }
        None => (None, None),
    };

    let mut total = base.clone();
    for (term, lambda) in [(&mpc, cfg.lambda_mpc), (&mpt, cfg.lambda_mpt)] {
        if let (Some(term), true) = (term, lambda > 0.0) {
            total = total.add(&term.scale(T::lit(lambda)))?;
        }
    }
    Ok(LossBreakdown { total, base, mpc, mpt })
}
