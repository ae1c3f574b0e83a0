//! Supervised contrastive loss with microstructure-constrained positives.
//!
//! For an anchor `i` in a batch, the candidate set `A(i)` is every other
//! sample. The positive set `P(i)` holds the candidates that share `i`'s
//! label and, in [`PairMode::Micro`], whose mean FA differs from `i`'s by
//! strictly less than `t_fa`. The loss is
//!
//! ```text
//! L = sum_i  -1/|P(i)| * sum_{p in P(i)} log( exp(z_i.z_p / tau) / sum_{a in A(i)} exp(z_i.z_a / tau) )
//! ```
//!
//! summed over anchors with a non-empty `P(i)`; anchors without positives
//! contribute nothing. Embeddings are unit vectors, so `z_i.z_p` is a
//! cosine similarity.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use thiserror::Error;

use crate::nn::Real;

#[derive(Debug, Error, PartialEq)]
pub enum ContrastiveError {
    #[error("batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("{labels} labels but {fas} FA values")]
    LengthMismatch { labels: usize, fas: usize },
    #[error("mean FA at row {0} is not finite")]
    NonFiniteFa(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("embedding row {row} has norm {norm}, expected 1")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("mask is {mask}x{mask} but batch has {batch} rows")]
    MaskMismatch { mask: usize, batch: usize },
}

pub type Result<T> = std::result::Result<T, ContrastiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairMode {
    /// Positives share the label only.
    LabelOnly,
    /// Positives share the label and have `|FA_i - FA_p| < t_fa`.
    #[default]
    Micro,
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::LabelOnly => "label_only",
            PairMode::Micro => "micro",
        })
    }
}

impl FromStr for PairMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "label_only" => Ok(PairMode::LabelOnly),
            "micro" => Ok(PairMode::Micro),
            _ => Err(format!("unknown pair mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub t_fa: f64,
    pub mode: PairMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            t_fa: 0.1,
            mode: PairMode::Micro,
        }
    }
}

/// Row-major `B x B` boolean matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMask {
    size: usize,
    positive: Vec<bool>,
    candidate: Vec<bool>,
}

impl PairMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_positive(&self, anchor: usize, other: usize) -> bool {
        self.positive[anchor * self.size + other]
    }

    pub fn is_candidate(&self, anchor: usize, other: usize) -> bool {
        self.candidate[anchor * self.size + other]
    }

    pub fn positives(&self, anchor: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.size).filter(move |&p| self.is_positive(anchor, p))
    }

    pub fn positive_count(&self, anchor: usize) -> usize {
        self.positives(anchor).count()
    }
}

pub fn build_pair_mask(labels: &[usize], mean_fas: &[f64], cfg: &LossConfig) -> Result<PairMask> {
    let b = labels.len();
    if b < 2 {
        return Err(ContrastiveError::BatchTooSmall(b));
    }
    if mean_fas.len() != b {
        return Err(ContrastiveError::LengthMismatch {
            labels: b,
            fas: mean_fas.len(),
        });
    }
    if let Some(i) = mean_fas.iter().position(|f| !f.is_finite()) {
        return Err(ContrastiveError::NonFiniteFa(i));
    }
    let mut positive = vec![false; b * b];
    let mut candidate = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            candidate[i * b + j] = true;
            positive[i * b + j] = labels[i] == labels[j]
                && match cfg.mode {
                    PairMode::LabelOnly => true,
                    PairMode::Micro => (mean_fas[i] - mean_fas[j]).abs() < cfg.t_fa,
                };
        }
    }
    Ok(PairMask {
        size: b,
        positive,
        candidate,
    })
}

#[derive(Debug, Clone)]
pub struct ContrastiveLoss<T> {
    /// Sum over contributing anchors; this is what gets optimized.
    pub loss: T,
    /// `loss` divided by the number of contributing anchors, for logging.
    pub normalized: T,
    pub contributing_anchors: usize,
    /// No anchor had a positive: the loss and gradient are zero.
    pub degenerate: bool,
    /// Gradient with respect to the embeddings.
    pub grad: Array2<T>,
}

fn norm_tolerance<T: Real>() -> f64 {
    (100.0 * T::epsilon().as_f64()).max(1e-6)
}

/// Loss value and its gradient with respect to `z`. Rows of `z` must be unit
/// vectors; an exactly zero row (degenerate projection) is tolerated.
pub fn microscl_loss<T: Real>(z: &Array2<T>, mask: &PairMask, tau: f64) -> Result<ContrastiveLoss<T>> {
    if !(tau > 0.0) {
        return Err(ContrastiveError::BadTemperature(tau));
    }
    let b = z.nrows();
    if mask.size() != b {
        return Err(ContrastiveError::MaskMismatch {
            mask: mask.size(),
            batch: b,
        });
    }
    let tol = norm_tolerance::<T>();
    for (row, r) in z.rows().into_iter().enumerate() {
        let norm = r.dot(&r).sqrt().as_f64();
        if norm != 0.0 && (norm - 1.0).abs() > tol {
            return Err(ContrastiveError::NotUnitNorm { row, norm });
        }
    }

    let inv_tau = T::of(1.0 / tau);
    let sim = z.dot(&z.t());
    // coefficient of each logit z_i.z_a / tau in the loss
    let mut coef = Array2::<T>::zeros((b, b));
    let mut total = T::zero();
    let mut anchors = 0usize;
    let mut logits = vec![T::zero(); b];
    for i in 0..b {
        let n_pos = mask.positive_count(i);
        if n_pos == 0 {
            continue;
        }
        anchors += 1;
        let mut m = T::neg_infinity();
        for a in 0..b {
            logits[a] = sim[[i, a]] * inv_tau;
            if mask.is_candidate(i, a) && logits[a] > m {
                m = logits[a];
            }
        }
        let mut sum = T::zero();
        for a in 0..b {
            if mask.is_candidate(i, a) {
                sum += (logits[a] - m).exp();
            }
        }
        let lse = m + sum.ln();
        let inv_pos = T::one() / T::of(n_pos as f64);
        let mut anchor_sum = T::zero();
        for p in mask.positives(i) {
            anchor_sum += logits[p] - lse;
        }
        total -= anchor_sum * inv_pos;
        for a in 0..b {
            if mask.is_candidate(i, a) {
                let soft = (logits[a] - m).exp() / sum;
                let target = if mask.is_positive(i, a) { inv_pos } else { T::zero() };
                coef[[i, a]] = soft - target;
            }
        }
    }

    if anchors == 0 {
        log::warn!("contrastive batch of {b} has no positive pairs; loss is zero");
        return Ok(ContrastiveLoss {
            loss: T::zero(),
            normalized: T::zero(),
            contributing_anchors: 0,
            degenerate: true,
            grad: Array2::zeros(z.raw_dim()),
        });
    }

    // d(z_i.z_a)/dz_i = z_a and d(z_i.z_a)/dz_a = z_i
    let sym = &coef + &coef.t();
    let grad = sym.dot(z) * inv_tau;
    Ok(ContrastiveLoss {
        loss: total,
        normalized: total / T::of(anchors as f64),
        contributing_anchors: anchors,
        degenerate: false,
        grad,
    })
}
