//! Class balancing by repeated ordered point subsampling.
//!
//! Every minority-class streamline is turned into several fixed-length
//! samples, each built from a different random subset of its tracked points.
//! Subsets are ordered and always keep both endpoints, so every sample spans
//! the full streamline.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::streamline::{resample_uniform, Class, FeatureSample, StreamlineError};
use crate::tract_io::Streamline;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("training data contains a single class; both classes are required")]
    SingleClassInput,
    #[error("augmentation factor must be at least 1")]
    ZeroFactor,
    #[error(transparent)]
    Streamline(#[from] StreamlineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentMode {
    /// One deterministic sample per streamline, no balancing.
    None,
    /// Minority streamlines are copied `factor` times.
    Repetition,
    /// Minority streamlines yield `factor` distinct random point subsets.
    #[default]
    Subsampling,
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentMode::None => "none",
            AugmentMode::Repetition => "repetition",
            AugmentMode::Subsampling => "subsampling",
        })
    }
}

impl FromStr for AugmentMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(AugmentMode::None),
            "repetition" => Ok(AugmentMode::Repetition),
            "subsampling" => Ok(AugmentMode::Subsampling),
            _ => Err(format!("unknown augmentation mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Fixed(usize),
    /// `ceil(majority / minority)`
    Auto,
}

impl Default for Factor {
    fn default() -> Self {
        Factor::Fixed(8)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Fixed(n) => write!(f, "{n}"),
            Factor::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for Factor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Factor::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Factor::Fixed(n)),
            _ => Err(format!("augmentation factor must be a positive integer or auto, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    pub factor: Factor,
    pub points: usize,
    pub seed: u64,
    /// Reverse each generated sample with probability 1/2.
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mode: AugmentMode::Subsampling,
            factor: Factor::default(),
            points: 60,
            seed: 0,
            flip: false,
        }
    }
}

/// A streamline with its class and its precomputed full-resolution mean FA.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStreamline {
    pub streamline: Streamline,
    pub label: Class,
    pub mean_fa: f64,
}

/// Picks `count` points of the streamline at sorted, distinct indices that
/// always include the first and last point. Streamlines shorter than `count`
/// are first densified to `2 * count` points by uniform arc-length
/// interpolation.
pub fn random_subsample<R: Rng + ?Sized>(
    points: &[[f64; 3]],
    count: usize,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>, StreamlineError> {
    if points.len() < 2 {
        return Err(StreamlineError::TooFewPoints(points.len()));
    }
    if count < 2 {
        return Err(StreamlineError::TooFewOutputPoints(count));
    }
    if points.len() < count {
        let dense = resample_uniform(points, 2 * count)?;
        return Ok(pick(&dense, &subset_indices(dense.len(), count, rng)));
    }
    Ok(pick(points, &subset_indices(points.len(), count, rng)))
}

/// Sorted indices into `0..n`: both ends plus `count - 2` distinct interior
/// indices drawn uniformly without replacement.
pub fn subset_indices<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(count >= 2 && n >= count);
    let mut idx: Vec<usize> = index::sample(rng, n - 2, count - 2)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    idx.sort_unstable();
    let mut out = Vec::with_capacity(count);
    out.push(0);
    out.extend(idx);
    out.push(n - 1);
    out
}

fn pick(points: &[[f64; 3]], indices: &[usize]) -> Vec<[f64; 3]> {
    indices.iter().map(|&i| points[i]).collect()
}

/// Per-streamline RNG derived from the run seed and the source index, so
/// results do not depend on iteration order or worker count.
pub fn child_rng(seed: u64, source_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(source_index as u64 ^ 0xA5A5_5A5A)))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Number of possible subsets, saturating at `cap`.
fn subset_count_at_least(n: usize, count: usize, cap: usize) -> usize {
    let (n, k) = (n.saturating_sub(2), count.saturating_sub(2));
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c >= cap as u128 {
            return cap;
        }
    }
    c as usize
}

/// Class counts (non-target, target) and the minority class. Ties make the
/// target class the minority.
fn minority(samples: &[LabeledStreamline]) -> Result<(Class, usize, usize), AugmentError> {
    let targets = samples.iter().filter(|s| s.label == Class::Target).count();
    let others = samples.len() - targets;
    if targets == 0 || others == 0 {
        return Err(AugmentError::SingleClassInput);
    }
    Ok(if targets <= others {
        (Class::Target, targets, others)
    } else {
        (Class::NonTarget, others, targets)
    })
}

impl AugmentConfig {
    /// Copies per minority streamline for this input.
    pub fn resolve_factor(&self, samples: &[LabeledStreamline]) -> Result<usize, AugmentError> {
        let (_, min, maj) = minority(samples)?;
        Ok(match self.factor {
            Factor::Fixed(0) => return Err(AugmentError::ZeroFactor),
            Factor::Fixed(n) => n,
            Factor::Auto => maj.div_ceil(min),
        })
    }
}

/// Turns labeled streamlines into fixed-length training samples, oversampling
/// the minority class according to `cfg.mode`. Output order follows the input
/// order, with all samples of one source streamline adjacent.
pub fn balance_dataset(
    samples: &[LabeledStreamline],
    cfg: &AugmentConfig,
) -> Result<Vec<FeatureSample>, AugmentError> {
    let (minority_class, _, _) = minority(samples)?;
    let factor = cfg.resolve_factor(samples)?;
    if cfg.points < 2 {
        return Err(StreamlineError::TooFewOutputPoints(cfg.points).into());
    }

    let per_source: Vec<Result<Vec<FeatureSample>, AugmentError>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = child_rng(cfg.seed, i);
            let copies = if cfg.mode != AugmentMode::None && s.label == minority_class {
                factor
            } else {
                1
            };
            let pts = &s.streamline.points;
            let coords: Vec<Vec<[f64; 3]>> = match cfg.mode {
                AugmentMode::Subsampling => distinct_subsets(pts, cfg.points, copies, &mut rng)?,
                AugmentMode::None | AugmentMode::Repetition => {
                    vec![resample_uniform(pts, cfg.points)?; copies]
                }
            };
            Ok(coords
                .into_iter()
                .map(|mut c| {
                    if cfg.flip && rng.random::<bool>() {
                        c.reverse();
                    }
                    FeatureSample {
                        coords: c,
                        mean_fa: s.mean_fa,
                        label: s.label,
                        source_index: i,
                    }
                })
                .collect())
        })
        .collect();

    let mut out = Vec::new();
    for group in per_source {
        out.extend(group?);
    }
    Ok(out)
}

/// `copies` random subsets, pairwise distinct whenever the streamline admits
/// that many subsets.
fn distinct_subsets(
    points: &[[f64; 3]],
    count: usize,
    copies: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<[f64; 3]>>, StreamlineError> {
    if points.len() < 2 {
        return Err(StreamlineError::TooFewPoints(points.len()));
    }
    let dense;
    let source = if points.len() < count {
        dense = resample_uniform(points, 2 * count)?;
        &dense[..]
    } else {
        points
    };
    let available = subset_count_at_least(source.len(), count, copies);
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(copies);
    let mut out = Vec::with_capacity(copies);
    while out.len() < copies {
        let idx = subset_indices(source.len(), count, rng);
        if seen.len() < available && !seen.insert(idx.clone()) {
            continue;
        }
        out.push(pick(source, &idx));
    }
    Ok(out)
}
