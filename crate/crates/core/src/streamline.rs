//! Geometric and microstructural streamline features.

use thiserror::Error;

use crate::tract_io::{Streamline, Tractogram};

#[derive(Debug, Error, PartialEq)]
pub enum StreamlineError {
    #[error("streamline has {0} points, need at least 2")]
    TooFewPoints(usize),
    #[error("cannot resample to {0} points, need at least 2")]
    TooFewOutputPoints(usize),
    #[error("scalar channel {0:?} not present")]
    MissingChannel(String),
    #[error("no samples to fit normalization statistics")]
    EmptyInput,
}

pub type Result<T> = std::result::Result<T, StreamlineError>;

/// Class identifier. The target pathway is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    NonTarget = 0,
    Target = 1,
}

impl Class {
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(Class::NonTarget),
            1 => Some(Class::Target),
            _ => None,
        }
    }
}

/// Fixed-length network input with the microstructure value used for pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub coords: Vec<[f64; 3]>,
    pub mean_fa: f64,
    pub label: Class,
    pub source_index: usize,
}

pub fn arc_length(points: &[[f64; 3]]) -> Result<f64> {
    if points.len() < 2 {
        return Err(StreamlineError::TooFewPoints(points.len()));
    }
    Ok(points.windows(2).map(|w| distance(&w[0], &w[1])).sum())
}

/// Keeps streamlines with length >= `min_mm`, preserving order.
pub fn filter_by_length(t: &Tractogram, min_mm: f64) -> Tractogram {
    let kept = t
        .streamlines
        .iter()
        .filter(|s| passes_length(s, min_mm))
        .cloned()
        .collect();
    t.with_streamlines(kept)
}

/// Indices of streamlines that pass the length threshold.
pub fn length_filter_indices(t: &Tractogram, min_mm: f64) -> Vec<usize> {
    t.streamlines
        .iter()
        .enumerate()
        .filter(|(_, s)| passes_length(s, min_mm))
        .map(|(i, _)| i)
        .collect()
}

fn passes_length(s: &Streamline, min_mm: f64) -> bool {
    arc_length(&s.points).map_or(false, |l| l >= min_mm)
}

/// Mean of one scalar channel over all points of the streamline.
pub fn mean_fa(t: &Tractogram, s: &Streamline, channel: &str) -> Result<f64> {
    let index = t
        .channel_index(channel)
        .ok_or_else(|| StreamlineError::MissingChannel(channel.to_string()))?;
    if s.scalars.is_empty() {
        return Err(StreamlineError::MissingChannel(channel.to_string()));
    }
    Ok(s.channel(index).sum::<f64>() / s.scalars.len() as f64)
}

/// `count` points at equal arc-length spacing along the polyline, by linear
/// interpolation. The first and last output points are the original endpoints.
pub fn resample_uniform(points: &[[f64; 3]], count: usize) -> Result<Vec<[f64; 3]>> {
    if points.len() < 2 {
        return Err(StreamlineError::TooFewPoints(points.len()));
    }
    if count < 2 {
        return Err(StreamlineError::TooFewOutputPoints(count));
    }
    let mut cumulative = Vec::with_capacity(points.len());
    let mut total = 0.0;
    cumulative.push(0.0);
    for w in points.windows(2) {
        total += distance(&w[0], &w[1]);
        cumulative.push(total);
    }
    let last = points.len() - 1;
    let mut out = Vec::with_capacity(count);
    out.push(points[0]);
    let mut seg = 0usize;
    for k in 1..count - 1 {
        let target = total * k as f64 / (count - 1) as f64;
        while seg < last - 1 && cumulative[seg + 1] < target {
            seg += 1;
        }
        let span = cumulative[seg + 1] - cumulative[seg];
        let t = if span > 0.0 {
            ((target - cumulative[seg]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (&points[seg], &points[seg + 1]);
        out.push([
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]);
    }
    out.push(points[last]);
    Ok(out)
}

/// Dataset-level input conditioning: one centre and one isotropic scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub scale: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormFit {
    pub stats: NormStats,
    /// The data had zero spread and the scale was clamped to 1.
    pub degenerate: bool,
}

pub fn fit_norm_stats<'a, I>(samples: I) -> Result<NormFit>
where
    I: IntoIterator<Item = &'a [[f64; 3]]>,
    I::IntoIter: Clone,
{
    let samples = samples.into_iter();
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for p in samples.clone().flatten() {
        for c in 0..3 {
            sum[c] += p[c];
        }
        n += 1;
    }
    if n == 0 {
        return Err(StreamlineError::EmptyInput);
    }
    let mean = sum.map(|s| s / n as f64);
    let mut sq = 0.0;
    for p in samples.flatten() {
        for c in 0..3 {
            let d = p[c] - mean[c];
            sq += d * d;
        }
    }
    let std = (sq / (3 * n) as f64).sqrt();
    let degenerate = !(std > 0.0) || !std.is_finite();
    if degenerate {
        log::warn!("coordinate spread is zero; normalization scale clamped to 1");
    }
    Ok(NormFit {
        stats: NormStats {
            mean,
            scale: if degenerate { 1.0 } else { std },
        },
        degenerate,
    })
}

impl NormStats {
    pub fn apply(&self, coords: &[[f64; 3]]) -> Vec<[f64; 3]> {
        coords
            .iter()
            .map(|p| std::array::from_fn(|c| (p[c] - self.mean[c]) / self.scale))
            .collect()
    }

    pub fn invert(&self, coords: &[[f64; 3]]) -> Vec<[f64; 3]> {
        coords
            .iter()
            .map(|p| std::array::from_fn(|c| p[c] * self.scale + self.mean[c]))
            .collect()
    }
}

#[inline]
pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let dz = b[2] - a[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
