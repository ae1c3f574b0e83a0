//! A small dense-network engine sized for point-cloud streamline encoders.
//!
//! The network has three parts that share one parameter container:
//!
//! * an encoder: pointwise linear + ReLU layers applied identically to every
//!   point, followed by a channel-wise max over the points of a streamline;
//! * a projection head producing unit-norm contrastive embeddings;
//! * a classifier head producing raw two-class logits.
//!
//! Gradients are computed by hand-written reverse passes. All arithmetic is
//! generic over [`Real`] so the same code runs in 64-bit (default, needed by
//! the finite-difference checks) or 32-bit floating point.

mod adam;
mod model;

pub use adam::{AdamConfig, AdamState};
pub use model::{
    backward, classify, classify_backward, encode, encode_backward, encode_features, forward,
    project, project_backward, softmax_cross_entropy, CrossEntropy, EncoderTrace, ForwardPass,
    HeadTrace, Heads, ProjectionTrace,
};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} at row {row} is not a valid class id")]
    BadLabel { row: usize, label: usize },
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Floating-point element type of the engine.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Layer widths of the three sub-networks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_channels: usize,
    pub encoder: Vec<usize>,
    pub projection: Vec<usize>,
    pub classifier: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_channels: 3,
            encoder: vec![64, 128, 256, 512, 1024],
            projection: vec![256, 128],
            classifier: vec![512, 256, 2],
        }
    }
}

impl Architecture {
    pub fn feature_width(&self) -> usize {
        *self.encoder.last().expect("encoder has layers")
    }

    pub fn embedding_width(&self) -> usize {
        *self.projection.last().expect("projection has layers")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::ShapeMismatch(m.to_string()));
        if self.input_channels == 0 {
            return bad("input channels must be positive");
        }
        if self.encoder.is_empty() || self.projection.is_empty() || self.classifier.is_empty() {
            return bad("every sub-network needs at least one layer");
        }
        let all = self.encoder.iter().chain(&self.projection).chain(&self.classifier);
        if all.clone().any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        if *self.classifier.last().unwrap() != 2 {
            return bad("classifier output width must be 2");
        }
        Ok(())
    }

    fn shapes(&self) -> [Vec<(usize, usize)>; 3] {
        let chain = |input: usize, widths: &[usize]| {
            let mut fan_in = input;
            widths
                .iter()
                .map(|&w| {
                    let s = (w, fan_in);
                    fan_in = w;
                    s
                })
                .collect::<Vec<_>>()
        };
        let f = self.feature_width();
        [
            chain(self.input_channels, &self.encoder),
            chain(f, &self.projection),
            chain(f, &self.classifier),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.shapes()
            .iter()
            .flatten()
            .map(|(o, i)| o * i + o)
            .sum()
    }
}

/// Fully connected layer; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(out: usize, fan_in: usize) -> Self {
        Self {
            weight: Array2::zeros((out, fan_in)),
            bias: Array1::zeros(out),
        }
    }

    pub fn out_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_width(&self) -> usize {
        self.weight.ncols()
    }

    fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.mapv(|v| U::of(v.as_f64())),
            bias: self.bias.mapv(|v| U::of(v.as_f64())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Projection,
    Classifier,
}

/// Parameters of the whole network. Gradients use the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Vec<Linear<T>>,
    pub projection: Vec<Linear<T>>,
    pub classifier: Vec<Linear<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        let [e, p, c] = arch.shapes();
        let make = |s: Vec<(usize, usize)>| s.into_iter().map(|(o, i)| Linear::zeros(o, i)).collect();
        Self {
            encoder: make(e),
            projection: make(p),
            classifier: make(c),
        }
    }

    /// Glorot-uniform weights in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`
    /// and zero biases. Deterministic per seed.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut params = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in params.layers_mut() {
            let a = (6.0 / (layer.in_width() + layer.out_width()) as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| T::of(rng.random_range(-a..=a)));
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ls: &[Linear<T>]| {
            ls.iter()
                .map(|l| Linear::zeros(l.out_width(), l.in_width()))
                .collect()
        };
        Self {
            encoder: z(&self.encoder),
            projection: z(&self.projection),
            classifier: z(&self.classifier),
        }
    }

    pub fn architecture(&self) -> Architecture {
        let widths = |ls: &[Linear<T>]| ls.iter().map(|l| l.out_width()).collect();
        Architecture {
            input_channels: self.encoder[0].in_width(),
            encoder: widths(&self.encoder),
            projection: widths(&self.projection),
            classifier: widths(&self.classifier),
        }
    }

    pub fn group(&self, g: Group) -> &[Linear<T>] {
        match g {
            Group::Encoder => &self.encoder,
            Group::Projection => &self.projection,
            Group::Classifier => &self.classifier,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut Vec<Linear<T>> {
        match g {
            Group::Encoder => &mut self.encoder,
            Group::Projection => &mut self.projection,
            Group::Classifier => &mut self.classifier,
        }
    }

    /// Layers in declaration order: encoder, projection, classifier.
    pub fn layers(&self) -> impl Iterator<Item = &Linear<T>> {
        self.encoder
            .iter()
            .chain(&self.projection)
            .chain(&self.classifier)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear<T>> {
        self.encoder
            .iter_mut()
            .chain(self.projection.iter_mut())
            .chain(self.classifier.iter_mut())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.iter().map(Linear::cast).collect(),
            projection: self.projection.iter().map(Linear::cast).collect(),
            classifier: self.classifier.iter().map(Linear::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

/// Glorot-uniform initialization in 64-bit.
pub fn init_params(arch: &Architecture, seed: u64) -> ModelParams<f64> {
    ModelParams::init(arch, seed)
}
