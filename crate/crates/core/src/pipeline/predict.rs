use ndarray::Array2;
use rayon::prelude::*;

use crate::nn::{classify, ModelParams, Real};
use crate::streamline::{arc_length, mean_fa, resample_uniform, Class, FeatureSample};
use crate::tract_io::Tractogram;

use super::train::{features_chunked, input_tensor};
use super::{FloatMode, Model, PipelineError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Positions in the input tractogram of the streamlines that passed the
    /// length filter; the other fields follow this order.
    pub indices: Vec<usize>,
    pub labels: Vec<Class>,
    /// Softmax probabilities `[non-target, target]`.
    pub scores: Vec<[f64; 2]>,
}

/// Classifies every streamline that passes the model's length filter.
pub fn predict(model: &Model, t: &Tractogram) -> Result<Prediction> {
    let cfg = &model.config;
    let indices: Vec<usize> = (0..t.len())
        .filter(|&i| arc_length(&t.streamlines[i].points).is_ok_and(|l| l >= cfg.min_length_mm))
        .collect();
    if indices.is_empty() {
        return Err(PipelineError::EmptyTractogram);
    }
    let samples = indices
        .par_iter()
        .map(|&i| {
            let s = &t.streamlines[i];
            let fa = if cfg.fa_input {
                mean_fa(t, s, &cfg.fa_channel)?
            } else {
                0.0
            };
            Ok(FeatureSample {
                coords: resample_uniform(&s.points, cfg.points)?,
                mean_fa: fa,
                label: Class::NonTarget,
                source_index: i,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = match cfg.float_mode {
        FloatMode::F64 => class_scores(&model.params, model, &samples)?,
        FloatMode::F32 => class_scores(&model.params.cast::<f32>(), model, &samples)?,
    };
    let labels = scores
        .iter()
        .map(|p| if p[1] > p[0] { Class::Target } else { Class::NonTarget })
        .collect();
    Ok(Prediction {
        indices,
        labels,
        scores,
    })
}

fn class_scores<T: Real>(params: &ModelParams<T>, model: &Model, samples: &[FeatureSample]) -> Result<Vec<[f64; 2]>> {
    let x = input_tensor::<T>(samples, &model.norm, model.config.fa_input);
    let feats = features_chunked(params, &x)?;
    let (logits, _) = classify(params, &feats)?;
    Ok(softmax_rows(&logits))
}

fn softmax_rows<T: Real>(logits: &Array2<T>) -> Vec<[f64; 2]> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let (a, b) = (r[0].as_f64(), r[1].as_f64());
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            [ea / (ea + eb), eb / (ea + eb)]
        })
        .collect()
}
