use std::fmt::{self, Write as _};

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{build_pair_mask, microscl_loss};
use crate::nn::{
    backward, classify, classify_backward, encode_features, forward, softmax_cross_entropy,
    AdamState, Group, Heads, ModelParams, Real,
};
use crate::streamline::{fit_norm_stats, Class, FeatureSample, NormStats};

use super::{evaluate, FloatMode, LossMode, Metrics, Model, PipelineError, Result, TrainConfig};

/// Samples per chunk when features are computed without gradients.
const INFERENCE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Encoder and projection head on the contrastive loss.
    Contrastive,
    /// Classifier on frozen encoder features.
    Classifier,
    /// Encoder and classifier together on cross-entropy (baseline).
    Joint,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Contrastive => "stage1",
            Stage::Classifier => "stage2",
            Stage::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean over batches; contrastive losses are per contributing anchor.
    pub train_loss: f64,
    /// Not evaluated during the contrastive stage.
    pub val: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// Epoch of the selected parameters within the classification stage; 0
    /// means the parameters before that stage's first update.
    pub best_epoch: usize,
    pub best_val: Option<Metrics>,
}

/// Tab-separated log with a header line. Missing validation metrics are `NaN`.
pub fn format_log(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\tstage\ttrain_loss\tval_acc\tval_f1\tval_prec\tval_rec\n");
    for r in log {
        let m = r.val.map_or([f64::NAN; 4], |m| [m.accuracy, m.f1, m.precision, m.recall]);
        writeln!(
            s,
            "{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            r.epoch, r.stage, r.train_loss, m[0], m[1], m[2], m[3]
        )
        .unwrap();
    }
    s
}

/// Network input `N x P x C`: normalized coordinates, plus the mean FA as a
/// constant fourth channel when `fa_input` is set.
pub fn input_tensor<T: Real>(samples: &[FeatureSample], norm: &NormStats, fa_input: bool) -> Array3<T> {
    let p = samples.first().map_or(0, |s| s.coords.len());
    let c = if fa_input { 4 } else { 3 };
    let mut x = Array3::<T>::zeros((samples.len(), p, c));
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.coords.len(), p, "samples must share a point count");
        for (j, q) in norm.apply(&s.coords).iter().enumerate() {
            for k in 0..3 {
                x[[i, j, k]] = T::of(q[k]);
            }
            if fa_input {
                x[[i, j, 3]] = T::of(s.mean_fa);
            }
        }
    }
    x
}

pub(crate) fn features_chunked<T: Real>(params: &ModelParams<T>, x: &Array3<T>) -> Result<Array2<T>> {
    let n = x.len_of(Axis(0));
    let mut out = Array2::<T>::zeros((n, params.architecture().feature_width()));
    for start in (0..n).step_by(INFERENCE_CHUNK) {
        let end = (start + INFERENCE_CHUNK).min(n);
        let g = encode_features(params, x.slice(s![start..end, .., ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&g);
    }
    Ok(out)
}

pub(crate) fn argmax_labels<T: Real>(logits: &Array2<T>) -> Vec<Class> {
    logits
        .rows()
        .into_iter()
        .map(|r| if r[1] > r[0] { Class::Target } else { Class::NonTarget })
        .collect()
}

/// Trains on fixed-length `samples` (already balanced) and selects the
/// parameters with the best validation F1.
///
/// With a contrastive loss mode, stage 1 fits encoder and projection head on
/// the contrastive loss and stage 2 fits the classifier on the frozen
/// encoder's features. The baseline mode trains encoder and classifier
/// jointly on cross-entropy for `epochs_stage2` epochs. Validation happens
/// before the first classification update and after every epoch; ties keep
/// the earlier parameters. An empty `val` selects the final parameters.
pub fn train(samples: &[FeatureSample], val: &[FeatureSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.float_mode {
        FloatMode::F64 => Trainer::<f64>::new(samples, val, cfg)?.run(),
        FloatMode::F32 => Trainer::<f32>::new(samples, val, cfg)?.run(),
    }
}

struct Trainer<'a, T> {
    cfg: &'a TrainConfig,
    samples: &'a [FeatureSample],
    val: &'a [FeatureSample],
    norm: NormStats,
    x: Array3<T>,
    xv: Array3<T>,
    params: ModelParams<T>,
    rng: ChaCha8Rng,
    log: Vec<EpochRecord>,
}

impl<'a, T: Real> Trainer<'a, T> {
    fn new(samples: &'a [FeatureSample], val: &'a [FeatureSample], cfg: &'a TrainConfig) -> Result<Self> {
        let has = |c: Class| samples.iter().any(|s| s.label == c);
        if !has(Class::Target) || !has(Class::NonTarget) {
            return Err(PipelineError::SingleClassTrainingData);
        }
        for s in samples.iter().chain(val) {
            if s.coords.len() != cfg.points {
                return Err(PipelineError::InvalidDataset(format!(
                    "sample with {} points, configuration expects {}",
                    s.coords.len(),
                    cfg.points
                )));
            }
        }
        let norm = fit_norm_stats(samples.iter().map(|s| &s.coords[..]))?.stats;
        let params = ModelParams::<f64>::init(&cfg.architecture(), cfg.seed).cast::<T>();
        Ok(Self {
            cfg,
            samples,
            val,
            norm,
            x: input_tensor(samples, &norm, cfg.fa_input),
            xv: input_tensor(val, &norm, cfg.fa_input),
            params,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e),
            log: Vec::new(),
        })
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let (best_epoch, best_val) = match self.cfg.loss_mode {
            LossMode::Baseline => self.joint()?,
            LossMode::LabelOnly | LossMode::Micro => {
                self.contrastive()?;
                self.classifier()?
            }
        };
        Ok(TrainOutcome {
            model: Model {
                config: self.cfg.clone(),
                norm: self.norm,
                params: self.params.cast(),
            },
            log: self.log,
            best_epoch,
            best_val,
        })
    }

    fn batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label.id()).collect()
    }

    fn check(&self, loss: T, stage: Stage, epoch: usize, batch: usize) -> Result<f64> {
        let v = loss.as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(PipelineError::NonFiniteLoss { stage, epoch, batch })
        }
    }

    fn contrastive(&mut self) -> Result<()> {
        let loss_cfg = self.cfg.loss().expect("contrastive mode");
        let mut adam = AdamState::new(&self.params, &[Group::Encoder, Group::Projection], self.cfg.adam());
        for epoch in 1..=self.cfg.epochs_stage1 {
            let mut losses = Vec::new();
            for (bi, idx) in self.batches().into_iter().enumerate() {
                if idx.len() < 2 {
                    continue;
                }
                let xb = self.x.select(Axis(0), &idx);
                let pass = forward(&self.params, xb.view(), Heads::PROJECTION)?;
                let fas: Vec<f64> = idx.iter().map(|&i| self.samples[i].mean_fa).collect();
                let mask = build_pair_mask(&self.labels(&idx), &fas, &loss_cfg)?;
                let out = microscl_loss(pass.z().unwrap(), &mask, loss_cfg.tau)?;
                self.check(out.loss, Stage::Contrastive, epoch, bi)?;
                let grads = backward(&self.params, &pass, Some(&out.grad), None);
                adam.step(&mut self.params, &grads)?;
                losses.push(out.normalized.as_f64());
            }
            self.push(epoch, Stage::Contrastive, &losses, None);
        }
        Ok(())
    }

    fn classifier(&mut self) -> Result<(usize, Option<Metrics>)> {
        if self.cfg.epochs_stage2 == 0 {
            return Ok((0, None));
        }
        let feats = features_chunked(&self.params, &self.x)?;
        let vfeats = features_chunked(&self.params, &self.xv)?;
        let truth: Vec<Class> = self.val.iter().map(|s| s.label).collect();
        let validate = |p: &ModelParams<T>| validate_features(p, &vfeats, &truth);
        let mut best = (0, validate(&self.params)?, self.params.classifier.clone());
        let mut adam = AdamState::new(&self.params, &[Group::Classifier], self.cfg.adam());
        for epoch in 1..=self.cfg.epochs_stage2 {
            let mut losses = Vec::new();
            for (bi, idx) in self.batches().into_iter().enumerate() {
                let fb = feats.select(Axis(0), &idx);
                let (logits, trace) = classify(&self.params, &fb)?;
                let ce = softmax_cross_entropy(&logits, &self.labels(&idx))?;
                self.check(ce.loss, Stage::Classifier, epoch, bi)?;
                let mut grads = self.params.zeros_like();
                classify_backward(&self.params, &trace, &ce.grad, &mut grads);
                adam.step(&mut self.params, &grads)?;
                losses.push(ce.loss.as_f64());
            }
            let val = validate(&self.params)?;
            self.push(epoch, Stage::Classifier, &losses, val);
            if improves(val, best.1) || val.is_none() {
                best = (epoch, val, self.params.classifier.clone());
            }
        }
        self.params.classifier = best.2;
        Ok((best.0, best.1))
    }

    fn joint(&mut self) -> Result<(usize, Option<Metrics>)> {
        if self.cfg.epochs_stage2 == 0 {
            return Ok((0, None));
        }
        let truth: Vec<Class> = self.val.iter().map(|s| s.label).collect();
        let xv = std::mem::take(&mut self.xv);
        let validate = |p: &ModelParams<T>| validate_features(p, &features_chunked(p, &xv)?, &truth);
        let mut best = (0, validate(&self.params)?, self.params.clone());
        let mut adam = AdamState::new(&self.params, &[Group::Encoder, Group::Classifier], self.cfg.adam());
        for epoch in 1..=self.cfg.epochs_stage2 {
            let mut losses = Vec::new();
            for (bi, idx) in self.batches().into_iter().enumerate() {
                let xb = self.x.select(Axis(0), &idx);
                let pass = forward(&self.params, xb.view(), Heads::CLASSIFIER)?;
                let ce = softmax_cross_entropy(pass.logits().unwrap(), &self.labels(&idx))?;
                self.check(ce.loss, Stage::Joint, epoch, bi)?;
                let grads = backward(&self.params, &pass, None, Some(&ce.grad));
                adam.step(&mut self.params, &grads)?;
                losses.push(ce.loss.as_f64());
            }
            let val = validate(&self.params)?;
            self.push(epoch, Stage::Joint, &losses, val);
            if improves(val, best.1) || val.is_none() {
                best = (epoch, val, self.params.clone());
            }
        }
        self.params = best.2;
        Ok((best.0, best.1))
    }

    fn push(&mut self, epoch: usize, stage: Stage, losses: &[f64], val: Option<Metrics>) {
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        log::info!(
            "{stage} epoch {epoch}: loss {train_loss:.6}{}",
            val.map_or(String::new(), |m| format!(" val {m}"))
        );
        self.log.push(EpochRecord {
            epoch,
            stage,
            train_loss,
            val,
        });
    }
}

fn validate_features<T: Real>(
    params: &ModelParams<T>,
    feats: &Array2<T>,
    truth: &[Class],
) -> Result<Option<Metrics>> {
    if truth.is_empty() {
        return Ok(None);
    }
    let (logits, _) = classify(params, feats)?;
    Ok(Some(evaluate(&argmax_labels(&logits), truth)?))
}

fn improves(candidate: Option<Metrics>, best: Option<Metrics>) -> bool {
    match (candidate, best) {
        (Some(c), Some(b)) => c.f1 > b.f1,
        _ => false,
    }
}
