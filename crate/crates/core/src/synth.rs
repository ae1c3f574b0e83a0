//! Labeled synthetic tractograms.
//!
//! Target streamlines scatter around a curved cubic Bézier centerline about
//! 98 mm long. Non-target streamlines follow a second centerline that is
//! blended toward the first by `geometry_overlap`: at 0 the two bundles are
//! well apart, at 1 they share one centerline and differ only in FA.
//!
//! Each streamline gets a constant offset drawn from an isotropic normal
//! distribution (`scatter_mm`) plus a smooth sinusoidal wiggle
//! (`wiggle_mm`). Per-point FA is the class mean plus a smooth profile,
//!
//! ```text
//! FA(t) = mean + sd * (xi0 / sqrt(2) + xi1 * sin(2 pi t + phi))
//! ```
//!
//! with `xi0, xi1` standard normal and `phi` uniform per streamline, clamped
//! to `[0, 1]`. The profile's variance averaged along the streamline is
//! `sd^2`.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::augment::child_rng;
use crate::kv;
use crate::pipeline::Subject;
use crate::streamline::Class;
use crate::tract_io::{Streamline, Tractogram};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("synth config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid synth config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Inclusive range of points per streamline.
    pub points_min: usize,
    pub points_max: usize,
    pub fa_mean_target: f64,
    pub fa_mean_nontarget: f64,
    pub fa_noise_sd: f64,
    /// 0 gives disjoint bundles, 1 identical centerlines.
    pub geometry_overlap: f64,
    pub scatter_mm: f64,
    pub wiggle_mm: f64,
    /// Streamlines are dealt round-robin to this many subjects.
    pub subjects: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_target: 100,
            n_nontarget: 800,
            points_min: 80,
            points_max: 120,
            fa_mean_target: 0.30,
            fa_mean_nontarget: 0.55,
            fa_noise_sd: 0.05,
            geometry_overlap: 1.0,
            scatter_mm: 2.0,
            wiggle_mm: 0.5,
            subjects: 1,
            seed: 0,
        }
    }
}

const TARGET_CURVE: [[f64; 3]; 4] = [
    [-45.0, 0.0, 0.0],
    [-15.0, 22.0, 0.0],
    [15.0, 22.0, 0.0],
    [45.0, 0.0, 0.0],
];

const OTHER_CURVE: [[f64; 3]; 4] = [
    [-44.0, -18.0, 12.0],
    [-12.0, -8.0, 22.0],
    [18.0, -30.0, 10.0],
    [44.0, -14.0, 16.0],
];

pub const FA_CHANNEL: &str = "FA";

fn bezier(c: &[[f64; 3]; 4], t: f64) -> [f64; 3] {
    let u = 1.0 - t;
    let w = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
    std::array::from_fn(|k| (0..4).map(|i| w[i] * c[i][k]).sum())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_target == 0 || self.n_nontarget == 0 {
            return bad("both classes need at least one streamline".into());
        }
        if self.points_min < 2 || self.points_max < self.points_min {
            return bad(format!(
                "points range {}..={} is invalid",
                self.points_min, self.points_max
            ));
        }
        for (name, m) in [
            ("fa_mean_target", self.fa_mean_target),
            ("fa_mean_nontarget", self.fa_mean_nontarget),
        ] {
            if !(m > 0.0 && m < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {m}"));
            }
        }
        if !(self.geometry_overlap >= 0.0 && self.geometry_overlap <= 1.0) {
            return bad(format!("geometry_overlap must lie in [0, 1], got {}", self.geometry_overlap));
        }
        for (name, v) in [
            ("fa_noise_sd", self.fa_noise_sd),
            ("scatter_mm", self.scatter_mm),
            ("wiggle_mm", self.wiggle_mm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.subjects == 0 {
            return bad("subjects must be at least 1".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines named after the fields. Unknown and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut cfg = Self::default();
        let pairs = kv::pairs(text).map_err(|(line, message)| SynthError::Config { line, message })?;
        for (line, key, v) in pairs {
            let r = match key {
                "n_target" => kv::number(v).map(|x| cfg.n_target = x),
                "n_nontarget" => kv::number(v).map(|x| cfg.n_nontarget = x),
                "points_min" => kv::number(v).map(|x| cfg.points_min = x),
                "points_max" => kv::number(v).map(|x| cfg.points_max = x),
                "fa_mean_target" => kv::number(v).map(|x| cfg.fa_mean_target = x),
                "fa_mean_nontarget" => kv::number(v).map(|x| cfg.fa_mean_nontarget = x),
                "fa_noise_sd" => kv::number(v).map(|x| cfg.fa_noise_sd = x),
                "geometry_overlap" => kv::number(v).map(|x| cfg.geometry_overlap = x),
                "scatter_mm" => kv::number(v).map(|x| cfg.scatter_mm = x),
                "wiggle_mm" => kv::number(v).map(|x| cfg.wiggle_mm = x),
                "subjects" => kv::number(v).map(|x| cfg.subjects = x),
                "seed" => kv::number(v).map(|x| cfg.seed = x),
                _ => Err(format!("unknown key {key:?}")),
            };
            r.map_err(|message| SynthError::Config { line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn centerline(&self, label: Class, t: f64) -> [f64; 3] {
        let a = bezier(&TARGET_CURVE, t);
        if label == Class::Target {
            return a;
        }
        let b = bezier(&OTHER_CURVE, t);
        let w = self.geometry_overlap;
        std::array::from_fn(|k| w * a[k] + (1.0 - w) * b[k])
    }

    fn streamline(&self, index: usize, label: Class) -> Streamline {
        let mut rng = child_rng(self.seed, index);
        let n = rng.random_range(self.points_min..=self.points_max);
        let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let offset: [f64; 3] = std::array::from_fn(|_| self.scatter_mm * normal(&mut rng));
        let wiggle_dir: [f64; 3] = std::array::from_fn(|_| normal(&mut rng));
        let norm = wiggle_dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let wiggle_phase = rng.random_range(0.0..TAU);
        let wiggle_cycles = rng.random_range(1.0..3.0);
        let mean = match label {
            Class::Target => self.fa_mean_target,
            Class::NonTarget => self.fa_mean_nontarget,
        };
        let (xi0, xi1) = (normal(&mut rng), normal(&mut rng));
        let fa_phase = rng.random_range(0.0..TAU);

        let mut points = Vec::with_capacity(n);
        let mut fa = Vec::with_capacity(n);
        for j in 0..n {
            let t = j as f64 / (n - 1) as f64;
            let c = self.centerline(label, t);
            let w = self.wiggle_mm * (TAU * wiggle_cycles * t + wiggle_phase).sin() / norm;
            points.push(std::array::from_fn(|k| c[k] + offset[k] + w * wiggle_dir[k]));
            let v = mean + self.fa_noise_sd * (xi0 * FRAC_1_SQRT_2 + xi1 * (TAU * t + fa_phase).sin());
            fa.push(vec![v.clamp(0.0, 1.0)]);
        }
        Streamline::with_scalars(points, fa)
    }

    /// All streamlines in one tractogram: the targets first, then the
    /// non-targets, with one label per streamline.
    pub fn generate(&self) -> Result<(Tractogram, Vec<Class>), SynthError> {
        self.validate()?;
        let labels: Vec<Class> = std::iter::repeat_n(Class::Target, self.n_target)
            .chain(std::iter::repeat_n(Class::NonTarget, self.n_nontarget))
            .collect();
        let streamlines: Vec<Streamline> = labels
            .par_iter()
            .enumerate()
            .map(|(i, &l)| self.streamline(i, l))
            .collect();
        let mut t = Tractogram::new(vec![FA_CHANNEL.to_string()]);
        t.voxel_size = [1.0; 3];
        t.dim = [128; 3];
        t.streamlines = streamlines;
        Ok((t, labels))
    }

    /// The generated streamlines dealt round-robin to `subjects` subjects
    /// named `sub01`, `sub02`, ...
    pub fn generate_subjects(&self) -> Result<Vec<Subject>, SynthError> {
        let (t, labels) = self.generate()?;
        let k = self.subjects;
        let width = k.to_string().len().max(2);
        Ok((0..k)
            .map(|s| {
                let idx: Vec<usize> = (s..t.len()).step_by(k).collect();
                Subject {
                    name: format!("sub{:0width$}", s + 1),
                    tractogram: t.with_streamlines(idx.iter().map(|&i| t.streamlines[i].clone()).collect()),
                    labels: idx.iter().map(|&i| labels[i]).collect(),
                }
            })
            .collect())
    }
}
