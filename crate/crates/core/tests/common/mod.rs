//! Test-only oracles shared by the integration tests.

#![allow(dead_code)]

pub mod fd;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tractscl::contrastive::{build_pair_mask, microscl_loss, LossConfig};
use tractscl::nn::{forward, softmax_cross_entropy, Heads, ModelParams};

/// Which scalar the finite-difference oracle differentiates.
#[derive(Clone, Copy, Debug)]
pub enum Objective {
    CrossEntropy,
    Contrastive(LossConfig),
}

pub struct Batch {
    pub x: Array3<f64>,
    pub labels: Vec<usize>,
    pub fas: Vec<f64>,
}

pub fn random_batch(b: usize, p: usize, channels: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array3::from_shape_fn((b, p, channels), |_| rng.random_range(-1.0..1.0));
    // every class appears at least twice so each anchor can have positives
    let labels = (0..b).map(|i| (i / 2) % 2).collect();
    let fas = (0..b).map(|_| rng.random_range(0.3..0.36)).collect();
    Batch { x, labels, fas }
}

/// Initialized parameters with small random biases, so no pre-activation
/// sits exactly on a ReLU kink.
pub fn jittered_params(arch: &tractscl::nn::Architecture, seed: u64) -> ModelParams<f64> {
    let mut p = tractscl::nn::init_params(arch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for l in p.layers_mut() {
        l.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    p
}

pub fn objective_value(params: &ModelParams<f64>, batch: &Batch, obj: Objective) -> f64 {
    match obj {
        Objective::CrossEntropy => {
            let pass = forward(params, batch.x.view(), Heads::CLASSIFIER).unwrap();
            softmax_cross_entropy(pass.logits().unwrap(), &batch.labels)
                .unwrap()
                .loss
        }
        Objective::Contrastive(cfg) => {
            let pass = forward(params, batch.x.view(), Heads::PROJECTION).unwrap();
            let mask = build_pair_mask(&batch.labels, &batch.fas, &cfg).unwrap();
            microscl_loss(pass.z().unwrap(), &mask, cfg.tau).unwrap().loss
        }
    }
}

/// Central differences for every parameter, by full re-evaluation.
pub fn full_fd_gradient(
    params: &ModelParams<f64>,
    batch: &Batch,
    obj: Objective,
    h: f64,
) -> ModelParams<f64> {
    let mut grads = params.zeros_like();
    let mut work = params.clone();
    let n_layers = params.layers().count();
    for li in 0..n_layers {
        let (rows, cols) = params.layers().nth(li).unwrap().weight.dim();
        for r in 0..rows {
            for c in 0..=cols {
                let orig = get(&work, li, r, c);
                set(&mut work, li, r, c, orig + h);
                let plus = objective_value(&work, batch, obj);
                set(&mut work, li, r, c, orig - h);
                let minus = objective_value(&work, batch, obj);
                set(&mut work, li, r, c, orig);
                set(&mut grads, li, r, c, (plus - minus) / (2.0 * h));
            }
        }
    }
    grads
}

/// Column `cols` addresses the bias.
pub fn get(p: &ModelParams<f64>, layer: usize, r: usize, c: usize) -> f64 {
    let l = p.layers().nth(layer).unwrap();
    if c == l.weight.ncols() {
        l.bias[r]
    } else {
        l.weight[[r, c]]
    }
}

pub fn set(p: &mut ModelParams<f64>, layer: usize, r: usize, c: usize, v: f64) {
    let l = p.layers_mut().nth(layer).unwrap();
    if c == l.weight.ncols() {
        l.bias[r] = v;
    } else {
        l.weight[[r, c]] = v;
    }
}

/// Largest violation of `|a - n| <= max(rel * max(|a|, |n|), abs)`, as
/// (layer, row, col, analytic, numeric); `None` when all entries agree.
pub fn worst_mismatch(
    analytic: &ModelParams<f64>,
    numeric: &ModelParams<f64>,
    rel: f64,
    abs: f64,
) -> Option<(usize, usize, usize, f64, f64)> {
    let mut worst: Option<(f64, (usize, usize, usize, f64, f64))> = None;
    for (li, (a, n)) in analytic.layers().zip(numeric.layers()).enumerate() {
        let cols = a.weight.ncols();
        for r in 0..a.weight.nrows() {
            for c in 0..=cols {
                let (x, y) = if c == cols {
                    (a.bias[r], n.bias[r])
                } else {
                    (a.weight[[r, c]], n.weight[[r, c]])
                };
                let allowed = (rel * x.abs().max(y.abs())).max(abs);
                let excess = (x - y).abs() / allowed;
                if excess > 1.0 && worst.map_or(true, |(e, _)| excess > e) {
                    worst = Some((excess, (li, r, c, x, y)));
                }
            }
        }
    }
    worst.map(|(_, w)| w)
}

pub fn unit_rows(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut z = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0f64..1.0));
    for mut row in z.rows_mut() {
        let n: f64 = row.dot(&row).sqrt();
        row /= n;
    }
    z
}
