use ndarray::{Array1, Array2, Zip};

use super::{Group, ModelParams, NnError, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    w: Array2<T>,
    b: Array1<T>,
}

/// Bias-corrected Adam without weight decay over a chosen set of parameter
/// groups. Groups not listed are never touched.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    groups: Vec<Group>,
    first: Vec<Vec<Moments<T>>>,
    second: Vec<Vec<Moments<T>>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>, groups: &[Group], config: AdamConfig) -> Self {
        let zeros = || {
            groups
                .iter()
                .map(|&g| {
                    params
                        .group(g)
                        .iter()
                        .map(|l| Moments {
                            w: Array2::zeros(l.weight.raw_dim()),
                            b: Array1::zeros(l.bias.raw_dim()),
                        })
                        .collect()
                })
                .collect()
        };
        Self {
            config,
            groups: groups.to_vec(),
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in the state's groups.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        for (gi, &group) in self.groups.iter().enumerate() {
            let (p, g) = (params.group(group), grads.group(group));
            if p.len() != self.first[gi].len() || g.len() != p.len() {
                return Err(NnError::ShapeMismatch(format!("{group:?} layer count changed")));
            }
            for (i, (pl, gl)) in p.iter().zip(g).enumerate() {
                let m = &self.first[gi][i];
                if pl.weight.dim() != m.w.dim()
                    || gl.weight.dim() != m.w.dim()
                    || gl.bias.dim() != m.b.dim()
                {
                    return Err(NnError::ShapeMismatch(format!("{group:?} layer {i}")));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = one - T::of(c.beta1.powi(self.step as i32));
        let bc2 = one - T::of(c.beta2.powi(self.step as i32));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        let update = |p: &mut T, &g: &T, m: &mut T, v: &mut T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };

        for (gi, &group) in self.groups.iter().enumerate() {
            let layers = params.group_mut(group);
            let glayers = grads.group(group);
            for (i, layer) in layers.iter_mut().enumerate() {
                let (m, v) = (&mut self.first[gi][i], &mut self.second[gi][i]);
                Zip::from(&mut layer.weight)
                    .and(&glayers[i].weight)
                    .and(&mut m.w)
                    .and(&mut v.w)
                    .for_each(update);
                Zip::from(&mut layer.bias)
                    .and(&glayers[i].bias)
                    .and(&mut m.b)
                    .and(&mut v.b)
                    .for_each(update);
            }
        }
        Ok(())
    }
}
