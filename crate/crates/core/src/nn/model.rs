use ndarray::{Array1, Array2, ArrayView3, Axis, Zip};

use super::{Linear, ModelParams, NnError, Real, Result};

/// Activations kept from an encoder pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    /// Points of all streamlines stacked: `(batch * points) x channels`.
    pub input: Array2<T>,
    /// Post-ReLU output of every encoder layer, same row layout as `input`.
    pub acts: Vec<Array2<T>>,
    /// For each streamline and feature channel, the row that won the max.
    pub argmax: Array2<usize>,
    pub batch: usize,
    pub points: usize,
}

#[derive(Debug, Clone)]
pub struct HeadTrace<T> {
    pub input: Array2<T>,
    /// Output of every layer; ReLU applied on all but the last.
    pub acts: Vec<Array2<T>>,
}

#[derive(Debug, Clone)]
pub struct ProjectionTrace<T> {
    pub head: HeadTrace<T>,
    pub z: Array2<T>,
    /// Row norms before normalization.
    pub norms: Array1<T>,
}

/// Which heads a [`forward`] pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub projection: bool,
    pub classifier: bool,
}

impl Heads {
    pub const PROJECTION: Heads = Heads {
        projection: true,
        classifier: false,
    };
    pub const CLASSIFIER: Heads = Heads {
        projection: false,
        classifier: true,
    };
    pub const BOTH: Heads = Heads {
        projection: true,
        classifier: true,
    };
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub encoder: EncoderTrace<T>,
    pub global: Array2<T>,
    pub projection: Option<ProjectionTrace<T>>,
    pub classifier: Option<HeadTrace<T>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn z(&self) -> Option<&Array2<T>> {
        self.projection.as_ref().map(|p| &p.z)
    }

    pub fn logits(&self) -> Option<&Array2<T>> {
        self.classifier.as_ref().and_then(|c| c.acts.last())
    }
}

#[cfg(test)]
fn relu_inplace<T: Real>(a: &mut Array2<T>) {
    a.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

fn affine<T: Real>(x: &Array2<T>, layer: &Linear<T>) -> Array2<T> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

/// `relu(affine(x))` with the bias and the clamp applied in one pass.
fn affine_relu<T: Real>(x: &Array2<T>, layer: &Linear<T>) -> Array2<T> {
    let mut z = x.dot(&layer.weight.t());
    let bias = layer.bias.as_slice().expect("contiguous bias");
    for mut row in z.rows_mut() {
        let row = row.as_slice_mut().expect("standard layout");
        for (v, &b) in row.iter_mut().zip(bias) {
            let s = *v + b;
            *v = if s > T::zero() { s } else { T::zero() };
        }
    }
    z
}

/// Zeroes the gradient wherever the ReLU output was not positive.
fn relu_mask<T: Real>(d: &mut Array2<T>, act: &Array2<T>) {
    match (d.as_slice_mut(), act.as_slice()) {
        (Some(d), Some(a)) => {
            for (g, &a) in d.iter_mut().zip(a) {
                *g = if a <= T::zero() { T::zero() } else { *g };
            }
        }
        _ => Zip::from(d)
            .and(act)
            .for_each(|g, &a| *g = if a <= T::zero() { T::zero() } else { *g }),
    }
}

fn flatten_points<T: Real>(
    params: &ModelParams<T>,
    batch: ArrayView3<T>,
) -> Result<(Array2<T>, usize, usize)> {
    let (b, p, c) = batch.dim();
    let expected = params.encoder[0].in_width();
    if c != expected {
        return Err(NnError::ShapeMismatch(format!(
            "input has {c} channels, encoder expects {expected}"
        )));
    }
    if b == 0 || p == 0 {
        return Err(NnError::ShapeMismatch(format!(
            "empty input batch ({b} streamlines x {p} points)"
        )));
    }
    let flat = batch
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * p, c))
        .expect("standard layout");
    Ok((flat, b, p))
}

fn max_pool<T: Real>(act: &Array2<T>, batch: usize, points: usize) -> (Array2<T>, Array2<usize>) {
    let f = act.ncols();
    let a = act.as_slice().expect("standard layout");
    let mut g = Array2::zeros((batch, f));
    let mut arg = Array2::zeros((batch, f));
    for b in 0..batch {
        let base = b * points;
        let gm = g.row_mut(b).into_slice().expect("standard layout");
        gm.copy_from_slice(&a[base * f..(base + 1) * f]);
        // strict comparison: a later point only wins with a larger value
        for r in base + 1..base + points {
            for (m, &v) in gm.iter_mut().zip(&a[r * f..(r + 1) * f]) {
                *m = if v > *m { v } else { *m };
            }
        }
        // the winner is the lowest index holding the maximum
        let am = arg.row_mut(b).into_slice().expect("standard layout");
        am.fill(base);
        for r in (base..base + points).rev() {
            for ((i, &m), &v) in am.iter_mut().zip(&*gm).zip(&a[r * f..(r + 1) * f]) {
                *i = if v == m { r } else { *i };
            }
        }
    }
    (g, arg)
}

/// Global features `B x F` of a `B x P x C` batch, keeping what the reverse
/// pass needs.
pub fn encode<T: Real>(
    params: &ModelParams<T>,
    batch: ArrayView3<T>,
) -> Result<(Array2<T>, EncoderTrace<T>)> {
    let (input, b, p) = flatten_points(params, batch)?;
    let mut acts: Vec<Array2<T>> = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        acts.push(affine_relu(acts.last().unwrap_or(&input), layer));
    }
    let (g, argmax) = max_pool(acts.last().unwrap(), b, p);
    Ok((
        g,
        EncoderTrace {
            input,
            acts,
            argmax,
            batch: b,
            points: p,
        },
    ))
}

/// Inference-only encoder pass; intermediate activations are dropped.
pub fn encode_features<T: Real>(params: &ModelParams<T>, batch: ArrayView3<T>) -> Result<Array2<T>> {
    let (mut x, b, p) = flatten_points(params, batch)?;
    for layer in &params.encoder {
        x = affine_relu(&x, layer);
    }
    Ok(max_pool(&x, b, p).0)
}

fn check_features<T: Real>(params: &ModelParams<T>, g: &Array2<T>) -> Result<()> {
    let f = params.encoder.last().unwrap().out_width();
    if g.ncols() != f {
        return Err(NnError::ShapeMismatch(format!(
            "feature width {} but encoder produces {f}",
            g.ncols()
        )));
    }
    Ok(())
}

fn mlp_forward<T: Real>(layers: &[Linear<T>], x: &Array2<T>) -> HeadTrace<T> {
    let mut acts: Vec<Array2<T>> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let input = acts.last().unwrap_or(x);
        acts.push(if i + 1 < layers.len() {
            affine_relu(input, layer)
        } else {
            affine(input, layer)
        });
    }
    HeadTrace {
        input: x.clone(),
        acts,
    }
}

fn mlp_backward<T: Real>(
    layers: &[Linear<T>],
    trace: &HeadTrace<T>,
    d_out: Array2<T>,
    grads: &mut [Linear<T>],
) -> Array2<T> {
    let mut d = d_out;
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() {
            relu_mask(&mut d, &trace.acts[i]);
        }
        let input = if i == 0 { &trace.input } else { &trace.acts[i - 1] };
        grads[i].weight += &d.t().dot(input);
        grads[i].bias += &d.sum_axis(Axis(0));
        d = d.dot(&layers[i].weight);
    }
    d
}

const NORM_EPS: f64 = 1e-12;

/// Unit-norm contrastive embeddings.
pub fn project<T: Real>(
    params: &ModelParams<T>,
    g: &Array2<T>,
) -> Result<(Array2<T>, ProjectionTrace<T>)> {
    check_features(params, g)?;
    let head = mlp_forward(&params.projection, g);
    let u = head.acts.last().unwrap();
    let norms: Array1<T> = u
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let mut z = u.clone();
    for (i, (mut row, &n)) in z.rows_mut().into_iter().zip(&norms).enumerate() {
        if n > T::zero() {
            row /= n;
        } else {
            log::warn!("projection row {i} is exactly zero before normalization");
            row /= n + T::of(NORM_EPS);
        }
    }
    Ok((z.clone(), ProjectionTrace { head, z, norms }))
}

/// Raw two-class logits.
pub fn classify<T: Real>(params: &ModelParams<T>, g: &Array2<T>) -> Result<(Array2<T>, HeadTrace<T>)> {
    check_features(params, g)?;
    let trace = mlp_forward(&params.classifier, g);
    Ok((trace.acts.last().unwrap().clone(), trace))
}

pub fn forward<T: Real>(
    params: &ModelParams<T>,
    batch: ArrayView3<T>,
    heads: Heads,
) -> Result<ForwardPass<T>> {
    let (global, encoder) = encode(params, batch)?;
    let projection = if heads.projection {
        Some(project(params, &global)?.1)
    } else {
        None
    };
    let classifier = if heads.classifier {
        Some(classify(params, &global)?.1)
    } else {
        None
    };
    Ok(ForwardPass {
        encoder,
        global,
        projection,
        classifier,
    })
}

/// Accumulates encoder gradients for an upstream gradient `dg` on the global
/// features. The max-pool routes each channel's gradient to its argmax point.
pub fn encode_backward<T: Real>(
    params: &ModelParams<T>,
    trace: &EncoderTrace<T>,
    dg: &Array2<T>,
    grads: &mut ModelParams<T>,
) {
    let last = params.encoder.len() - 1;
    let prev = |l: usize| if l == 0 { &trace.input } else { &trace.acts[l - 1] };

    // The pooled layer's gradient is nonzero on one row per (streamline,
    // channel), so it is scattered directly instead of formed densely.
    let a_last = &trace.acts[last];
    let a_prev = prev(last);
    let w_last = &params.encoder[last].weight;
    let mut d_act = (last > 0).then(|| Array2::<T>::zeros(a_prev.raw_dim()));
    {
        let g = &mut grads.encoder[last];
        for b in 0..trace.batch {
            for c in 0..w_last.nrows() {
                let r = trace.argmax[[b, c]];
                let dz = dg[[b, c]];
                if a_last[[r, c]] <= T::zero() || dz == T::zero() {
                    continue;
                }
                g.bias[c] += dz;
                g.weight.row_mut(c).scaled_add(dz, &a_prev.row(r));
                if let Some(d) = d_act.as_mut() {
                    d.row_mut(r).scaled_add(dz, &w_last.row(c));
                }
            }
        }
    }

    for l in (0..last).rev() {
        let mut dz = d_act.take().expect("upstream gradient");
        relu_mask(&mut dz, &trace.acts[l]);
        grads.encoder[l].weight += &dz.t().dot(prev(l));
        grads.encoder[l].bias += &dz.sum_axis(Axis(0));
        if l > 0 {
            d_act = Some(dz.dot(&params.encoder[l].weight));
        }
    }
}

/// Accumulates projection-head gradients; returns the gradient on the
/// global features.
pub fn project_backward<T: Real>(
    params: &ModelParams<T>,
    trace: &ProjectionTrace<T>,
    dz: &Array2<T>,
    grads: &mut ModelParams<T>,
) -> Array2<T> {
    let mut du = dz.clone();
    for ((mut d, z), &n) in du
        .rows_mut()
        .into_iter()
        .zip(trace.z.rows())
        .zip(&trace.norms)
    {
        if n > T::zero() {
            let proj = z.dot(&d);
            d.scaled_add(-proj, &z);
            d /= n;
        } else {
            d.fill(T::zero());
        }
    }
    mlp_backward(&params.projection, &trace.head, du, &mut grads.projection)
}

pub fn classify_backward<T: Real>(
    params: &ModelParams<T>,
    trace: &HeadTrace<T>,
    d_logits: &Array2<T>,
    grads: &mut ModelParams<T>,
) -> Array2<T> {
    mlp_backward(
        &params.classifier,
        trace,
        d_logits.clone(),
        &mut grads.classifier,
    )
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradients on the contrastive embeddings and/or the logits.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    pass: &ForwardPass<T>,
    dz: Option<&Array2<T>>,
    d_logits: Option<&Array2<T>>,
) -> ModelParams<T> {
    let mut grads = params.zeros_like();
    let mut dg = Array2::<T>::zeros(pass.global.raw_dim());
    if let (Some(dz), Some(trace)) = (dz, &pass.projection) {
        dg += &project_backward(params, trace, dz, &mut grads);
    }
    if let (Some(dl), Some(trace)) = (d_logits, &pass.classifier) {
        dg += &classify_backward(params, trace, dl, &mut grads);
    }
    encode_backward(params, &pass.encoder, &dg, &mut grads);
    grads
}

#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    pub loss: T,
    /// Gradient with respect to the logits.
    pub grad: Array2<T>,
}

/// Mean negative log-softmax of the true class, stabilized by max
/// subtraction. The gradient is `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(NnError::ShapeMismatch(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(NnError::BadLabel { row, label });
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut grad = Array2::zeros((b, k));
    let mut total = T::zero();
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - row[labels[i]];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - m).exp() / sum;
            let target = if j == labels[i] { T::one() } else { T::zero() };
            grad[[i, j]] = (p - target) * inv_b;
        }
    }
    Ok(CrossEntropy {
        loss: total * inv_b,
        grad,
    })
}
