//! Central finite differences over every parameter of a full-width network.
//!
//! Both losses are evaluated in full at `theta +- h`. The network outputs at
//! the perturbed point are computed without re-running the whole network:
//!
//! * The network is piecewise linear. While no ReLU input changes sign and
//!   no max-pool winner moves, a change in one encoder unit reaches the head
//!   outputs through fixed linear maps. Those maps are built here by forward
//!   products, independently of the library's reverse pass.
//! * Cheap bounds decide when a stencil might leave the linear region. Such
//!   candidates are checked exactly. Those that do cross a kink are
//!   recomputed by exact incremental propagation: the changed column, the
//!   rows it reaches, the affected pooled features and both heads.
//!
//! A stencil that straddles a kink does not estimate the derivative, so
//! mismatches on those are reported separately.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tractscl::contrastive::{build_pair_mask, microscl_loss, LossConfig, PairMode};
use tractscl::nn::{backward, forward, softmax_cross_entropy, Architecture, Heads, ModelParams};

use super::jittered_params;
use super::oracle::literal_microscl;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub loss: &'static str,
    pub layer: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub parameters: usize,
    /// (parameter, loss) pairs compared against a finite difference.
    pub compared: usize,
    /// Pairs where the loss cannot depend on the parameter; the analytic
    /// gradient must be exactly zero.
    pub structural_zeros: usize,
    pub kink_excluded: usize,
    pub mismatches: Vec<Mismatch>,
    pub max_abs_err: f64,
    pub layer_seconds: Vec<(String, f64)>,
}

impl FdReport {
    pub fn summary(&self) -> String {
        format!(
            "{} parameters, {} finite-difference comparisons, {} structural zeros, {} mismatches, {} kink-crossing stencils excluded, max |err| {:.2e}",
            self.parameters,
            self.compared,
            self.structural_zeros,
            self.mismatches.len(),
            self.kink_excluded,
            self.max_abs_err
        )
    }

    fn compare(&mut self, loss: &'static str, layer: &str, row: usize, col: usize, analytic: f64, numeric: f64, kink: bool) {
        self.compared += 1;
        let err = (analytic - numeric).abs();
        let allowed = (REL_TOL * analytic.abs().max(numeric.abs())).max(ABS_TOL);
        if err <= allowed {
            self.max_abs_err = self.max_abs_err.max(err);
        } else if kink {
            self.kink_excluded += 1;
        } else {
            self.mismatches.push(Mismatch {
                loss,
                layer: layer.to_string(),
                row,
                col,
                analytic,
                numeric,
            });
        }
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

/// Activations of the unperturbed network, computed independently of the
/// library's forward pass.
struct Base {
    x: Array2<f64>,
    /// Encoder pre- and post-activations per layer, `(batch * points) x width`.
    ze: Vec<Array2<f64>>,
    ae: Vec<Array2<f64>>,
    /// 1.0 where an encoder pre-activation is positive.
    mask: Vec<Array2<f64>>,
    g: Array2<f64>,
    arg: Array2<usize>,
    /// Max-pool margin: winner minus runner-up, per sample and channel.
    gap: Array2<f64>,
    /// Classifier pre-activations per layer; the last is the logits.
    cz: Vec<Array2<f64>>,
    ca: Vec<Array2<f64>>,
    /// Projection pre-activations per layer; the last is the unnormalized embedding.
    pz: Vec<Array2<f64>>,
    pa: Vec<Array2<f64>>,
}

struct Problem {
    params: ModelParams<f64>,
    labels: Vec<usize>,
    fas: Vec<f64>,
    cfg: LossConfig,
    batch: usize,
    points: usize,
    /// Finite-difference step.
    h: f64,
    base: Base,
    /// First-layer weights of both heads stacked and transposed: `F x (c0 + p0)`.
    head_in_t: Array2<f64>,
    c0: usize,
    /// Per sample, derivatives of the head pre-activations with respect to
    /// the pooled features, `F x width`: hidden layers of both heads, then the
    /// logits and the unnormalized embedding.
    jh_hidden: Vec<Array2<f64>>,
    jh_out: Vec<Array2<f64>>,
    h_hidden: Array2<f64>,
    h_out: Array2<f64>,
    /// Number of logits; the embedding follows them in `h_out`.
    co: usize,
}

fn mlp(x: &Array2<f64>, layers: &[tractscl::nn::Linear<f64>]) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let mut zs = Vec::new();
    let mut as_ = Vec::new();
    let mut cur = x.clone();
    for (i, l) in layers.iter().enumerate() {
        let z = affine(&cur, &l.weight, &l.bias);
        let a = if i + 1 < layers.len() { z.mapv(relu) } else { z.clone() };
        cur = a.clone();
        zs.push(z);
        as_.push(a);
    }
    (zs, as_)
}

/// For sample `s`, the derivative of every layer's pre-activation with
/// respect to the head input, transposed to `input width x layer width`.
/// Valid while the sample's ReLU pattern in the head is unchanged.
fn head_jacobians(layers: &[tractscl::nn::Linear<f64>], zs: &[Array2<f64>], s: usize) -> Vec<Array2<f64>> {
    let mut out = vec![layers[0].weight.t().to_owned()];
    for i in 1..layers.len() {
        let m = zs[i - 1].row(s).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let next = (out.last().unwrap() * &m).dot(&layers[i].weight.t());
        out.push(next);
    }
    out
}

impl Problem {
    fn new(arch: &Architecture, batch: usize, points: usize, seed: u64) -> Self {
        let params = jittered_params(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((batch * points, 3), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
        // pairs of close FA values inside each class, plus outliers
        let fas: Vec<f64> = (0..batch)
            .map(|i| 0.3 + 0.02 * (i / 2) as f64 + if i % 3 == 2 { 0.25 } else { 0.0 })
            .collect();
        let cfg = LossConfig {
            tau: 0.1,
            t_fa: 0.1,
            mode: PairMode::Micro,
        };

        let mut ze = Vec::new();
        let mut ae = Vec::new();
        let mut cur = x.clone();
        for l in &params.encoder {
            let z = affine(&cur, &l.weight, &l.bias);
            let a = z.mapv(relu);
            cur = a.clone();
            ze.push(z);
            ae.push(a);
        }
        let last = ae.last().unwrap();
        let f = last.ncols();
        let mut g = Array2::zeros((batch, f));
        let mut arg = Array2::zeros((batch, f));
        let mut gap = Array2::from_elem((batch, f), f64::INFINITY);
        for b in 0..batch {
            for c in 0..f {
                let (mut best, mut at) = (last[[b * points, c]], b * points);
                for r in b * points + 1..(b + 1) * points {
                    if last[[r, c]] > best {
                        best = last[[r, c]];
                        at = r;
                    }
                }
                g[[b, c]] = best;
                arg[[b, c]] = at;
                for r in b * points..(b + 1) * points {
                    if r != at {
                        gap[[b, c]] = gap[[b, c]].min(best - last[[r, c]]);
                    }
                }
            }
        }
        let mask: Vec<Array2<f64>> = ze.iter().map(|z| z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })).collect();
        let (cz, ca) = mlp(&g, &params.classifier);
        let (pz, pa) = mlp(&g, &params.projection);
        let c0 = params.classifier[0].out_width();
        let mut head_in = Array2::zeros((c0 + params.projection[0].out_width(), f));
        head_in.slice_mut(s![..c0, ..]).assign(&params.classifier[0].weight);
        head_in.slice_mut(s![c0.., ..]).assign(&params.projection[0].weight);
        let head_in_t = head_in.t().as_standard_layout().into_owned();

        let mut jh_hidden = Vec::new();
        let mut jh_out = Vec::new();
        for s in 0..batch {
            let jc = head_jacobians(&params.classifier, &cz, s);
            let jp = head_jacobians(&params.projection, &pz, s);
            let hidden: Vec<_> = jc[..jc.len() - 1].iter().chain(&jp[..jp.len() - 1]).map(|a| a.view()).collect();
            let out = [jc.last().unwrap().view(), jp.last().unwrap().view()];
            jh_hidden.push(ndarray::concatenate(Axis(1), &hidden).unwrap().as_standard_layout().into_owned());
            jh_out.push(ndarray::concatenate(Axis(1), &out).unwrap().as_standard_layout().into_owned());
        }
        let hidden: Vec<_> = cz[..cz.len() - 1].iter().chain(&pz[..pz.len() - 1]).map(|a| a.view()).collect();
        let h_hidden = ndarray::concatenate(Axis(1), &hidden).unwrap();
        let h_out = ndarray::concatenate(Axis(1), &[cz.last().unwrap().view(), pz.last().unwrap().view()]).unwrap();
        let co = cz.last().unwrap().ncols();
        Self {
            params,
            labels,
            fas,
            cfg,
            batch,
            points,
            h: H,
            base: Base { x, ze, ae, mask, g, arg, gap, cz, ca, pz, pa },
            head_in_t,
            c0,
            jh_hidden,
            jh_out,
            h_hidden,
            h_out,
            co,
        }
    }

    fn ce(&self, logits: ndarray::ArrayView2<f64>) -> f64 {
        let mut total = 0.0;
        for (r, &y) in logits.rows().into_iter().zip(&self.labels) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - r[y];
        }
        total / self.labels.len() as f64
    }

    fn scl(&self, u: ndarray::ArrayView2<f64>) -> f64 {
        let mut z = u.to_owned();
        for mut row in z.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        literal_microscl(&z, &self.labels, &self.fas, &self.cfg)
    }

    /// Finishes both heads from stacked first-layer pre-activations (row `i`
    /// belongs to sample `i % batch`) and returns `(ce, scl, kink)` per block
    /// of `batch` rows.
    fn finish_heads(&self, cz0: Array2<f64>, pz0: Array2<f64>) -> Vec<(f64, f64, bool)> {
        let b = self.batch;
        let n = cz0.nrows() / b;
        let mut kink = vec![false; n];
        let mark = |kink: &mut Vec<bool>, z: &Array2<f64>, base: &Array2<f64>| {
            for (i, row) in z.rows().into_iter().enumerate() {
                let br = base.row(i % b);
                if row.iter().zip(br.iter()).any(|(&v, &w)| (v > 0.0) != (w > 0.0)) {
                    kink[i / b] = true;
                }
            }
        };
        let cp = &self.params.classifier;
        let pp = &self.params.projection;
        let mut cur = cz0;
        for i in 0..cp.len() {
            if i > 0 {
                cur = affine(&cur, &cp[i].weight, &cp[i].bias);
            }
            if i + 1 < cp.len() {
                mark(&mut kink, &cur, &self.base.cz[i]);
                cur.mapv_inplace(relu);
            }
        }
        let logits = cur;
        let mut cur = pz0;
        for i in 0..pp.len() {
            if i > 0 {
                cur = affine(&cur, &pp[i].weight, &pp[i].bias);
            }
            if i + 1 < pp.len() {
                mark(&mut kink, &cur, &self.base.pz[i]);
                cur.mapv_inplace(relu);
            }
        }
        let u = cur;
        (0..n)
            .map(|m| {
                let rows = s![m * b..(m + 1) * b, ..];
                (self.ce(logits.slice(rows)), self.scl(u.slice(rows)), kink[m])
            })
            .collect()
    }

    /// Heads evaluated at `g + delta` for sparse feature changes
    /// `(sample, channel, delta)` per perturbation.
    fn heads_from_deltas(&self, deltas: &[Vec<(usize, usize, f64)>]) -> Vec<(f64, f64, bool)> {
        let b = self.batch;
        let n = deltas.len();
        let width = self.head_in_t.ncols();
        let mut pre = Array2::<f64>::zeros((n * b, width));
        for m in 0..n {
            for s in 0..b {
                pre.slice_mut(s![m * b + s, ..self.c0]).assign(&self.base.cz[0].row(s));
                pre.slice_mut(s![m * b + s, self.c0..]).assign(&self.base.pz[0].row(s));
            }
        }
        for s in 0..b {
            let mut cols: HashMap<usize, usize> = HashMap::new();
            let mut order = Vec::new();
            for d in deltas {
                for &(bs, c, _) in d {
                    if bs == s && !cols.contains_key(&c) {
                        cols.insert(c, order.len());
                        order.push(c);
                    }
                }
            }
            if order.is_empty() {
                continue;
            }
            let mut dmat = Array2::<f64>::zeros((n, order.len()));
            for (m, d) in deltas.iter().enumerate() {
                for &(bs, c, v) in d {
                    if bs == s {
                        dmat[[m, cols[&c]]] = v;
                    }
                }
            }
            let w = self.head_in_t.select(Axis(0), &order);
            let add = dmat.dot(&w);
            for m in 0..n {
                let mut row = pre.row_mut(m * b + s);
                row += &add.row(m);
            }
        }
        let cz0 = pre.slice(s![.., ..self.c0]).to_owned();
        let pz0 = pre.slice(s![.., self.c0..]).to_owned();
        self.finish_heads(cz0, pz0)
    }

    /// Perturbations of one encoder unit `j` of layer `l`: every incoming
    /// weight and the bias, each at `+h` and `-h`. Returns `(ce, scl, kink)`
    /// in the order (k = 0, +), (k = 0, -), (k = 1, +), ...
    fn encoder_unit(&self, l: usize, j: usize) -> Vec<(f64, f64, bool)> {
        let base = &self.base;
        let input = if l == 0 { &base.x } else { &base.ae[l - 1] };
        let fan_in = input.ncols();
        let rows = input.nrows();
        let last = base.ze.len() - 1;
        let (b, p) = (self.batch, self.points);
        let f = base.g.ncols();

        // pre-activation change of layers l+1..=last per unit change of the
        // activation of unit j, row by row
        let mut dirs: Vec<Array2<f64>> = Vec::new();
        for t in l + 1..=last {
            let w = &self.params.encoder[t].weight;
            let v = if t == l + 1 {
                let col = w.column(j);
                Array2::from_shape_fn((rows, w.nrows()), |(_, c)| col[c])
            } else {
                (dirs.last().unwrap() * &base.mask[t - 1]).dot(&w.t())
            };
            dirs.push(v);
        }
        let pdir = match dirs.last() {
            Some(v) => v * &base.mask[last],
            None => {
                let mut e = Array2::zeros((rows, f));
                e.column_mut(j).fill(1.0);
                e
            }
        };
        // |da| below half of this cannot flip a later encoder ReLU
        let thr: Vec<f64> = (0..rows)
            .map(|r| {
                let mut m = f64::INFINITY;
                for (i, v) in dirs.iter().enumerate() {
                    for (&z, &d) in base.ze[l + 1 + i].row(r).iter().zip(v.row(r)) {
                        if d != 0.0 {
                            m = m.min(z.abs() / d.abs());
                        }
                    }
                }
                m
            })
            .collect();

        // channels each sample's change can reach, each with the largest
        // per-row change below half of which its max-pool winner cannot
        // move, in ascending order
        let mut reach: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut kappa_arg: Vec<Vec<(f64, usize)>> = vec![Vec::new(); b];
        for s in 0..b {
            for c in 0..f {
                let pm = (s * p..(s + 1) * p).map(|r| pdir[[r, c]].abs()).fold(0.0, f64::max);
                if pm > 0.0 {
                    reach[s].push(c);
                    kappa_arg[s].push((base.gap[[s, c]] / (2.0 * pm), c));
                }
            }
            kappa_arg[s].sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        // head pre-activation change per unit change at each row; only a
        // row's winning channels pass the max-pool
        let hh = self.h_hidden.ncols();
        let ho = self.h_out.ncols();
        let mut r_hidden = Array2::<f64>::zeros((rows, hh));
        let mut r_out = Array2::<f64>::zeros((rows, ho));
        let mut carrier = vec![false; rows];
        for s in 0..b {
            for &c in &reach[s] {
                let r = base.arg[[s, c]];
                let q = pdir[[r, c]];
                if q != 0.0 {
                    carrier[r] = true;
                    r_hidden.row_mut(r).scaled_add(q, &self.jh_hidden[s].row(c));
                    r_out.row_mut(r).scaled_add(q, &self.jh_out[s].row(c));
                }
            }
        }
        let mut kappa_head: Vec<Vec<(f64, usize)>> = vec![Vec::new(); b];
        for s in 0..b {
            for c in 0..hh {
                let sum: f64 = (s * p..(s + 1) * p).map(|r| r_hidden[[r, c]].abs()).sum();
                if sum > 0.0 {
                    kappa_head[s].push((self.h_hidden[[s, c]].abs() / sum, c));
                }
            }
            kappa_head[s].sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let at_risk = |list: &[(f64, usize)], amax: f64| -> Vec<usize> {
            list.iter().take_while(|(k, _)| amax >= 0.5 * k).map(|&(_, c)| c).collect()
        };

        let n = 2 * (fan_in + 1);
        let mut results = vec![(0.0, 0.0, false); n];
        let mut fallback = Vec::new();
        let mut da = vec![0.0; rows];
        for m in 0..n {
            let (k, sign) = (m / 2, if m % 2 == 0 { 1.0 } else { -1.0 });
            let mut kink = false;
            for r in 0..rows {
                da[r] = 0.0;
                let xin = if k == fan_in { 1.0 } else { input[[r, k]] };
                if xin == 0.0 {
                    continue;
                }
                let z0 = base.ze[l][[r, j]];
                let z = z0 + sign * self.h * xin;
                kink |= (z > 0.0) != (z0 > 0.0);
                da[r] = relu(z) - base.ae[l][[r, j]];
            }
            let amax: Vec<f64> = (0..b)
                .map(|s| da[s * p..(s + 1) * p].iter().fold(0.0, |a: f64, v| a.max(v.abs())))
                .collect();

            let encoder_flip = (0..rows).any(|r| {
                da[r] != 0.0
                    && da[r].abs() >= 0.5 * thr[r]
                    && dirs.iter().enumerate().any(|(i, v)| {
                        base.ze[l + 1 + i]
                            .row(r)
                            .iter()
                            .zip(v.row(r))
                            .any(|(&z, &d)| (z + da[r] * d > 0.0) != (z > 0.0))
                    })
            });
            let winner_moved = !encoder_flip
                && (0..b).any(|s| {
                    amax[s] > 0.0
                        && at_risk(&kappa_arg[s], amax[s]).into_iter().any(|c| {
                            let val = |r: usize| base.ae[last][[r, c]] + da[r] * pdir[[r, c]];
                            let (mut best, mut at) = (val(s * p), s * p);
                            for r in s * p + 1..(s + 1) * p {
                                if val(r) > best {
                                    best = val(r);
                                    at = r;
                                }
                            }
                            at != base.arg[[s, c]]
                        })
                });
            let head_flip = !encoder_flip
                && !winner_moved
                && (0..b).any(|s| {
                    amax[s] > 0.0
                        && at_risk(&kappa_head[s], amax[s]).into_iter().any(|c| {
                            let w = self.h_hidden[[s, c]];
                            let mut v = w;
                            for r in s * p..(s + 1) * p {
                                v += da[r] * r_hidden[[r, c]];
                            }
                            (v > 0.0) != (w > 0.0)
                        })
                });
            if encoder_flip || winner_moved || head_flip {
                fallback.push(m);
                continue;
            }

            let mut out = self.h_out.clone();
            for r in 0..rows {
                if carrier[r] && da[r] != 0.0 {
                    out.row_mut(r / p).scaled_add(da[r], &r_out.row(r));
                }
            }
            let logits = out.slice(s![.., ..self.co]);
            let u = out.slice(s![.., self.co..]);
            results[m] = (self.ce(logits), self.scl(u), kink);
        }

        if !fallback.is_empty() {
            let list: Vec<(usize, f64)> = fallback
                .iter()
                .map(|&m| (m / 2, if m % 2 == 0 { 1.0 } else { -1.0 }))
                .collect();
            for (&m, (ce, scl, _)) in fallback.iter().zip(self.exact_unit(l, j, &list)) {
                results[m] = (ce, scl, true);
            }
        }
        results
    }

    /// Exact incremental evaluation of the given perturbations `(k, sign)` of
    /// encoder unit `j` in layer `l`, where `k == fan_in` is the bias.
    fn exact_unit(&self, l: usize, j: usize, list: &[(usize, f64)]) -> Vec<(f64, f64, bool)> {
        let base = &self.base;
        let input = if l == 0 { &base.x } else { &base.ae[l - 1] };
        let fan_in = input.ncols();
        let rows = input.nrows();
        let n_layers = base.ze.len();
        let last = n_layers - 1;
        let p = self.points;

        // new post-activation of unit j for every perturbation
        let mut kink = Vec::new();
        let mut changed: Vec<Vec<(usize, f64)>> = Vec::new();
        for &(k, sign) in list {
            {
                let mut crossed = false;
                let mut rows_changed = Vec::new();
                for r in 0..rows {
                    let xin = if k == fan_in { 1.0 } else { input[[r, k]] };
                    if xin == 0.0 {
                        continue;
                    }
                    let z0 = base.ze[l][[r, j]];
                    let z = z0 + sign * self.h * xin;
                    crossed |= (z > 0.0) != (z0 > 0.0);
                    let da = relu(z) - base.ae[l][[r, j]];
                    if da != 0.0 {
                        rows_changed.push((r, da));
                    }
                }
                kink.push(crossed);
                changed.push(rows_changed);
            }
        }
        let n = changed.len();

        // pooled-feature changes per perturbation
        let mut deltas: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); n];
        if l == last {
            for m in 0..n {
                let mut new_col: HashMap<usize, f64> = HashMap::new();
                for &(r, da) in &changed[m] {
                    new_col.insert(r, base.ae[l][[r, j]] + da);
                }
                for s in 0..self.batch {
                    if !(s * p..(s + 1) * p).any(|r| new_col.contains_key(&r)) {
                        continue;
                    }
                    let val = |r: usize| new_col.get(&r).copied().unwrap_or(base.ae[l][[r, j]]);
                    let (mut best, mut at) = (val(s * p), s * p);
                    for r in s * p + 1..(s + 1) * p {
                        if val(r) > best {
                            best = val(r);
                            at = r;
                        }
                    }
                    kink[m] |= at != base.arg[[s, j]];
                    let d = best - base.g[[s, j]];
                    if d != 0.0 {
                        deltas[m].push((s, j, d));
                    }
                }
            }
        } else {
            // stack the changed rows of all perturbations and push them through
            let owners: Vec<(usize, usize)> = changed
                .iter()
                .enumerate()
                .flat_map(|(m, c)| c.iter().map(move |&(r, _)| (m, r)))
                .collect();
            let das: Vec<f64> = changed.iter().flatten().map(|&(_, da)| da).collect();
            let w_next = &self.params.encoder[l + 1].weight;
            let width = w_next.nrows();
            let mut cur = Array2::<f64>::zeros((owners.len(), width));
            for (i, (&(_, r), &da)) in owners.iter().zip(&das).enumerate() {
                let mut row = cur.row_mut(i);
                row.assign(&base.ze[l + 1].row(r));
                row.scaled_add(da, &w_next.column(j));
            }
            for t in l + 1..n_layers {
                if t > l + 1 {
                    let layer = &self.params.encoder[t];
                    cur = affine(&cur, &layer.weight, &layer.bias);
                }
                for (i, &(m, r)) in owners.iter().enumerate() {
                    let zr = base.ze[t].row(r);
                    if cur.row(i).iter().zip(zr.iter()).any(|(&v, &w)| (v > 0.0) != (w > 0.0)) {
                        kink[m] = true;
                    }
                }
                cur.mapv_inplace(relu);
            }
            let f = cur.ncols();
            let mut start = 0;
            for m in 0..n {
                let count = changed[m].len();
                let mine: HashMap<usize, usize> = (start..start + count).map(|i| (owners[i].1, i)).collect();
                start += count;
                for s in 0..self.batch {
                    if !(s * p..(s + 1) * p).any(|r| mine.contains_key(&r)) {
                        continue;
                    }
                    let srcs: Vec<ndarray::ArrayView1<f64>> = (s * p..(s + 1) * p)
                        .map(|r| match mine.get(&r) {
                            Some(&i) => cur.row(i),
                            None => base.ae[last].row(r),
                        })
                        .collect();
                    for c in 0..f {
                        let (mut best, mut at) = (srcs[0][c], 0);
                        for (q, row) in srcs.iter().enumerate().skip(1) {
                            if row[c] > best {
                                best = row[c];
                                at = q;
                            }
                        }
                        kink[m] |= s * p + at != base.arg[[s, c]];
                        let d = best - base.g[[s, c]];
                        if d != 0.0 {
                            deltas[m].push((s, c, d));
                        }
                    }
                }
            }
        }

        self.heads_from_deltas(&deltas)
            .into_iter()
            .zip(kink)
            .map(|((ce, scl, k1), k2)| (ce, scl, k1 || k2))
            .collect()
    }
}

/// Output of a head whose weight `[j, k]` (the bias when `k` is the fan-in)
/// is shifted by `delta`, with a flag for any ReLU sign change.
#[allow(clippy::too_many_arguments)]
fn head_perturbed(
    layers: &[tractscl::nn::Linear<f64>],
    zs: &[Array2<f64>],
    acts: &[Array2<f64>],
    g: &Array2<f64>,
    l: usize,
    j: usize,
    k: usize,
    delta: f64,
) -> (Array2<f64>, bool) {
    let n = layers.len();
    let input = if l == 0 { g } else { &acts[l - 1] };
    let fan_in = layers[l].weight.ncols();
    let mut cur = zs[l].clone();
    for s in 0..cur.nrows() {
        let xin = if k == fan_in { 1.0 } else { input[[s, k]] };
        cur[[s, j]] += delta * xin;
    }
    let mut kink = false;
    if l + 1 == n {
        return (cur, kink);
    }
    // only column j changed, so the next layer gets a rank-1 update
    let mut next = zs[l + 1].clone();
    for s in 0..cur.nrows() {
        kink |= (cur[[s, j]] > 0.0) != (zs[l][[s, j]] > 0.0);
        let da = relu(cur[[s, j]]) - acts[l][[s, j]];
        if da != 0.0 {
            next.row_mut(s).scaled_add(da, &layers[l + 1].weight.column(j));
        }
    }
    cur = next;
    for t in l + 1..n {
        if t > l + 1 {
            cur = affine(&cur, &layers[t].weight, &layers[t].bias);
        }
        if t + 1 < n {
            kink |= cur.iter().zip(zs[t].iter()).any(|(&v, &w)| (v > 0.0) != (w > 0.0));
            cur.mapv_inplace(relu);
        }
    }
    (cur, kink)
}

/// Checks analytic gradients of both losses against central differences for
/// every parameter of the default-width network on a `batch x points` input.
pub fn full_network_check(batch: usize, points: usize, seed: u64) -> FdReport {
    network_check(&Architecture::default(), batch, points, seed)
}

pub fn network_check(arch: &Architecture, batch: usize, points: usize, seed: u64) -> FdReport {
    let pb = Problem::new(arch, batch, points, seed);
    let params = &pb.params;
    let base = &pb.base;
    let mut report = FdReport {
        parameters: params.layers().map(|l| l.weight.len() + l.bias.len()).sum(),
        ..FdReport::default()
    };

    // analytic gradients from the library
    let x3 = base
        .x
        .clone()
        .into_shape_with_order((batch, points, 3))
        .unwrap();
    let pass = forward(params, x3.view(), Heads::BOTH).unwrap();
    let ce = softmax_cross_entropy(pass.logits().unwrap(), &pb.labels).unwrap();
    let mask = build_pair_mask(&pb.labels, &pb.fas, &pb.cfg).unwrap();
    let scl = microscl_loss(pass.z().unwrap(), &mask, pb.cfg.tau).unwrap();
    assert!(scl.contributing_anchors > 0, "batch needs positive pairs");
    let base_ce = pb.ce(base.cz.last().unwrap().view());
    let base_scl = pb.scl(base.pz.last().unwrap().view());
    assert!((base_ce - ce.loss).abs() < 1e-12, "{base_ce} vs {}", ce.loss);
    assert!((base_scl - scl.loss).abs() < 1e-10, "{base_scl} vs {}", scl.loss);
    let g_ce = backward(params, &pass, None, Some(&ce.grad));
    let g_scl = backward(params, &pass, Some(&scl.grad), None);

    let entry = |g: &ModelParams<f64>, group: usize, l: usize, j: usize, k: usize| -> f64 {
        let layer = match group {
            0 => &g.encoder[l],
            1 => &g.projection[l],
            _ => &g.classifier[l],
        };
        if k == layer.weight.ncols() {
            layer.bias[j]
        } else {
            layer.weight[[j, k]]
        }
    };
    let fd = |plus: f64, minus: f64| (plus - minus) / (2.0 * H);

    for l in 0..params.encoder.len() {
        let t0 = Instant::now();
        let name = format!("encoder.{l}");
        let (out, fan_in) = params.encoder[l].weight.dim();
        for j in 0..out {
            let vals = pb.encoder_unit(l, j);
            for k in 0..=fan_in {
                let (p, m) = (vals[2 * k], vals[2 * k + 1]);
                let kink = p.2 || m.2;
                report.compare("cross-entropy", &name, j, k, entry(&g_ce, 0, l, j, k), fd(p.0, m.0), kink);
                report.compare("contrastive", &name, j, k, entry(&g_scl, 0, l, j, k), fd(p.1, m.1), kink);
            }
        }
        report.layer_seconds.push((name, t0.elapsed().as_secs_f64()));
    }

    for (group, loss, other) in [(2usize, "cross-entropy", "contrastive"), (1, "contrastive", "cross-entropy")] {
        let (layers, zs, acts) = if group == 2 {
            (&params.classifier, &base.cz, &base.ca)
        } else {
            (&params.projection, &base.pz, &base.pa)
        };
        let (g_own, g_other) = if group == 2 { (&g_ce, &g_scl) } else { (&g_scl, &g_ce) };
        let head = if group == 2 { "classifier" } else { "projection" };
        for l in 0..layers.len() {
            let t0 = Instant::now();
            let name = format!("{head}.{l}");
            let (out, fan_in) = layers[l].weight.dim();
            for j in 0..out {
                for k in 0..=fan_in {
                    let eval = |sign: f64| {
                        let (y, kink) = head_perturbed(layers, zs, acts, &base.g, l, j, k, sign * H);
                        let v = if group == 2 { pb.ce(y.view()) } else { pb.scl(y.view()) };
                        (v, kink)
                    };
                    let (p, m) = (eval(1.0), eval(-1.0));
                    let analytic = entry(g_own, group, l, j, k);
                    report.compare(loss, &name, j, k, analytic, fd(p.0, m.0), p.1 || m.1);
                    report.structural_zeros += 1;
                    let z = entry(g_other, group, l, j, k);
                    if z != 0.0 {
                        report.mismatches.push(Mismatch {
                            loss: other,
                            layer: name.clone(),
                            row: j,
                            col: k,
                            analytic: z,
                            numeric: 0.0,
                        });
                    }
                }
            }
            report.layer_seconds.push((name, t0.elapsed().as_secs_f64()));
        }
    }
    report
}

/// Largest difference between the linear-region evaluation and exact
/// incremental evaluation of every encoder perturbation, for testing the
/// oracle itself. Also returns how many stencils took the exact path.
pub fn fast_path_deviation(arch: &Architecture, batch: usize, points: usize, seed: u64, h: f64) -> (f64, usize) {
    let mut pb = Problem::new(arch, batch, points, seed);
    pb.h = h;
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for l in 0..pb.params.encoder.len() {
        let (out, fan_in) = pb.params.encoder[l].weight.dim();
        let list: Vec<(usize, f64)> = (0..=fan_in).flat_map(|k| [(k, 1.0), (k, -1.0)]).collect();
        for j in 0..out {
            let fast = pb.encoder_unit(l, j);
            let exact = pb.exact_unit(l, j, &list);
            for (a, e) in fast.iter().zip(&exact) {
                worst = worst.max((a.0 - e.0).abs()).max((a.1 - e.1).abs());
                assert_eq!(a.2, e.2, "kink flags differ in encoder.{l} unit {j}");
                kinks += a.2 as usize;
            }
        }
    }
    (worst, kinks)
}
