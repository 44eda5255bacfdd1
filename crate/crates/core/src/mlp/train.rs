use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{init_network, softmax2, Network, ParamsView, Shape, OUTPUT_DIM};
use crate::error::{Error, Result};

/// Inputs with their two-way targets. Row `i` of `targets` is `[1, 0]` for the
/// first class of a pair and `[0, 1]` for the second.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if targets.ncols() != OUTPUT_DIM {
            return Err(Error::Dimension {
                expected: OUTPUT_DIM,
                got: targets.ncols(),
            });
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Dimension {
                expected: inputs.nrows(),
                got: targets.nrows(),
            });
        }
        Ok(Batch { inputs, targets })
    }

    /// Builds a batch from rows and class indices (0 or 1).
    pub fn from_rows(rows: &[&[f64]], classes: &[usize]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut inputs = Array2::zeros((rows.len(), dim));
        for (mut dst, src) in inputs.axis_iter_mut(Axis(0)).zip(rows) {
            if src.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: src.len(),
                });
            }
            dst.assign(&ndarray::ArrayView1::from(*src));
        }
        let mut targets = Array2::zeros((classes.len(), OUTPUT_DIM));
        for (i, &c) in classes.iter().enumerate() {
            targets[[i, c.min(1)]] = 1.0;
        }
        Batch::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
        }
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if self.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        if self.inputs.ncols() != shape.input_dim {
            return Err(Error::Dimension {
                expected: shape.input_dim,
                got: self.inputs.ncols(),
            });
        }
        Ok(())
    }
}

/// Hidden pre-activations `X W1^T + b1`.
fn pre_activation(w1: ArrayView2<f64>, b1: ArrayView1<f64>, inputs: ArrayView2<f64>) -> Array2<f64> {
    let mut pre = inputs.dot(&w1.t());
    pre += &b1;
    pre
}

fn logits(w2: ArrayView2<f64>, b2: ArrayView1<f64>, hidden: &Array2<f64>) -> Array2<f64> {
    let mut z = hidden.dot(&w2.t());
    z += &b2;
    z
}

/// Mean cross-entropy of `-sum_k t_k ln softmax(z)_k`.
fn mean_cross_entropy(z: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (zr, tr) in z.axis_iter(Axis(0)).zip(targets.axis_iter(Axis(0))) {
        // -ln softmax(z)_k = lse(z) - z_k, kept apart from the large common term
        let gap = zr[0] - zr[1];
        let soft = (-gap.abs()).exp().ln_1p();
        let (nll0, nll1) = if gap >= 0.0 { (soft, gap + soft) } else { (soft - gap, soft) };
        total += tr[0] * nll0 + tr[1] * nll1;
    }
    total / z.nrows() as f64
}

pub(crate) fn loss_flat(shape: Shape, params: &[f64], batch: &Batch) -> f64 {
    let p = ParamsView::new(shape, params);
    let hidden = pre_activation(p.w1, p.b1, batch.inputs.view()).mapv_into(f64::tanh);
    mean_cross_entropy(&logits(p.w2, p.b2, &hidden), &batch.targets)
}

/// Loss and gradient given the hidden pre-activations at `params`.
fn loss_and_gradient_at(shape: Shape, params: &[f64], pre: &Array2<f64>, batch: &Batch) -> (f64, Vec<f64>) {
    let p = ParamsView::new(shape, params);
    let n = batch.len() as f64;
    let hidden = pre.mapv(f64::tanh);
    let mut dz = logits(p.w2, p.b2, &hidden);
    let loss = mean_cross_entropy(&dz, &batch.targets);

    // dL/dz = (softmax(z) * sum(t) - t) / n
    for (mut zr, tr) in dz.axis_iter_mut(Axis(0)).zip(batch.targets.axis_iter(Axis(0))) {
        let prob = softmax2(zr[0], zr[1]);
        let mass = tr[0] + tr[1];
        zr[0] = (prob[0] * mass - tr[0]) / n;
        zr[1] = (prob[1] * mass - tr[1]) / n;
    }
    let g_w2 = dz.t().dot(&hidden);
    let g_b2 = dz.sum_axis(Axis(0));
    let mut dh = dz.dot(&p.w2);
    Zip::from(&mut dh).and(&hidden).for_each(|g, &a| *g *= 1.0 - a * a);
    let g_w1 = dh.t().dot(&batch.inputs);
    let g_b1 = dh.sum_axis(Axis(0));

    let mut grad = Vec::with_capacity(shape.param_count());
    grad.extend(g_w1.iter());
    grad.extend(g_b1.iter());
    grad.extend(g_w2.iter());
    grad.extend(g_b2.iter());
    (loss, grad)
}

pub(crate) fn loss_and_gradient_flat(shape: Shape, params: &[f64], batch: &Batch) -> (f64, Vec<f64>) {
    let p = ParamsView::new(shape, params);
    let pre = pre_activation(p.w1, p.b1, batch.inputs.view());
    loss_and_gradient_at(shape, params, &pre, batch)
}

/// Training loss along `params + a * dir`. Pre-activations are affine in `a`,
/// so each trial step skips the product with the inputs.
struct Ray<'a> {
    shape: Shape,
    batch: &'a Batch,
    params: &'a [f64],
    dir: &'a [f64],
    pre: &'a Array2<f64>,
    pre_dir: Array2<f64>,
}

impl<'a> Ray<'a> {
    fn new(shape: Shape, batch: &'a Batch, params: &'a [f64], dir: &'a [f64], pre: &'a Array2<f64>) -> Self {
        let d = ParamsView::new(shape, dir);
        let pre_dir = pre_activation(d.w1, d.b1, batch.inputs.view());
        Ray {
            shape,
            batch,
            params,
            dir,
            pre,
            pre_dir,
        }
    }

    fn pre_at(&self, a: f64) -> Array2<f64> {
        let mut pre = self.pre.clone();
        pre.scaled_add(a, &self.pre_dir);
        pre
    }

    fn loss_at(&self, a: f64) -> f64 {
        let p = ParamsView::new(self.shape, self.params);
        let d = ParamsView::new(self.shape, self.dir);
        let hidden = self.pre_at(a).mapv_into(f64::tanh);
        let mut w2 = p.w2.to_owned();
        w2.scaled_add(a, &d.w2);
        let mut b2 = p.b2.to_owned();
        b2.scaled_add(a, &d.b2);
        mean_cross_entropy(&logits(w2.view(), b2.view(), &hidden), &self.batch.targets)
    }
}

/// Mean cross-entropy and its gradient, flattened like [`Network::to_flat`].
pub fn loss_and_gradient(net: &Network, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    batch.check(net.shape())?;
    Ok(loss_and_gradient_flat(net.shape(), &net.to_flat(), batch))
}

/// Mean cross-entropy only.
pub fn loss(net: &Network, batch: &Batch) -> Result<f64> {
    batch.check(net.shape())?;
    Ok(loss_flat(net.shape(), &net.to_flat(), batch))
}

/// Conjugate-gradient training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// CG iterations per restart.
    pub max_iterations: usize,
    /// Independent initializations; the first starts from the network passed in.
    pub restarts: usize,
    /// Validation checks without improvement before a restart stops.
    pub patience: usize,
    /// CG iterations between validation checks.
    pub validation_interval: usize,
    /// Share of training features moved to validation, whole houses at a time.
    pub validation_fraction: f64,
    pub hidden_units: usize,
    pub armijo_c: f64,
    pub backtrack_shrink: f64,
    /// Forced steepest-descent reset period; `None` uses the parameter count.
    pub reset_interval: Option<usize>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_iterations: 300,
            restarts: 2,
            patience: 20,
            validation_interval: 5,
            validation_fraction: 0.30,
            hidden_units: 30,
            armijo_c: 1e-4,
            backtrack_shrink: 0.5,
            reset_interval: None,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::domain("patience must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::domain("validation fraction must lie in (0, 1)"));
        }
        if self.restarts < 1 || self.validation_interval < 1 || self.hidden_units < 1 {
            return Err(Error::domain(
                "restarts, validation interval and hidden units must be at least 1",
            ));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0)
            || !(self.backtrack_shrink > 0.0 && self.backtrack_shrink < 1.0)
        {
            return Err(Error::domain("line-search constants must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One evaluation of the validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub restart: usize,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss over all restarts.
    pub network: Network,
    pub best_validation_loss: f64,
    pub history: Vec<ValidationCheck>,
    pub iterations: usize,
    pub diverged_restarts: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const MIN_STEP: f64 = 1e-20;
const MAX_STEP: f64 = 1e6;
const MAX_EXPANSIONS: usize = 10;

/// Trains with Polak-Ribiere conjugate gradients and an Armijo line search.
/// An accepted first step is lengthened while the loss keeps falling;
/// a rejected one is backtracked.
///
/// Each restart stops after `max_iterations` or when the validation loss has
/// not improved for `patience` consecutive checks. The snapshot with the
/// lowest validation loss across all restarts is returned. A restart whose
/// loss or gradient becomes non-finite is abandoned.
pub fn train(net: &Network, train_set: &Batch, val_set: &Batch, opts: &TrainOptions) -> Result<TrainOutcome> {
    opts.validate()?;
    let shape = net.shape();
    train_set.check(shape)?;
    val_set.check(shape)?;
    let reset_every = opts.reset_interval.unwrap_or(shape.param_count()).max(1);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut history = Vec::new();
    let mut total_iterations = 0;
    let mut diverged = 0;

    for restart in 0..opts.restarts {
        let start = if restart == 0 {
            net.clone()
        } else {
            init_network(
                shape.input_dim,
                shape.hidden_dim,
                opts.seed.wrapping_add(restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )
        };
        let mut params = start.to_flat();
        let mut record = |iteration: usize, params: &[f64], history: &mut Vec<ValidationCheck>| {
            let v = loss_flat(shape, params, val_set);
            history.push(ValidationCheck {
                restart,
                iteration,
                loss: v,
            });
            if v.is_finite() && best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, params.to_vec()));
            }
            v
        };

        let mut pre = {
            let p = ParamsView::new(shape, &params);
            pre_activation(p.w1, p.b1, train_set.inputs.view())
        };
        let (mut f, mut g) = loss_and_gradient_at(shape, &params, &pre, train_set);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            diverged += 1;
            continue;
        }
        let mut best_here = record(0, &params, &mut history);
        let mut stale = 0;
        let mut dir: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut prev_step: Option<(f64, f64)> = None; // (step, slope)
        let mut last_checked = 0;
        let mut iteration = 0;

        while iteration < opts.max_iterations {
            let mut slope = dot(&g, &dir);
            let gnorm2 = dot(&g, &g);
            if gnorm2 < 1e-24 {
                break;
            }
            if slope >= 0.0 {
                dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
                slope = -gnorm2;
                prev_step = None;
            }
            let mut step = match prev_step {
                Some((s, prev_slope)) => (s * prev_slope / slope).min(MAX_STEP),
                None => 1.0 / dot(&dir, &dir).sqrt().max(1.0),
            };
            let ray = Ray::new(shape, train_set, &params, &dir, &pre);
            let armijo = |a: f64, fa: f64| fa.is_finite() && fa <= f + opts.armijo_c * a * slope;
            let first = ray.loss_at(step);
            let accepted = if armijo(step, first) {
                // the first guess may be far too short: grow while the loss keeps falling
                let mut f_step = first;
                for _ in 0..MAX_EXPANSIONS {
                    let longer = step / opts.backtrack_shrink;
                    if longer > MAX_STEP {
                        break;
                    }
                    let f_longer = ray.loss_at(longer);
                    if !(armijo(longer, f_longer) && f_longer < f_step) {
                        break;
                    }
                    step = longer;
                    f_step = f_longer;
                }
                true
            } else {
                loop {
                    step *= opts.backtrack_shrink;
                    if step < MIN_STEP {
                        break false;
                    }
                    if armijo(step, ray.loss_at(step)) {
                        break true;
                    }
                }
            };
            if !accepted {
                if prev_step.is_none() && slope == -gnorm2 {
                    // steepest descent cannot make progress
                    break;
                }
                dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
                prev_step = None;
                continue;
            }
            let next_pre = ray.pre_at(step);
            params.iter_mut().zip(&dir).for_each(|(p, d)| *p += step * d);
            pre = next_pre;
            iteration += 1;
            let (f_new, g_new) = loss_and_gradient_at(shape, &params, &pre, train_set);
            if !f_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
                diverged += 1;
                break;
            }
            let beta = if iteration % reset_every == 0 {
                0.0
            } else {
                let num: f64 = g_new.iter().zip(&g).map(|(n, o)| n * (n - o)).sum();
                (num / gnorm2).max(0.0)
            };
            dir.iter_mut().zip(&g_new).for_each(|(d, gi)| *d = -gi + beta * *d);
            prev_step = if beta == 0.0 { None } else { Some((step, slope)) };
            f = f_new;
            g = g_new;

            if iteration % opts.validation_interval == 0 {
                last_checked = iteration;
                let v = record(iteration, &params, &mut history);
                if v < best_here {
                    best_here = v;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= opts.patience {
                        break;
                    }
                }
            }
        }
        if iteration != last_checked {
            record(iteration, &params, &mut history);
        }
        total_iterations += iteration;
    }

    let (best_loss, best_params) = best.ok_or(Error::Diverged)?;
    Ok(TrainOutcome {
        network: Network::from_flat(shape, &best_params)?,
        best_validation_loss: best_loss,
        history,
        iterations: total_iterations,
        diverged_restarts: diverged,
    })
}

/// Row indices split into training and validation by house.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildingSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub validation_houses: Vec<i64>,
}

/// Shuffles the distinct houses with `seed` and moves whole houses into
/// validation until at least `fraction` of the rows are covered. At least one
/// house always stays in training; with a single house the validation part is
/// empty.
pub fn split_by_building(house_of_row: &[i64], fraction: f64, seed: u64) -> BuildingSplit {
    let mut houses: Vec<i64> = house_of_row.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    houses.shuffle(&mut rng);
    let target = fraction * house_of_row.len() as f64;
    let mut chosen = BTreeSet::new();
    let mut covered = 0usize;
    for &h in houses.iter().take(houses.len().saturating_sub(1)) {
        if covered as f64 >= target {
            break;
        }
        chosen.insert(h);
        covered += house_of_row.iter().filter(|&&x| x == h).count();
    }
    let (validation, train): (Vec<usize>, Vec<usize>) =
        (0..house_of_row.len()).partition(|&i| chosen.contains(&house_of_row[i]));
    BuildingSplit {
        train,
        validation,
        validation_houses: chosen.into_iter().collect(),
    }
}
