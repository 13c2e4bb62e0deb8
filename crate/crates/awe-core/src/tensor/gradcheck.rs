//! Central finite-difference verification of analytic gradients.
//!
//! All checks run in `f64` with `eps = 1e-5`; an op passes when the largest
//! guarded relative error over every input component stays below `1e-4`.

use super::graph::{Graph, Mode, NodeId};
use super::store::ParamStore;
use super::tensor::{Tensor, TensorResult};
use crate::rng::SeededRng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with a floor: components that are both below 1e-6 count as
/// matching zero, since central differences cannot resolve them.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Check the gradient of a scalar-valued graph with respect to explicit
/// variable leaves. `build` must construct the same computation each call
/// (graphs are given a fixed dropout seed, so masks repeat).
pub fn check_vars<B>(inputs: &[Tensor<f64>], build: B) -> TensorResult<f64>
where
    B: Fn(&mut Graph<'_, f64>, &[NodeId]) -> TensorResult<NodeId>,
{
    let store = ParamStore::<f64>::new();
    let eval = |inputs: &[Tensor<f64>]| -> TensorResult<f64> {
        let mut g = Graph::with_dropout_seed(&store, Mode::Train, 7);
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|t| g.var(t.clone()))
            .collect::<TensorResult<_>>()?;
        let loss = build(&mut g, &ids)?;
        Ok(g.value_data(loss)[0])
    };

    // Analytic gradients.
    let mut g = Graph::with_dropout_seed(&store, Mode::Train, 7);
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.var(t.clone()))
        .collect::<TensorResult<_>>()?;
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[k].data_mut()[e] = orig + FD_EPS;
            let up = eval(&probe)?;
            probe[k].data_mut()[e] = orig - FD_EPS;
            let down = eval(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[k].get(e).copied().unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

/// Check gradients with respect to every trainable parameter in `store`.
/// Used for probing losses through whole encoders.
pub fn check_params<B>(store: &mut ParamStore<f64>, build: B) -> TensorResult<f64>
where
    B: Fn(&mut Graph<'_, f64>) -> TensorResult<NodeId>,
{
    check_params_mode(store, Mode::Train, build)
}

pub fn check_params_mode<B>(
    store: &mut ParamStore<f64>,
    mode: Mode,
    build: B,
) -> TensorResult<f64>
where
    B: Fn(&mut Graph<'_, f64>) -> TensorResult<NodeId>,
{
    // Analytic pass.
    let mut g = Graph::with_dropout_seed(store, mode, 11);
    let loss = build(&mut g)?;
    g.backward(loss)?;
    let grads = g.take_param_grads();
    drop(g);
    let mut analytic = vec![Vec::new(); store.len()];
    for (id, grad) in grads {
        let slot = &mut analytic[id.0];
        if slot.is_empty() {
            *slot = grad;
        } else {
            for (s, v) in slot.iter_mut().zip(grad) {
                *s += v;
            }
        }
    }

    let eval = |store: &ParamStore<f64>| -> TensorResult<f64> {
        let mut g = Graph::with_dropout_seed(store, mode, 11);
        let loss = build(&mut g)?;
        Ok(g.value_data(loss)[0])
    };

    let mut worst = 0.0f64;
    for id in store.trainable_ids() {
        for e in 0..store.get(id).numel() {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + FD_EPS;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[e] = orig - FD_EPS;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[id.0].get(e).copied().unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

/// Random tensor with entries bounded away from zero, so kinked ops (ReLU)
/// are not probed at their non-differentiable point.
pub fn rand_tensor(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let mag = rng.uniform_in(0.2, 1.5);
            if rng.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

/// Strictly positive random tensor (for sqrt and similar).
pub fn rand_positive(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| rng.uniform_in(0.3, 2.0))
        .collect();
    Tensor::from_vec(&[rows, cols], data).unwrap()
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn record(&mut self, name: &str, err: f64) {
        self.checks.push(OpCheck {
            name: name.to_owned(),
            max_rel_err: err,
        });
    }

    pub fn worst(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < FD_TOLERANCE
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checks.extend(other.checks);
    }
}

/// Finite-difference suite over every differentiable core op, three random
/// shapes each.
pub fn op_suite(seed: u64) -> TensorResult<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let mut report = GradCheckReport::default();
    let shapes = |rng: &mut SeededRng| -> Vec<(usize, usize)> {
        (0..3)
            .map(|_| (rng.range_inclusive(1, 4), rng.range_inclusive(1, 4)))
            .collect()
    };

    // Elementwise binary ops.
    for (name, f) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("div", 3),
    ] {
        let mut worst = 0.0f64;
        for (r, c) in shapes(&mut rng) {
            let a = rand_tensor(r, c, &mut rng);
            let b = if name == "div" {
                rand_positive(r, c, &mut rng)
            } else {
                rand_tensor(r, c, &mut rng)
            };
            let err = check_vars(&[a, b], |g, ids| {
                let y = match f {
                    0 => g.add(ids[0], ids[1])?,
                    1 => g.sub(ids[0], ids[1])?,
                    2 => g.mul(ids[0], ids[1])?,
                    _ => g.div(ids[0], ids[1])?,
                };
                let y2 = g.mul(y, y)?; // make the loss curvature nontrivial
                g.sum(y2)
            })?;
            worst = worst.max(err);
        }
        report.record(name, worst);
    }

    // Scalar ops.
    let mut worst = 0.0f64;
    for (r, c) in shapes(&mut rng) {
        let a = rand_tensor(r, c, &mut rng);
        let err = check_vars(&[a], |g, ids| {
            let y = g.add_scalar(ids[0], 0.7)?;
            let y = g.mul_scalar(y, -1.3)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("add_scalar/mul_scalar", worst);

    // Matmul.
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let (m, k, n) = (
            rng.range_inclusive(1, 4),
            rng.range_inclusive(1, 4),
            rng.range_inclusive(1, 4),
        );
        let a = rand_tensor(m, k, &mut rng);
        let b = rand_tensor(k, n, &mut rng);
        let err = check_vars(&[a, b], |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("matmul", worst);

    // add_bias.
    let mut worst = 0.0f64;
    for (r, c) in shapes(&mut rng) {
        let x = rand_tensor(r, c, &mut rng);
        let b = rand_tensor(1, c, &mut rng);
        let err = check_vars(&[x, b], |g, ids| {
            let y = g.add_bias(ids[0], ids[1])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("add_bias", worst);

    // Unary activations.
    for name in ["relu", "sigmoid", "tanh", "sqrt"] {
        let mut worst = 0.0f64;
        for (r, c) in shapes(&mut rng) {
            let x = if name == "sqrt" {
                rand_positive(r, c, &mut rng)
            } else {
                rand_tensor(r, c, &mut rng)
            };
            let err = check_vars(&[x], |g, ids| {
                let y = match name {
                    "relu" => g.relu(ids[0])?,
                    "sigmoid" => g.sigmoid(ids[0])?,
                    "tanh" => g.tanh(ids[0])?,
                    _ => g.sqrt(ids[0])?,
                };
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            })?;
            worst = worst.max(err);
        }
        report.record(name, worst);
    }

    // log_softmax.
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let (r, c) = (rng.range_inclusive(1, 3), rng.range_inclusive(2, 5));
        let x = rand_tensor(r, c, &mut rng);
        let w = rand_tensor(r, c, &mut rng);
        let err = check_vars(&[x, w], |g, ids| {
            let y = g.log_softmax(ids[0])?;
            let y = g.mul(y, ids[1])?;
            g.sum(y)
        })?;
        worst = worst.max(err);
    }
    report.record("log_softmax", worst);

    // Dropout (train mode, fixed counter-based mask).
    let mut worst = 0.0f64;
    for (r, c) in shapes(&mut rng) {
        let x = rand_tensor(r, c, &mut rng);
        let err = check_vars(&[x], |g, ids| {
            let y = g.dropout(ids[0], 0.4)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("dropout", worst);

    // Structural ops.
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let (r, c) = (rng.range_inclusive(2, 5), rng.range_inclusive(1, 4));
        let x = rand_tensor(r, c, &mut rng);
        let err = check_vars(&[x], |g, ids| {
            let y = g.mean_rows(ids[0])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("mean_over_time", worst);

    let mut worst = 0.0f64;
    for _ in 0..3 {
        let c = rng.range_inclusive(1, 3);
        let a = rand_tensor(rng.range_inclusive(1, 3), c, &mut rng);
        let b = rand_tensor(rng.range_inclusive(1, 3), c, &mut rng);
        let err = check_vars(&[a, b], |g, ids| {
            let y = g.concat_rows(&[ids[0], ids[1], ids[0]])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("concat_rows", worst);

    let mut worst = 0.0f64;
    for _ in 0..3 {
        let r = rng.range_inclusive(1, 3);
        let a = rand_tensor(r, rng.range_inclusive(1, 3), &mut rng);
        let b = rand_tensor(r, rng.range_inclusive(1, 3), &mut rng);
        let err = check_vars(&[a, b], |g, ids| {
            let y = g.concat_cols(&[ids[0], ids[1]])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("concat_cols", worst);

    let mut worst = 0.0f64;
    for _ in 0..3 {
        let r = rng.range_inclusive(3, 6);
        let c = rng.range_inclusive(1, 3);
        let x = rand_tensor(r, c, &mut rng);
        let start = rng.below(r - 1);
        let err = check_vars(&[x], |g, ids| {
            let y = g.slice_rows(ids[0], start, start + 2)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("slice_rows", worst);

    let mut worst = 0.0f64;
    for _ in 0..3 {
        let r = rng.range_inclusive(2, 5);
        let c = rng.range_inclusive(1, 3);
        let x = rand_tensor(r, c, &mut rng);
        let idx = vec![rng.below(r), 0, rng.below(r)];
        let err = check_vars(&[x], |g, ids| {
            let y = g.gather_rows(ids[0], &idx)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("gather_rows", worst);

    let mut worst = 0.0f64;
    for _ in 0..3 {
        let r = rng.range_inclusive(2, 4);
        let c = rng.range_inclusive(2, 4);
        let x = rand_tensor(r, c, &mut rng);
        let idx = vec![(rng.below(r), rng.below(c)), (0, 0)];
        let err = check_vars(&[x], |g, ids| {
            let y = g.gather_entries(ids[0], &idx)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("gather_entries", worst);

    // conv1d composite (pad + unfold + matmul + bias).
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let t = rng.range_inclusive(2, 6);
        let cin = rng.range_inclusive(1, 3);
        let cout = rng.range_inclusive(1, 3);
        let width = rng.range_inclusive(2, 4);
        let x = rand_tensor(t, cin, &mut rng);
        let w = rand_tensor(width * cin, cout, &mut rng);
        let b = rand_tensor(1, cout, &mut rng);
        let err = check_vars(&[x, w, b], |g, ids| {
            let y = g.conv1d(ids[0], ids[1], ids[2], width)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("conv1d", worst);

    // Batch norm, train and eval modes, through parameters. The probe input
    // alternates signs down each column so the batch variance stays well away
    // from zero; otherwise the 1/sigma^3 curvature swamps the central
    // difference.
    for mode_name in ["batch_norm_train", "batch_norm_eval"] {
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let rows = rng.range_inclusive(3, 6);
            let cols = rng.range_inclusive(1, 3);
            let mut store = ParamStore::<f64>::new();
            let spread = {
                let data = (0..rows * cols)
                    .map(|i| {
                        let sign = if (i / cols) % 2 == 0 { 1.0 } else { -1.0 };
                        sign * rng.uniform_in(0.5, 1.5)
                    })
                    .collect();
                Tensor::from_vec(&[rows, cols], data).unwrap()
            };
            let x = store.add("x", spread, true);
            let gamma = store.add("gamma", rand_positive(1, cols, &mut rng), true);
            let beta = store.add("beta", rand_tensor(1, cols, &mut rng), true);
            let rm = store.add("rm", rand_tensor(1, cols, &mut rng), false);
            let rv = store.add("rv", rand_positive(1, cols, &mut rng), false);
            let mode = if mode_name == "batch_norm_train" {
                Mode::Train
            } else {
                Mode::Eval
            };
            let err = check_params_mode(&mut store, mode, |g| {
                let xb = g.param(x);
                let gb = g.param(gamma);
                let bb = g.param(beta);
                let y = g.batch_norm(xb, gb, bb, rm, rv, 0.1, 1e-5)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            })?;
            worst = worst.max(err);
        }
        report.record(mode_name, worst);
    }

    // Sum and pad.
    let mut worst = 0.0f64;
    for (r, c) in shapes(&mut rng) {
        let x = rand_tensor(r, c, &mut rng);
        let err = check_vars(&[x], |g, ids| {
            let y = g.pad_rows_top(ids[0], 2)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        })?;
        worst = worst.max(err);
    }
    report.record("pad_rows_top/sum", worst);

    // BCE with logits.
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let n = rng.range_inclusive(2, 6);
        let z = rand_tensor(1, n, &mut rng);
        let target: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 })
            .collect();
        let err = check_vars(&[z], |g, ids| g.bce_with_logits(ids[0], &target))?;
        worst = worst.max(err);
    }
    report.record("bce_with_logits", worst);

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes() {
        let report = op_suite(20240817).unwrap();
        for check in &report.checks {
            assert!(
                check.max_rel_err < FD_TOLERANCE,
                "{} failed with {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn composite_small_graph_passes() {
        let mut rng = SeededRng::new(5);
        let a = rand_tensor(2, 3, &mut rng);
        let b = rand_tensor(3, 2, &mut rng);
        let err = check_vars(&[a, b], |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            let y = g.tanh(y)?;
            let y = g.relu(y)?;
            let s = g.sigmoid(y)?;
            g.sum(s)
        })
        .unwrap();
        assert!(err < FD_TOLERANCE, "rel err {err}");
    }
}
