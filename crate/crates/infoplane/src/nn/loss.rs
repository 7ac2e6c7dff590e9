//! Training losses, kept as per-example vectors so callers can both average
//! them for optimization and compute standard errors for reporting.

use ndarray::{Array1, Array2, Ix2};

use super::graph::{Arr, GraphOp, Stash};

/// Per-example cross-entropy of integer targets against logits (N, K).
/// Output is the vector of negative log-likelihoods in nats.
pub struct SoftmaxCrossEntropy {
    pub targets: Vec<usize>,
}

impl GraphOp for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let logits = inputs[0].view().into_dimensionality::<Ix2>().unwrap();
        let (n, k) = logits.dim();
        assert_eq!(n, self.targets.len(), "target count mismatch");
        let mut probs = Array2::<f64>::zeros((n, k));
        let mut nll = Array1::<f64>::zeros(n);
        for i in 0..n {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[(i, j)] = e;
                z += e;
            }
            let log_z = z.ln() + max;
            for j in 0..k {
                probs[(i, j)] /= z;
            }
            nll[i] = log_z - logits[(i, self.targets[i])];
        }
        (nll.into_dyn(), vec![probs.into_dyn()])
    }

    fn backward(&self, _inputs: &[&Arr], stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let probs = stash[0].view().into_dimensionality::<Ix2>().unwrap();
        let (n, k) = probs.dim();
        let mut dlogits = Array2::<f64>::zeros((n, k));
        for i in 0..n {
            let gi = grad[i];
            for j in 0..k {
                let indicator = if j == self.targets[i] { 1.0 } else { 0.0 };
                dlogits[(i, j)] = gi * (probs[(i, j)] - indicator);
            }
        }
        vec![Some(dlogits.into_dyn())]
    }
}

/// Per-example mean squared error between two equally shaped tensors whose
/// leading axis is the batch. Output shape is (N,).
pub struct SquaredErrorPerExample;

impl GraphOp for SquaredErrorPerExample {
    fn name(&self) -> &'static str {
        "squared_error"
    }

    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let (p, t) = (inputs[0], inputs[1]);
        assert_eq!(p.shape(), t.shape(), "prediction/target shape mismatch");
        let n = p.shape()[0];
        let d = p.len() / n;
        let pm = p.view().into_shape_with_order((n, d)).unwrap();
        let tm = t.view().into_shape_with_order((n, d)).unwrap();
        let mut out = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                let e = pm[(i, j)] - tm[(i, j)];
                acc += e * e;
            }
            out[i] = acc / d as f64;
        }
        (out.into_dyn(), vec![])
    }

    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let (p, t) = (inputs[0], inputs[1]);
        let n = p.shape()[0];
        let d = p.len() / n;
        let pm = p.view().into_shape_with_order((n, d)).unwrap();
        let tm = t.view().into_shape_with_order((n, d)).unwrap();
        let mut dp = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let gi = grad[i] * 2.0 / d as f64;
            for j in 0..d {
                dp[(i, j)] = gi * (pm[(i, j)] - tm[(i, j)]);
            }
        }
        let dp = dp.into_shape_with_order(p.raw_dim()).unwrap();
        let dt = dp.mapv(|v| -v);
        vec![Some(dp), Some(dt)]
    }
}
