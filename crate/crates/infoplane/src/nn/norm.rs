//! Batch normalization over NCHW, in batch-statistics and running-statistics
//! modes. Running-statistics mode is what makes evaluation forward passes
//! deterministic.

use ndarray::{Array1, Array4, Axis, Ix1, Ix4};

use super::graph::{Arr, GraphOp, Stash};

/// Per-channel mean and variance over (N, H, W).
pub fn batch_stats(x: &Arr) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let x = x.view().into_dimensionality::<Ix4>().expect("4d tensor");
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let ch = x.index_axis(Axis(1), ci);
        let mu = ch.sum() / m;
        let v = ch.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / m;
        mean[ci] = mu;
        var[ci] = v;
    }
    let unbiased = &var * (m / (m - 1.0).max(1.0));
    (mean, var, unbiased)
}

/// Inputs: `[x, gamma, beta]`; normalizes with the batch's own statistics.
pub struct BatchNormTrain {
    pub eps: f64,
}

impl GraphOp for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }

    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let (mean, var, _) = batch_stats(inputs[0]);
        let x = inputs[0].view().into_dimensionality::<Ix4>().unwrap();
        let gamma = inputs[1].view().into_dimensionality::<Ix1>().unwrap();
        let beta = inputs[2].view().into_dimensionality::<Ix1>().unwrap();
        let invstd = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let (n, c, h, w) = x.dim();
        let mut xhat = Array4::<f64>::zeros((n, c, h, w));
        let mut y = Array4::<f64>::zeros((n, c, h, w));
        for ci in 0..c {
            let (mu, is, g, b) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
            let src = x.index_axis(Axis(1), ci);
            let mut xh = xhat.index_axis_mut(Axis(1), ci);
            let mut yy = y.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut xh).and(&mut yy).and(&src).for_each(|xh, yy, &v| {
                let t = (v - mu) * is;
                *xh = t;
                *yy = g * t + b;
            });
        }
        (y.into_dyn(), vec![xhat.into_dyn(), invstd.into_dyn()])
    }

    fn backward(&self, inputs: &[&Arr], stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let gamma = inputs[1].view().into_dimensionality::<Ix1>().unwrap();
        let xhat = stash[0].view().into_dimensionality::<Ix4>().unwrap();
        let invstd = stash[1].view().into_dimensionality::<Ix1>().unwrap();
        let g = grad.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xhat.dim();
        let m = (n * h * w) as f64;

        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        for ci in 0..c {
            let gc = g.index_axis(Axis(1), ci);
            let xh = xhat.index_axis(Axis(1), ci);
            dbeta[ci] = gc.sum();
            dgamma[ci] = ndarray::Zip::from(&gc).and(&xh).fold(0.0, |acc, &a, &b| acc + a * b);
        }
        // dx = gamma·invstd/m · (m·g − Σg − xhat·Σ(g·xhat))
        for ci in 0..c {
            let sum_g = dbeta[ci];
            let sum_gx = dgamma[ci];
            let gc = g.index_axis(Axis(1), ci);
            let xh = xhat.index_axis(Axis(1), ci);
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            let scale = gamma[ci] * invstd[ci] / m;
            ndarray::Zip::from(&mut dxc).and(&gc).and(&xh).for_each(|d, &gv, &xv| {
                *d = scale * (m * gv - sum_g - xv * sum_gx);
            });
        }
        vec![Some(dx.into_dyn()), Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
    }
}

/// Inputs: `[x, gamma, beta]`; normalizes with fixed running statistics.
pub struct BatchNormEval {
    pub eps: f64,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl GraphOp for BatchNormEval {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = inputs[0].view().into_dimensionality::<Ix4>().unwrap();
        let gamma = inputs[1].view().into_dimensionality::<Ix1>().unwrap();
        let beta = inputs[2].view().into_dimensionality::<Ix1>().unwrap();
        let (n, c, h, w) = x.dim();
        let mut y = Array4::<f64>::zeros((n, c, h, w));
        for ci in 0..c {
            let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (mu, g, b) = (self.running_mean[ci], gamma[ci], beta[ci]);
            let src = x.index_axis(Axis(1), ci);
            let mut dst = y.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &v| {
                *d = g * (v - mu) * is + b;
            });
        }
        (y.into_dyn(), vec![])
    }

    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let x = inputs[0].view().into_dimensionality::<Ix4>().unwrap();
        let gamma = inputs[1].view().into_dimensionality::<Ix1>().unwrap();
        let g = grad.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let mu = self.running_mean[ci];
            let gc = g.index_axis(Axis(1), ci);
            let xc = x.index_axis(Axis(1), ci);
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            dbeta[ci] = gc.sum();
            dgamma[ci] = ndarray::Zip::from(&gc)
                .and(&xc)
                .fold(0.0, |acc, &gv, &xv| acc + gv * (xv - mu) * is);
            let scale = gamma[ci] * is;
            ndarray::Zip::from(&mut dxc).and(&gc).for_each(|d, &gv| *d = gv * scale);
        }
        vec![Some(dx.into_dyn()), Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
    }
}
