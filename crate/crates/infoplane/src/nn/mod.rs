//! Minimal eager autodiff substrate used by the encoder and the decoders.
//!
//! Everything is f64 on the CPU. Parallel sections reduce in a fixed order,
//! so repeated runs of the same seeded computation are bit-identical.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod params;

pub use conv::{Conv2d, ConvTranspose2d, Linear, Padding};
pub use graph::{Arr, Gradients, Graph, GraphOp, Stash, Var};
pub use loss::{SoftmaxCrossEntropy, SquaredErrorPerExample};
pub use norm::{batch_stats, BatchNormEval, BatchNormTrain};
pub use optim::{cosine_lr, Adam, Sgd};
pub use params::{hex_string, Initializer, Leaves, ParamSet};

use ndarray::Array1;

impl Graph {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize), pad: Padding) -> Var {
        self.apply(Conv2d { stride, pad }, &[x, w, b])
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        crop: Padding,
    ) -> Var {
        self.apply(ConvTranspose2d { stride, crop }, &[x, w, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.apply(Linear, &[x, w, b])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.apply(ops::LeakyRelu { slope }, &[x])
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.apply(ops::Elu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.apply(ops::Sigmoid, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.apply(ops::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.apply(ops::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.apply(ops::Scale { factor }, &[x])
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.apply(ops::ClampMin { floor }, &[x])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Var {
        self.apply(ops::SliceChannels { start, end }, &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        self.apply(ops::ConcatChannels, &[a, b])
    }

    pub fn zero_pad2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
        self.apply(ops::ZeroPad2d { top, bottom, left, right }, &[x])
    }

    pub fn crop2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
        self.apply(ops::Crop2d { top, bottom, left, right }, &[x])
    }

    /// Shift spatial content one row down; the first row becomes zero.
    pub fn shift_down(&mut self, x: Var) -> Var {
        let padded = self.zero_pad2d(x, 1, 0, 0, 0);
        self.crop2d(padded, 0, 1, 0, 0)
    }

    /// Shift spatial content one column right; the first column becomes zero.
    pub fn shift_right(&mut self, x: Var) -> Var {
        let padded = self.zero_pad2d(x, 0, 0, 1, 0);
        self.crop2d(padded, 0, 0, 0, 1)
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize) -> Var {
        self.apply(ops::AvgPool2d { kernel }, &[x])
    }

    pub fn nearest_upsample(&mut self, x: Var, factor: usize) -> Var {
        self.apply(ops::NearestUpsample { factor }, &[x])
    }

    pub fn depth_to_space(&mut self, x: Var, factor: usize) -> Var {
        self.apply(ops::DepthToSpace { factor }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        self.apply(ops::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn broadcast_spatial(&mut self, x: Var, height: usize, width: usize) -> Var {
        self.apply(ops::BroadcastSpatial { height, width }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.apply(ops::MeanAll, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        self.apply(SoftmaxCrossEntropy { targets }, &[logits])
    }

    pub fn squared_error(&mut self, pred: Var, target: Var) -> Var {
        self.apply(SquaredErrorPerExample, &[pred, target])
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        self.apply(BatchNormTrain { eps }, &[x, gamma, beta])
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running_mean: Array1<f64>,
        running_var: Array1<f64>,
    ) -> Var {
        self.apply(BatchNormEval { eps, running_mean, running_var }, &[x, gamma, beta])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Array::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Gradient-check a single-input op chain through the tape.
    fn check_unary(shape: &[usize], tol: f64, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(&mut rng, shape);

        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let y = build(&mut g, x);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("grad").clone();

        let f = |xv: &Arr| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone(), false);
            let y = build(&mut g, x);
            let loss = g.mean_all(y);
            g.value(loss).first().copied().unwrap()
        };
        let mut numeric = Arr::zeros(IxDyn(shape));
        let step = 1e-6;
        let mut xv = x0.clone();
        for i in 0..x0.len() {
            let base = x0.as_slice().unwrap()[i];
            xv.as_slice_mut().unwrap()[i] = base + step;
            let hi = f(&xv);
            xv.as_slice_mut().unwrap()[i] = base - step;
            let lo = f(&xv);
            xv.as_slice_mut().unwrap()[i] = base;
            numeric.as_slice_mut().unwrap()[i] = (hi - lo) / (2.0 * step);
        }
        let err = gradcheck::max_rel_err(&analytic, &numeric, 1e-3);
        assert!(err < tol, "gradient mismatch: {err}");
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(&[2, 3, 4, 4], 1e-6, |g, x| g.leaky_relu(x, 0.01));
        check_unary(&[2, 3, 4, 4], 1e-6, |g, x| g.elu(x));
        check_unary(&[2, 3, 4, 4], 1e-6, |g, x| g.sigmoid(x));
        check_unary(&[2, 6, 4, 4], 1e-6, |g, x| {
            let a = g.slice_channels(x, 0, 3);
            let b = g.slice_channels(x, 3, 6);
            let s = g.sigmoid(b);
            g.mul(a, s)
        });
    }

    #[test]
    fn shape_op_gradients() {
        check_unary(&[2, 3, 4, 4], 1e-6, |g, x| g.avg_pool2d(x, 2));
        check_unary(&[2, 3, 4, 4], 1e-6, |g, x| g.nearest_upsample(x, 2));
        check_unary(&[2, 8, 3, 3], 1e-6, |g, x| g.depth_to_space(x, 2));
        check_unary(&[2, 3, 4, 4], 1e-6, |g, x| g.zero_pad2d(x, 1, 0, 2, 1));
        check_unary(&[2, 3, 4, 4], 1e-6, |g, x| g.crop2d(x, 1, 1, 0, 2));
        check_unary(&[2, 3, 4, 4], 1e-6, |g, x| g.shift_down(x));
        check_unary(&[2, 3, 4, 4], 1e-6, |g, x| g.shift_right(x));
        check_unary(&[2, 12], 1e-6, |g, x| g.broadcast_spatial(x, 3, 5));
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = randn(&mut rng, &[2, 3, 6, 6]);
        let w0 = randn(&mut rng, &[4, 3, 2, 3]);
        let b0 = randn(&mut rng, &[4]);

        let run = |xv: &Arr, wv: &Arr, bv: &Arr, want_grads: bool| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone(), want_grads);
            let w = g.leaf(wv.clone(), want_grads);
            let b = g.leaf(bv.clone(), want_grads);
            let y = g.conv2d(x, w, b, (2, 2), Padding { top: 1, bottom: 0, left: 1, right: 1 });
            let loss = g.mean_all(y);
            (g.value(loss).first().copied().unwrap(), g, x, w, b, loss)
        };

        let (_, g, x, w, b, loss) = run(&x0, &w0, &b0, true);
        let grads = g.backward(loss);
        let (ax, aw, ab) = (
            grads.get(x).unwrap().clone(),
            grads.get(w).unwrap().clone(),
            grads.get(b).unwrap().clone(),
        );

        let step = 1e-6;
        for (target, analytic) in [(0usize, &ax), (1, &aw), (2, &ab)] {
            let base = [&x0, &w0, &b0];
            let mut numeric = Arr::zeros(base[target].raw_dim());
            for i in 0..base[target].len() {
                let pert = |delta: f64| {
                    let mut vals = [x0.clone(), w0.clone(), b0.clone()];
                    vals[target].as_slice_mut().unwrap()[i] += delta;
                    run(&vals[0], &vals[1], &vals[2], false).0
                };
                numeric.as_slice_mut().unwrap()[i] = (pert(step) - pert(-step)) / (2.0 * step);
            }
            let err = gradcheck::max_rel_err(analytic, &numeric, 1e-3);
            assert!(err < 1e-6, "conv grad mismatch on input {target}: {err}");
        }
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = randn(&mut rng, &[2, 3, 3, 3]);
        let w0 = randn(&mut rng, &[3, 4, 2, 3]);
        let b0 = randn(&mut rng, &[4]);

        let run = |xv: &Arr, wv: &Arr, bv: &Arr, want_grads: bool| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone(), want_grads);
            let w = g.leaf(wv.clone(), want_grads);
            let b = g.leaf(bv.clone(), want_grads);
            let y = g.conv_transpose2d(x, w, b, (2, 2), Padding { top: 0, bottom: 0, left: 1, right: 0 });
            let loss = g.mean_all(y);
            (g.value(loss).first().copied().unwrap(), g, x, w, b, loss)
        };

        let (_, g, x, w, b, loss) = run(&x0, &w0, &b0, true);
        let grads = g.backward(loss);
        let (ax, aw, ab) = (
            grads.get(x).unwrap().clone(),
            grads.get(w).unwrap().clone(),
            grads.get(b).unwrap().clone(),
        );

        let step = 1e-6;
        for (target, analytic) in [(0usize, &ax), (1, &aw), (2, &ab)] {
            let base = [&x0, &w0, &b0];
            let mut numeric = Arr::zeros(base[target].raw_dim());
            for i in 0..base[target].len() {
                let pert = |delta: f64| {
                    let mut vals = [x0.clone(), w0.clone(), b0.clone()];
                    vals[target].as_slice_mut().unwrap()[i] += delta;
                    run(&vals[0], &vals[1], &vals[2], false).0
                };
                numeric.as_slice_mut().unwrap()[i] = (pert(step) - pert(-step)) / (2.0 * step);
            }
            let err = gradcheck::max_rel_err(analytic, &numeric, 1e-3);
            assert!(err < 1e-6, "conv_transpose grad mismatch on input {target}: {err}");
        }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[1, 2, 5, 5]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        let y = g.conv2d(xv, wv, bv, (1, 1), Padding::symmetric(1));
        let y = g.value(y).clone();

        // naive direct convolution
        let xs = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let ws = w.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for co in 0..3 {
            for oy in 0..5usize {
                for ox in 0..5usize {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                    acc += xs[(0, ci, iy as usize, ix as usize)]
                                        * ws[(co, ci, ky, kx)];
                                }
                            }
                        }
                    }
                    let got = y[[0, co, oy, ox]];
                    assert!((got - acc).abs() < 1e-12, "conv mismatch at {co},{oy},{ox}");
                }
            }
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = randn(&mut rng, &[3, 2, 4, 4]);
        let g0 = randn(&mut rng, &[2]);
        let b0 = randn(&mut rng, &[2]);

        let run = |xv: &Arr, gv: &Arr, bv: &Arr, want: bool| {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone(), want);
            let ga = g.leaf(gv.clone(), want);
            let be = g.leaf(bv.clone(), want);
            let y = g.batch_norm_train(x, ga, be, 1e-5);
            let sq = g.mul(y, y);
            let loss = g.mean_all(sq);
            (g.value(loss).first().copied().unwrap(), g, x, ga, be, loss)
        };

        let (_, g, x, ga, be, loss) = run(&x0, &g0, &b0, true);
        let grads = g.backward(loss);
        let analytic = [
            grads.get(x).unwrap().clone(),
            grads.get(ga).unwrap().clone(),
            grads.get(be).unwrap().clone(),
        ];
        let step = 1e-6;
        for target in 0..3 {
            let base = [&x0, &g0, &b0];
            let mut numeric = Arr::zeros(base[target].raw_dim());
            for i in 0..base[target].len() {
                let pert = |delta: f64| {
                    let mut vals = [x0.clone(), g0.clone(), b0.clone()];
                    vals[target].as_slice_mut().unwrap()[i] += delta;
                    run(&vals[0], &vals[1], &vals[2], false).0
                };
                numeric.as_slice_mut().unwrap()[i] = (pert(step) - pert(-step)) / (2.0 * step);
            }
            let err = gradcheck::max_rel_err(&analytic[target], &numeric, 1e-3);
            assert!(err < 1e-5, "bn grad mismatch on input {target}: {err}");
        }
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        // uniform logits over 10 classes -> all losses ln 10
        let mut g = Graph::new();
        let logits = g.leaf(Arr::zeros(IxDyn(&[4, 10])), true);
        let nll = g.softmax_cross_entropy(logits, vec![0, 3, 5, 9]);
        for v in g.value(nll).iter() {
            assert!((v - 10.0f64.ln()).abs() < 1e-12);
        }
        let loss = g.mean_all(nll);
        let grads = g.backward(loss);
        let dl = grads.get(logits).unwrap();
        // rows sum to zero
        let dl2 = dl.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for row in dl2.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_momentum_and_cosine_schedule() {
        assert!((cosine_lr(0.1, 0, 200) - 0.1).abs() < 1e-15);
        assert!((cosine_lr(0.1, 100, 200) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 200, 200).abs() < 1e-15);

        let mut params = ParamSet::new();
        params.add_param("w", Arr::from_elem(IxDyn(&[1]), 1.0));
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("w".to_string(), Arr::from_elem(IxDyn(&[1]), 0.5));
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut params, &grads);
        assert!((params.param("w")[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        opt.step(&mut params, &grads);
        // velocity = 0.9*0.5 + 0.5 = 0.95
        assert!((params.param("w")[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_digest_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut params = ParamSet::new();
        params.add_param("layer.w", randn(&mut rng, &[3, 2]));
        params.add_buffer("layer.running_mean", randn(&mut rng, &[2]));
        params.save(&path, "cfg-digest").unwrap();

        let loaded = ParamSet::load(&path, "cfg-digest").unwrap();
        assert_eq!(loaded.digest(), params.digest());

        let err = ParamSet::load(&path, "other-digest").unwrap_err();
        assert!(matches!(err, crate::error::Error::DigestMismatch { .. }));
    }
}
