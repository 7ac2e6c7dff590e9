//! Elementwise and shape ops.

use ndarray::{s, Array4, Axis, Ix2, Ix4, IxDyn};

use super::graph::{Arr, GraphOp, Stash};

pub struct LeakyRelu {
    pub slope: f64,
}

impl GraphOp for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let a = self.slope;
        (inputs[0].mapv(|x| if x > 0.0 { x } else { a * x }), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let a = self.slope;
        let mut g = grad.clone();
        g.zip_mut_with(inputs[0], |gi, &x| {
            if x <= 0.0 {
                *gi *= a;
            }
        });
        vec![Some(g)]
    }
}

pub struct Elu;

impl GraphOp for Elu {
    fn name(&self) -> &'static str {
        "elu"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        (
            inputs[0].mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 }),
            vec![],
        )
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let mut g = grad.clone();
        g.zip_mut_with(inputs[0], |gi, &x| {
            if x <= 0.0 {
                *gi *= x.exp();
            }
        });
        vec![Some(g)]
    }
}

pub struct Sigmoid;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GraphOp for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let y = inputs[0].mapv(sigmoid);
        (y.clone(), vec![y])
    }
    fn backward(&self, _inputs: &[&Arr], stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let y = &stash[0];
        let mut g = grad.clone();
        g.zip_mut_with(y, |gi, &s| *gi *= s * (1.0 - s));
        vec![Some(g)]
    }
}

pub struct Add;

impl GraphOp for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        (inputs[0] + inputs[1], vec![])
    }
    fn backward(&self, _inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

pub struct Mul;

impl GraphOp for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        (inputs[0] * inputs[1], vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        vec![Some(grad * inputs[1]), Some(grad * inputs[0])]
    }
}

pub struct Scale {
    pub factor: f64,
}

impl GraphOp for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        (inputs[0] * self.factor, vec![])
    }
    fn backward(&self, _inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        vec![Some(grad * self.factor)]
    }
}

pub struct ClampMin {
    pub floor: f64,
}

impl GraphOp for ClampMin {
    fn name(&self) -> &'static str {
        "clamp_min"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        (inputs[0].mapv(|x| x.max(self.floor)), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let mut g = grad.clone();
        g.zip_mut_with(inputs[0], |gi, &x| {
            if x < self.floor {
                *gi = 0.0;
            }
        });
        vec![Some(g)]
    }
}

fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("4d tensor")
}

/// Channel slice `[start, end)` of an NCHW tensor.
pub struct SliceChannels {
    pub start: usize,
    pub end: usize,
}

impl GraphOp for SliceChannels {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = as4(inputs[0]);
        let y = x.slice(s![.., self.start..self.end, .., ..]).to_owned();
        (y.into_dyn(), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let mut dx = Array4::<f64>::zeros(as4(inputs[0]).raw_dim());
        dx.slice_mut(s![.., self.start..self.end, .., ..])
            .assign(&as4(grad));
        vec![Some(dx.into_dyn())]
    }
}

pub struct ConcatChannels;

impl GraphOp for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let y = ndarray::concatenate(Axis(1), &[as4(inputs[0]), as4(inputs[1])])
            .expect("concat shapes");
        (y.into_dyn(), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let c0 = inputs[0].shape()[1];
        let g = as4(grad);
        let g0 = g.slice(s![.., ..c0, .., ..]).to_owned();
        let g1 = g.slice(s![.., c0.., .., ..]).to_owned();
        vec![Some(g0.into_dyn()), Some(g1.into_dyn())]
    }
}

/// Zero padding of the two spatial axes of NCHW: (top, bottom, left, right).
pub struct ZeroPad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl GraphOp for ZeroPad2d {
    fn name(&self) -> &'static str {
        "zero_pad2d"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = as4(inputs[0]);
        let (n, c, h, w) = x.dim();
        let mut y = Array4::<f64>::zeros((n, c, h + self.top + self.bottom, w + self.left + self.right));
        y.slice_mut(s![.., .., self.top..self.top + h, self.left..self.left + w])
            .assign(&x);
        (y.into_dyn(), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let (_, _, h, w) = as4(inputs[0]).dim();
        let g = as4(grad);
        let dx = g
            .slice(s![.., .., self.top..self.top + h, self.left..self.left + w])
            .to_owned();
        vec![Some(dx.into_dyn())]
    }
}

/// Crop the two spatial axes of NCHW: drop (top, bottom, left, right).
pub struct Crop2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl GraphOp for Crop2d {
    fn name(&self) -> &'static str {
        "crop2d"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = as4(inputs[0]);
        let (_, _, h, w) = x.dim();
        let y = x
            .slice(s![.., .., self.top..h - self.bottom, self.left..w - self.right])
            .to_owned();
        (y.into_dyn(), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let x = as4(inputs[0]);
        let (_, _, h, w) = x.dim();
        let mut dx = Array4::<f64>::zeros(x.raw_dim());
        dx.slice_mut(s![.., .., self.top..h - self.bottom, self.left..w - self.right])
            .assign(&as4(grad));
        vec![Some(dx.into_dyn())]
    }
}

/// Non-overlapping average pooling with square kernel = stride.
pub struct AvgPool2d {
    pub kernel: usize,
}

impl GraphOp for AvgPool2d {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = as4(inputs[0]);
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        assert!(h % k == 0 && w % k == 0, "pool kernel must divide spatial dims");
        let (ho, wo) = (h / k, w / k);
        let mut y = Array4::<f64>::zeros((n, c, ho, wo));
        let inv = 1.0 / (k * k) as f64;
        for dy in 0..k {
            for dx in 0..k {
                y += &x.slice(s![.., .., dy..;k, dx..;k]);
            }
        }
        y *= inv;
        (y.into_dyn(), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let x = as4(inputs[0]);
        let k = self.kernel;
        let inv = 1.0 / (k * k) as f64;
        let g = as4(grad);
        let mut dx = Array4::<f64>::zeros(x.raw_dim());
        for dy in 0..k {
            for dx_ in 0..k {
                let mut v = dx.slice_mut(s![.., .., dy..;k, dx_..;k]);
                v += &g;
            }
        }
        dx *= inv;
        vec![Some(dx.into_dyn())]
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub struct NearestUpsample {
    pub factor: usize,
}

impl GraphOp for NearestUpsample {
    fn name(&self) -> &'static str {
        "nearest_upsample"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = as4(inputs[0]);
        let (n, c, h, w) = x.dim();
        let r = self.factor;
        let mut y = Array4::<f64>::zeros((n, c, h * r, w * r));
        for dy in 0..r {
            for dx in 0..r {
                y.slice_mut(s![.., .., dy..;r, dx..;r]).assign(&x);
            }
        }
        (y.into_dyn(), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let x = as4(inputs[0]);
        let r = self.factor;
        let g = as4(grad);
        let mut dx = Array4::<f64>::zeros(x.raw_dim());
        for dy in 0..r {
            for dx_ in 0..r {
                dx += &g.slice(s![.., .., dy..;r, dx_..;r]);
            }
        }
        vec![Some(dx.into_dyn())]
    }
}

/// Depth-to-space rearrangement (sub-pixel shuffle) with factor `r`.
///
/// Output pixel (c, r·i + a, r·j + b) equals input channel `c·r² + a·r + b`
/// at (i, j).
pub struct DepthToSpace {
    pub factor: usize,
}

impl GraphOp for DepthToSpace {
    fn name(&self) -> &'static str {
        "depth_to_space"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = as4(inputs[0]);
        let (n, c, h, w) = x.dim();
        let r = self.factor;
        assert!(c % (r * r) == 0, "channels must be divisible by r^2");
        let co = c / (r * r);
        let mut y = Array4::<f64>::zeros((n, co, h * r, w * r));
        for cc in 0..co {
            for a in 0..r {
                for b in 0..r {
                    y.slice_mut(s![.., cc, a..;r, b..;r])
                        .assign(&x.slice(s![.., cc * r * r + a * r + b, .., ..]));
                }
            }
        }
        (y.into_dyn(), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let x = as4(inputs[0]);
        let (_, c, _, _) = x.dim();
        let r = self.factor;
        let co = c / (r * r);
        let g = as4(grad);
        let mut dx = Array4::<f64>::zeros(x.raw_dim());
        for cc in 0..co {
            for a in 0..r {
                for b in 0..r {
                    dx.slice_mut(s![.., cc * r * r + a * r + b, .., ..])
                        .assign(&g.slice(s![.., cc, a..;r, b..;r]));
                }
            }
        }
        vec![Some(dx.into_dyn())]
    }
}

pub struct Reshape {
    pub shape: Vec<usize>,
}

impl GraphOp for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let y = inputs[0]
            .to_owned()
            .into_shape_with_order(IxDyn(&self.shape))
            .expect("reshape size");
        (y, vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let dx = grad
            .to_owned()
            .into_shape_with_order(inputs[0].raw_dim())
            .expect("reshape size");
        vec![Some(dx)]
    }
}

/// Broadcast an (N, C) matrix over the spatial dims to (N, C, H, W).
pub struct BroadcastSpatial {
    pub height: usize,
    pub width: usize,
}

impl GraphOp for BroadcastSpatial {
    fn name(&self) -> &'static str {
        "broadcast_spatial"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = inputs[0]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2d tensor");
        let (n, c) = x.dim();
        let mut y = Array4::<f64>::zeros((n, c, self.height, self.width));
        for i in 0..self.height {
            for j in 0..self.width {
                y.slice_mut(s![.., .., i, j]).assign(&x);
            }
        }
        (y.into_dyn(), vec![])
    }
    fn backward(&self, _inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let g = as4(grad);
        let dx = g.sum_axis(Axis(3)).sum_axis(Axis(2));
        vec![Some(dx.into_dyn())]
    }
}

/// Mean over every element, producing a 0-d scalar.
pub struct MeanAll;

impl GraphOp for MeanAll {
    fn name(&self) -> &'static str {
        "mean_all"
    }
    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let m = inputs[0].mean().expect("non-empty");
        (ndarray::arr0(m).into_dyn(), vec![])
    }
    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let n = inputs[0].len() as f64;
        let g = grad.first().copied().unwrap_or(1.0) / n;
        vec![Some(Arr::from_elem(inputs[0].raw_dim(), g))]
    }
}
