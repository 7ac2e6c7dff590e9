//! Convolutions (strided, asymmetrically padded) and their transposes.
//!
//! Both directions are computed per kernel offset: each (dy, dx) tap is a
//! plain matrix product between a strided spatial slice and a channel
//! matrix. Strides and asymmetric padding fall out of the slicing, which
//! keeps the causal (shifted) variants used by the autoregressive decoder
//! on the same code path as ordinary convolutions.

use ndarray::{s, Array2, Array4, ArrayView2, Axis, Ix1, Ix4};
use rayon::prelude::*;

use super::graph::{Arr, GraphOp, Stash};

/// Row-chunked parallel matrix product. Chunks write disjoint output rows,
/// so results are identical regardless of thread scheduling.
pub(crate) fn par_matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, _) = a.dim();
    let n = b.dim().1;
    let chunk = 256.max(m / rayon::current_num_threads().max(1) + 1);
    let mut out = Array2::<f64>::zeros((m, n));
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut oc, ac)| oc.assign(&ac.dot(&b)));
    out
}

#[derive(Debug, Clone, Copy)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn symmetric(p: usize) -> Self {
        Padding { top: p, bottom: p, left: p, right: p }
    }
}

fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("4d tensor")
}

fn pad4(x: ndarray::ArrayView4<'_, f64>, p: Padding) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, h + p.top + p.bottom, w + p.left + p.right));
    out.slice_mut(s![.., .., p.top..p.top + h, p.left..p.left + w])
        .assign(&x);
    out
}

/// 2-d convolution. Inputs: `[x (N,Ci,H,W), w (Co,Ci,kh,kw), b (Co)]`.
pub struct Conv2d {
    pub stride: (usize, usize),
    pub pad: Padding,
}

impl Conv2d {
    fn out_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let hp = h + self.pad.top + self.pad.bottom;
        let wp = w + self.pad.left + self.pad.right;
        assert!(hp >= kh && wp >= kw, "kernel larger than padded input");
        ((hp - kh) / self.stride.0 + 1, (wp - kw) / self.stride.1 + 1)
    }
}

impl GraphOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = as4(inputs[0]);
        let w = as4(inputs[1]);
        let b = inputs[2].view().into_dimensionality::<Ix1>().unwrap();
        let (n, ci, h, ww) = x.dim();
        let (co, ci_w, kh, kw) = w.dim();
        assert_eq!(ci, ci_w, "conv channel mismatch");
        let (sh, sw) = self.stride;
        let (ho, wo) = self.out_hw(h, ww, kh, kw);
        let xp = pad4(x, self.pad);

        let np = n * ho * wo;
        let mut out_mat = Array2::<f64>::zeros((np, co));
        // start from the bias
        for mut row in out_mat.rows_mut() {
            row.assign(&b);
        }
        for dy in 0..kh {
            for dx in 0..kw {
                let xs = xp
                    .slice(s![.., .., dy..dy + (ho - 1) * sh + 1;sh, dx..dx + (wo - 1) * sw + 1;sw])
                    .permuted_axes([0, 2, 3, 1]);
                let xs = xs.as_standard_layout();
                let xs_mat = xs.to_shape((np, ci)).unwrap();
                let w_off = w.slice(s![.., .., dy, dx]); // (Co, Ci)
                let w_t = w_off.t().as_standard_layout().to_owned(); // (Ci, Co)
                out_mat += &par_matmul(xs_mat.view(), w_t.view());
            }
        }
        let out = out_mat
            .into_shape_with_order((n, ho, wo, co))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (out.into_dyn(), vec![])
    }

    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let x = as4(inputs[0]);
        let w = as4(inputs[1]);
        let (n, ci, h, ww) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let (sh, sw) = self.stride;
        let (ho, wo) = self.out_hw(h, ww, kh, kw);
        let g = as4(grad);
        let np = n * ho * wo;

        let g_nhwc = g.permuted_axes([0, 2, 3, 1]);
        let g_nhwc = g_nhwc.as_standard_layout();
        let g_mat = g_nhwc.to_shape((np, co)).unwrap();

        let db = g_mat.sum_axis(Axis(0));

        let xp = pad4(x, self.pad);
        let mut dxp = Array4::<f64>::zeros(xp.raw_dim());
        let mut dw = Array4::<f64>::zeros(w.raw_dim());
        for dy in 0..kh {
            for dx in 0..kw {
                let xs = xp
                    .slice(s![.., .., dy..dy + (ho - 1) * sh + 1;sh, dx..dx + (wo - 1) * sw + 1;sw])
                    .permuted_axes([0, 2, 3, 1]);
                let xs = xs.as_standard_layout();
                let xs_mat = xs.to_shape((np, ci)).unwrap();
                // dW for this offset: (Co, Ci)
                let dw_off = par_matmul(g_mat.t().as_standard_layout().view(), xs_mat.view());
                dw.slice_mut(s![.., .., dy, dx]).assign(&dw_off);
                // dX for this offset: (NP, Ci)
                let w_off = w.slice(s![.., .., dy, dx]).as_standard_layout().to_owned();
                let dx_mat = par_matmul(g_mat.view(), w_off.view());
                let dx_piece = dx_mat
                    .into_shape_with_order((n, ho, wo, ci))
                    .unwrap()
                    .permuted_axes([0, 3, 1, 2])
                    .as_standard_layout()
                    .to_owned();
                let mut view = dxp.slice_mut(s![
                    ..,
                    ..,
                    dy..dy + (ho - 1) * sh + 1;sh,
                    dx..dx + (wo - 1) * sw + 1;sw
                ]);
                view += &dx_piece;
            }
        }
        let dx = dxp
            .slice(s![.., .., self.pad.top..self.pad.top + h, self.pad.left..self.pad.left + ww])
            .to_owned();
        vec![Some(dx.into_dyn()), Some(dw.into_dyn()), Some(db.into_dyn())]
    }
}

/// Transposed 2-d convolution with explicit output cropping.
///
/// Inputs: `[x (N,Ci,H,W), w (Ci,Co,kh,kw), b (Co)]`. The uncropped output
/// has spatial size `(H-1)·sh + kh`; `crop` rows/columns are then removed
/// from each side. The decoder uses the crop to preserve raster-order
/// causality when upsampling.
pub struct ConvTranspose2d {
    pub stride: (usize, usize),
    pub crop: Padding,
}

impl GraphOp for ConvTranspose2d {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = as4(inputs[0]);
        let w = as4(inputs[1]);
        let b = inputs[2].view().into_dimensionality::<Ix1>().unwrap();
        let (n, ci, h, ww) = x.dim();
        let (ci_w, co, kh, kw) = w.dim();
        assert_eq!(ci, ci_w, "conv_transpose channel mismatch");
        let (sh, sw) = self.stride;
        let (hf, wf) = ((h - 1) * sh + kh, (ww - 1) * sw + kw);

        let x_nhwc = x.permuted_axes([0, 2, 3, 1]);
        let x_nhwc = x_nhwc.as_standard_layout();
        let x_mat = x_nhwc.to_shape((n * h * ww, ci)).unwrap();

        let mut full = Array4::<f64>::zeros((n, hf, wf, co));
        for dy in 0..kh {
            for dx in 0..kw {
                let w_off = w.slice(s![.., .., dy, dx]).as_standard_layout().to_owned(); // (Ci, Co)
                let piece = par_matmul(x_mat.view(), w_off.view())
                    .into_shape_with_order((n, h, ww, co))
                    .unwrap();
                let mut view = full.slice_mut(s![
                    ..,
                    dy..dy + (h - 1) * sh + 1;sh,
                    dx..dx + (ww - 1) * sw + 1;sw,
                    ..
                ]);
                view += &piece;
            }
        }
        let p = self.crop;
        let mut cropped = full
            .slice(s![.., p.top..hf - p.bottom, p.left..wf - p.right, ..])
            .to_owned();
        cropped += &b;
        let out = cropped
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (out.into_dyn(), vec![])
    }

    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let x = as4(inputs[0]);
        let w = as4(inputs[1]);
        let (n, ci, h, ww) = x.dim();
        let (_, co, kh, kw) = w.dim();
        let (sh, sw) = self.stride;
        let (hf, wf) = ((h - 1) * sh + kh, (ww - 1) * sw + kw);
        let g = as4(grad);
        let p = self.crop;

        // un-crop the incoming gradient to the full transposed extent
        let mut gfull = Array4::<f64>::zeros((n, hf, wf, co));
        gfull
            .slice_mut(s![.., p.top..hf - p.bottom, p.left..wf - p.right, ..])
            .assign(&g.permuted_axes([0, 2, 3, 1]));

        let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));

        let x_nhwc = x.permuted_axes([0, 2, 3, 1]);
        let x_nhwc = x_nhwc.as_standard_layout();
        let x_mat = x_nhwc.to_shape((n * h * ww, ci)).unwrap();

        let mut dx_mat = Array2::<f64>::zeros((n * h * ww, ci));
        let mut dw = Array4::<f64>::zeros(w.raw_dim());
        for dy in 0..kh {
            for dx in 0..kw {
                let gs = gfull.slice(s![
                    ..,
                    dy..dy + (h - 1) * sh + 1;sh,
                    dx..dx + (ww - 1) * sw + 1;sw,
                    ..
                ]);
                let gs = gs.as_standard_layout();
                let g_mat = gs.to_shape((n * h * ww, co)).unwrap();
                let w_off = w.slice(s![.., .., dy, dx]); // (Ci, Co)
                let w_t = w_off.t().as_standard_layout().to_owned(); // (Co, Ci)
                dx_mat += &par_matmul(g_mat.view(), w_t.view());
                let dw_off = par_matmul(x_mat.t().as_standard_layout().view(), g_mat.view());
                dw.slice_mut(s![.., .., dy, dx]).assign(&dw_off);
            }
        }
        let dx = dx_mat
            .into_shape_with_order((n, h, ww, ci))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        vec![Some(dx.into_dyn()), Some(dw.into_dyn()), Some(db.into_dyn())]
    }
}

/// Affine map. Inputs: `[x (N,Fi), w (Fo,Fi), b (Fo)]`.
pub struct Linear;

impl GraphOp for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, inputs: &[&Arr]) -> (Arr, Stash) {
        let x = inputs[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w = inputs[1].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = inputs[2].view().into_dimensionality::<Ix1>().unwrap();
        let w_t = w.t().as_standard_layout().to_owned();
        let mut y = par_matmul(x.view(), w_t.view());
        for mut row in y.rows_mut() {
            row += &b;
        }
        (y.into_dyn(), vec![])
    }

    fn backward(&self, inputs: &[&Arr], _stash: &Stash, grad: &Arr) -> Vec<Option<Arr>> {
        let x = inputs[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w = inputs[1].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let g = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let dx = par_matmul(g.view(), w.view());
        let dw = par_matmul(g.t().as_standard_layout().view(), x.view());
        let db = g.sum_axis(Axis(0));
        vec![Some(dx.into_dyn()), Some(dw.into_dyn()), Some(db.into_dyn())]
    }
}
