//! The tapped convolutional encoder: a small ResNet trained either as a
//! classifier or as an autoencoder, exposing activation snapshots at four
//! tap points (the ends of the three hyper-layers plus a pooled vector).
//!
//! With the default configuration the trunk has 21 convolutional layers
//! counting the two skip-connection convolutions. No residual connection
//! crosses a tap point.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array4, ArrayView4, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    batch_stats, cosine_lr, hex_string, Arr, Graph, Initializer, Leaves, Padding, ParamSet, Sgd,
    Var,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Classifier,
    Autoencoder,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Classifier => write!(f, "classifier"),
            Mode::Autoencoder => write!(f, "autoencoder"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(Mode::Classifier),
            "autoencoder" => Ok(Mode::Autoencoder),
            other => Err(Error::InvalidParameter(format!("unknown mode `{other}`"))),
        }
    }
}

/// The four tracked activation snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    H1,
    H2,
    H3,
    H4,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::H1, Tap::H2, Tap::H3, Tap::H4];

    pub fn index(&self) -> usize {
        match self {
            Tap::H1 => 0,
            Tap::H2 => 1,
            Tap::H3 => 2,
            Tap::H4 => 3,
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.index() + 1)
    }
}

impl FromStr for Tap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h1" => Ok(Tap::H1),
            "h2" => Ok(Tap::H2),
            "h3" => Ok(Tap::H3),
            "h4" => Ok(Tap::H4),
            other => Err(Error::InvalidParameter(format!(
                "unknown tap `{other}` (expected h1..h4)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub hyper_layer_channels: [usize; 3],
    pub blocks_per_hyper_layer: usize,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub mode: Mode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 32,
            hyper_layer_channels: [16, 32, 64],
            blocks_per_hyper_layer: 3,
            num_classes: 10,
            leaky_slope: 0.01,
            mode: Mode::Classifier,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size % 4 != 0 || self.input_size < 8 {
            return Err(Error::config(
                "input_size",
                format!("must be divisible by 4 and at least 8, got {}", self.input_size),
            ));
        }
        if self.hyper_layer_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("hyper_layer_channels", "channels must be positive"));
        }
        if self.blocks_per_hyper_layer == 0 {
            return Err(Error::config("blocks_per_hyper_layer", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Digest of the canonical serialized config; embedded in checkpoints.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_string(&Sha256::digest(json.as_bytes()))
    }

    /// Kernel of the average pooling between h3 and h4 (4, shrunk for very
    /// small inputs so the pool never exceeds the h3 spatial size).
    pub fn pool_kernel(&self) -> usize {
        4.min(self.input_size / 4)
    }

    /// (spatial size, channels) of a spatial tap; h4 reports `None` spatial
    /// and its vector length as channels.
    pub fn tap_shape(&self, tap: Tap) -> (Option<usize>, usize) {
        let s = self.input_size;
        let [c1, c2, c3] = self.hyper_layer_channels;
        match tap {
            Tap::H1 => (Some(s), c1),
            Tap::H2 => (Some(s / 2), c2),
            Tap::H3 => (Some(s / 4), c3),
            Tap::H4 => {
                let side = (s / 4) / self.pool_kernel();
                (None, c3 * side * side)
            }
        }
    }
}

/// One activation snapshot with its provenance.
#[derive(Debug, Clone)]
pub struct TapActivation {
    pub tap: Tap,
    /// (N, C, S, S) for spatial taps, (N, L) for h4.
    pub values: Arr,
    pub spatial_size: Option<usize>,
    pub channels: usize,
    pub epoch: usize,
}

/// The SGD recipe: cosine annealing from `lr0` to zero over `epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { lr0: 0.1, epochs: 200, momentum: 0.9, weight_decay: 5e-4, batch_size: 128 }
    }
}

/// Channel-wise normalization constants, fit on the encoding split and
/// recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn fit(dataset: &Dataset) -> Self {
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        let count = (dataset.images.len() / 3) as f64;
        for ch in 0..3 {
            let view = dataset.images.index_axis(Axis(1), ch);
            let m = view.iter().map(|&v| v as f64).sum::<f64>() / count;
            let var = view.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = var.sqrt().max(1e-6);
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, images: ArrayView4<'_, u8>) -> Arr {
        let (n, c, h, w) = images.dim();
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            let m = self.mean[ch];
            let s = self.std[ch];
            ndarray::Zip::from(out.index_axis_mut(Axis(1), ch))
                .and(images.index_axis(Axis(1), ch))
                .for_each(|o, &v| *o = (v as f64 - m) / s);
        }
        out.into_dyn()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Tap activations of one forward pass, as graph variables.
#[derive(Debug, Clone, Copy)]
pub struct TapVars {
    pub h1: Var,
    pub h2: Var,
    pub h3: Var,
    pub h4: Var,
}

impl TapVars {
    pub fn get(&self, tap: Tap) -> Var {
        match tap {
            Tap::H1 => self.h1,
            Tap::H2 => self.h2,
            Tap::H3 => self.h3,
            Tap::H4 => self.h4,
        }
    }
}

pub struct Encoder {
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Encoder { config })
    }

    /// Convolutional layers in the trunk (stem through h4), counting the
    /// skip-connection convolutions of the down-sampling blocks.
    pub fn conv_layer_count(&self) -> usize {
        let blocks = self.config.blocks_per_hyper_layer;
        // stem + 2 convs per block + 1 skip conv entering hyper-layers 2 and 3
        1 + 3 * blocks * 2 + 2
    }

    fn add_conv(params: &mut ParamSet, init: &mut Initializer, name: &str, ci: usize, co: usize, k: usize) {
        let fan_in = ci * k * k;
        params.add_param(&format!("{name}.w"), init.fan_in(&[co, ci, k, k], fan_in));
        params.add_param(&format!("{name}.b"), init.fan_in(&[co], fan_in));
    }

    fn add_bn(params: &mut ParamSet, name: &str, c: usize) {
        params.add_param(&format!("{name}.gamma"), Arr::ones(IxDyn(&[c])));
        params.add_param(&format!("{name}.beta"), Arr::zeros(IxDyn(&[c])));
        params.add_buffer(&format!("{name}.running_mean"), Arr::zeros(IxDyn(&[c])));
        params.add_buffer(&format!("{name}.running_var"), Arr::ones(IxDyn(&[c])));
    }

    fn add_block(params: &mut ParamSet, init: &mut Initializer, name: &str, ci: usize, co: usize, stride: usize) {
        Self::add_conv(params, init, &format!("{name}.conv1"), ci, co, 3);
        Self::add_bn(params, &format!("{name}.bn1"), co);
        Self::add_conv(params, init, &format!("{name}.conv2"), co, co, 3);
        Self::add_bn(params, &format!("{name}.bn2"), co);
        if ci != co || stride != 1 {
            Self::add_conv(params, init, &format!("{name}.skip.conv"), ci, co, 1);
            Self::add_bn(params, &format!("{name}.skip.bn"), co);
        }
    }

    /// Trunk parameters ("enc.*"), plus the classifier head or the
    /// autoencoder's mirror decoder depending on mode.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        let mut init = Initializer::new(seed);
        self.init_trunk_params(&mut params, &mut init);
        match self.config.mode {
            Mode::Classifier => self.init_head_params(&mut params, &mut init),
            Mode::Autoencoder => self.init_decoder_params(&mut params, &mut init),
        }
        params
    }

    fn init_trunk_params(&self, params: &mut ParamSet, init: &mut Initializer) {
        let [c1, c2, c3] = self.config.hyper_layer_channels;
        Self::add_conv(params, init, "enc.stem.conv", 3, c1, 3);
        Self::add_bn(params, "enc.stem.bn", c1);
        for (hl, (ci, co)) in [(1, (c1, c1)), (2, (c1, c2)), (3, (c2, c3))] {
            for b in 0..self.config.blocks_per_hyper_layer {
                let stride = if hl > 1 && b == 0 { 2 } else { 1 };
                let cin = if b == 0 { ci } else { co };
                Self::add_block(params, init, &format!("enc.hl{hl}.block{b}"), cin, co, stride);
            }
        }
    }

    pub(crate) fn init_head_params(&self, params: &mut ParamSet, init: &mut Initializer) {
        let (_, h4_len) = self.config.tap_shape(Tap::H4);
        params.add_param(
            "head.fc.w",
            init.fan_in(&[self.config.num_classes, h4_len], h4_len),
        );
        params.add_param("head.fc.b", init.fan_in(&[self.config.num_classes], h4_len));
    }

    fn init_decoder_params(&self, params: &mut ParamSet, init: &mut Initializer) {
        let [c1, c2, c3] = self.config.hyper_layer_channels;
        let unpool_stages = (self.config.pool_kernel() as f64).log2() as usize;
        for stage in 0..unpool_stages {
            Self::add_conv(params, init, &format!("dec.unpool{stage}.conv"), c3, c3, 3);
            Self::add_bn(params, &format!("dec.unpool{stage}.bn"), c3);
        }
        for (hl, ch) in [(3, c3), (2, c2), (1, c1)] {
            for b in 0..self.config.blocks_per_hyper_layer {
                Self::add_block(params, init, &format!("dec.hl{hl}.block{b}"), ch, ch, 1);
            }
            if hl > 1 {
                let next = if hl == 3 { c2 } else { c1 };
                Self::add_conv(params, init, &format!("dec.up{hl}.conv"), ch, next, 3);
                Self::add_bn(params, &format!("dec.up{hl}.bn"), next);
            }
        }
        Self::add_conv(params, init, "dec.out.conv", c1, 3, 3);
    }

    fn conv(&self, g: &mut Graph, leaves: &Leaves, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = leaves.var(&format!("{name}.w"));
        let b = leaves.var(&format!("{name}.b"));
        g.conv2d(x, w, b, (stride, stride), Padding::symmetric(pad))
    }

    fn bn(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        params: &mut ParamSet,
        name: &str,
        x: Var,
        phase: Phase,
    ) -> Var {
        let gamma = leaves.var(&format!("{name}.gamma"));
        let beta = leaves.var(&format!("{name}.beta"));
        match phase {
            Phase::Train => {
                let (mean, _, var_unbiased) = batch_stats(g.value(x));
                let rm = params.buffer_mut(&format!("{name}.running_mean"));
                rm.zip_mut_with(&mean.clone().into_dyn(), |r, &m| {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                });
                let rv = params.buffer_mut(&format!("{name}.running_var"));
                rv.zip_mut_with(&var_unbiased.clone().into_dyn(), |r, &v| {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                });
                g.batch_norm_train(x, gamma, beta, BN_EPS)
            }
            Phase::Eval => {
                let rm = to_array1(params.buffer(&format!("{name}.running_mean")));
                let rv = to_array1(params.buffer(&format!("{name}.running_var")));
                g.batch_norm_eval(x, gamma, beta, BN_EPS, rm, rv)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        params: &mut ParamSet,
        name: &str,
        x: Var,
        ci: usize,
        co: usize,
        stride: usize,
        phase: Phase,
    ) -> Var {
        let slope = self.config.leaky_slope;
        let c1 = self.conv(g, leaves, &format!("{name}.conv1"), x, stride, 1);
        let b1 = self.bn(g, leaves, params, &format!("{name}.bn1"), c1, phase);
        let a1 = g.leaky_relu(b1, slope);
        let c2 = self.conv(g, leaves, &format!("{name}.conv2"), a1, 1, 1);
        let b2 = self.bn(g, leaves, params, &format!("{name}.bn2"), c2, phase);
        let skip = if ci != co || stride != 1 {
            let sc = {
                let w = leaves.var(&format!("{name}.skip.conv.w"));
                let b = leaves.var(&format!("{name}.skip.conv.b"));
                g.conv2d(x, w, b, (stride, stride), Padding::symmetric(0))
            };
            self.bn(g, leaves, params, &format!("{name}.skip.bn"), sc, phase)
        } else {
            x
        };
        let sum = g.add(b2, skip);
        g.leaky_relu(sum, slope)
    }

    fn hyper_layer(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        params: &mut ParamSet,
        hl: usize,
        x: Var,
        phase: Phase,
    ) -> Var {
        let [c1, c2, c3] = self.config.hyper_layer_channels;
        let (ci, co) = match hl {
            1 => (c1, c1),
            2 => (c1, c2),
            _ => (c2, c3),
        };
        let mut cur = x;
        for b in 0..self.config.blocks_per_hyper_layer {
            let stride = if hl > 1 && b == 0 { 2 } else { 1 };
            let cin = if b == 0 { ci } else { co };
            cur = self.block(g, leaves, params, &format!("enc.hl{hl}.block{b}"), cur, cin, co, stride, phase);
        }
        cur
    }

    /// Trunk forward stopping at one tap.
    pub fn forward_to_tap(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        params: &mut ParamSet,
        x: Var,
        tap: Tap,
        phase: Phase,
    ) -> Var {
        let slope = self.config.leaky_slope;
        let s = self.conv(g, leaves, "enc.stem.conv", x, 1, 1);
        let s = self.bn(g, leaves, params, "enc.stem.bn", s, phase);
        let s = g.leaky_relu(s, slope);
        let h1 = self.hyper_layer(g, leaves, params, 1, s, phase);
        if tap == Tap::H1 {
            return h1;
        }
        let h2 = self.hyper_layer(g, leaves, params, 2, h1, phase);
        if tap == Tap::H2 {
            return h2;
        }
        let h3 = self.hyper_layer(g, leaves, params, 3, h2, phase);
        if tap == Tap::H3 {
            return h3;
        }
        self.pool_to_h4(g, h3)
    }

    /// Stem and the three hyper-layers; returns all four taps.
    pub fn forward_trunk(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        params: &mut ParamSet,
        x: Var,
        phase: Phase,
    ) -> TapVars {
        let slope = self.config.leaky_slope;
        let s = self.conv(g, leaves, "enc.stem.conv", x, 1, 1);
        let s = self.bn(g, leaves, params, "enc.stem.bn", s, phase);
        let s = g.leaky_relu(s, slope);
        let h1 = self.hyper_layer(g, leaves, params, 1, s, phase);
        let h2 = self.hyper_layer(g, leaves, params, 2, h1, phase);
        let h3 = self.hyper_layer(g, leaves, params, 3, h2, phase);
        let h4 = self.pool_to_h4(g, h3);
        TapVars { h1, h2, h3, h4 }
    }

    /// h4 = flatten(avgpool(h3, k)).
    pub fn pool_to_h4(&self, g: &mut Graph, h3: Var) -> Var {
        let pooled = g.avg_pool2d(h3, self.config.pool_kernel());
        let shape = g.value(pooled).shape().to_vec();
        let (n, flat) = (shape[0], shape[1] * shape[2] * shape[3]);
        g.reshape(pooled, &[n, flat])
    }

    pub fn forward_head(&self, g: &mut Graph, leaves: &Leaves, h4: Var) -> Var {
        let w = leaves.var("head.fc.w");
        let b = leaves.var("head.fc.b");
        g.linear(h4, w, b)
    }

    /// Classifier-architecture remainder from a tap to logits. For h3 the
    /// remainder is pooling plus the final map; for h4 only the final map.
    pub fn forward_from_tap(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        params: &mut ParamSet,
        tap: Tap,
        mut cur: Var,
        phase: Phase,
    ) -> Var {
        if tap == Tap::H1 {
            cur = self.hyper_layer(g, leaves, params, 2, cur, phase);
        }
        if matches!(tap, Tap::H1 | Tap::H2) {
            cur = self.hyper_layer(g, leaves, params, 3, cur, phase);
        }
        if matches!(tap, Tap::H1 | Tap::H2 | Tap::H3) {
            cur = self.pool_to_h4(g, cur);
        }
        self.forward_head(g, leaves, cur)
    }

    /// Trunk parameter-name prefixes at or before a tap; everything else is
    /// the (reinitialized) suffix of a forward decoder.
    pub fn prefix_layers(tap: Tap) -> Vec<&'static str> {
        let mut prefixes = vec!["enc.stem.", "enc.hl1."];
        if matches!(tap, Tap::H2 | Tap::H3 | Tap::H4) {
            prefixes.push("enc.hl2.");
        }
        if matches!(tap, Tap::H3 | Tap::H4) {
            prefixes.push("enc.hl3.");
        }
        prefixes
    }

    pub fn is_prefix_param(tap: Tap, name: &str) -> bool {
        Self::prefix_layers(tap).iter().any(|p| name.starts_with(p))
    }

    /// The autoencoder's mirror decoder from the h4 bottleneck back to an
    /// image-shaped reconstruction (nearest-neighbour upsampling + conv).
    pub fn forward_decode(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        params: &mut ParamSet,
        h4: Var,
        phase: Phase,
    ) -> Var {
        let slope = self.config.leaky_slope;
        let [c1, c2, c3] = self.config.hyper_layer_channels;
        let n = g.value(h4).shape()[0];
        let pooled_side = (self.config.input_size / 4) / self.config.pool_kernel();
        let mut cur = g.reshape(h4, &[n, c3, pooled_side, pooled_side]);
        let unpool_stages = (self.config.pool_kernel() as f64).log2() as usize;
        for stage in 0..unpool_stages {
            cur = g.nearest_upsample(cur, 2);
            cur = self.conv(g, leaves, &format!("dec.unpool{stage}.conv"), cur, 1, 1);
            cur = self.bn(g, leaves, params, &format!("dec.unpool{stage}.bn"), cur, phase);
            cur = g.leaky_relu(cur, slope);
        }
        for (hl, ch) in [(3, c3), (2, c2), (1, c1)] {
            for b in 0..self.config.blocks_per_hyper_layer {
                cur = self.block(g, leaves, params, &format!("dec.hl{hl}.block{b}"), cur, ch, ch, 1, phase);
            }
            if hl > 1 {
                cur = g.nearest_upsample(cur, 2);
                cur = self.conv(g, leaves, &format!("dec.up{hl}.conv"), cur, 1, 1);
                cur = self.bn(g, leaves, params, &format!("dec.up{hl}.bn"), cur, phase);
                cur = g.leaky_relu(cur, slope);
            }
        }
        self.conv(g, leaves, "dec.out.conv", cur, 1, 1)
    }

    /// Full forward pass: logits (classifier) or reconstruction
    /// (autoencoder) plus all four taps.
    pub fn forward_with_taps(
        &self,
        g: &mut Graph,
        leaves: &Leaves,
        params: &mut ParamSet,
        x: Var,
        phase: Phase,
    ) -> (Var, TapVars) {
        let taps = self.forward_trunk(g, leaves, params, x, phase);
        let out = match self.config.mode {
            Mode::Classifier => self.forward_head(g, leaves, taps.h4),
            Mode::Autoencoder => self.forward_decode(g, leaves, params, taps.h4, phase),
        };
        (out, taps)
    }
}

fn to_array1(a: &Arr) -> Array1<f64> {
    a.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned()
}

/// Evaluation-mode tap activations for a batch of raw images.
pub fn compute_taps(
    encoder: &Encoder,
    params: &ParamSet,
    normalization: &Normalization,
    images: ArrayView4<'_, u8>,
    epoch: usize,
) -> Vec<TapActivation> {
    let mut g = Graph::new();
    let leaves = Leaves::load(&mut g, params, false);
    let x = g.constant(normalization.apply(images));
    let mut scratch = params.clone();
    let taps = encoder.forward_trunk(&mut g, &leaves, &mut scratch, x, Phase::Eval);
    Tap::ALL
        .iter()
        .map(|&tap| {
            let values = g.value(taps.get(tap)).clone();
            let (spatial, channels) = encoder.config.tap_shape(tap);
            TapActivation { tap, values, spatial_size: spatial, channels, epoch }
        })
        .collect()
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy (classifier) or mean squared error (autoencoder).
    pub loss: f64,
    /// Classifier only.
    pub accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<(usize, PathBuf)>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn load_checkpoint(path: &Path, config: &EncoderConfig) -> Result<ParamSet> {
    ParamSet::load(path, &config.digest())
}

/// Train with the cosine-annealed SGD recipe, writing a checkpoint at every
/// requested epoch. Epoch 0 means the untouched initialization.
pub fn train_encoder(
    encoder: &Encoder,
    mut params: ParamSet,
    data: &Dataset,
    normalization: &Normalization,
    schedule: &TrainSchedule,
    checkpoint_epochs: &[usize],
    out_dir: &Path,
    seed: u64,
) -> Result<TrainOutcome> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if let Some(&bad) = checkpoint_epochs.iter().find(|&&e| e > schedule.epochs) {
        return Err(Error::config(
            "checkpoint_epochs",
            format!("epoch {bad} beyond schedule end {}", schedule.epochs),
        ));
    }
    if encoder.config.mode == Mode::Classifier && data.num_classes != encoder.config.num_classes {
        return Err(Error::config(
            "num_classes",
            format!("dataset has {} classes, config {}", data.num_classes, encoder.config.num_classes),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let digest = encoder.config.digest();
    let mut checkpoints = Vec::new();
    if checkpoint_epochs.contains(&0) {
        let path = checkpoint_path(out_dir, 0);
        params.save(&path, &digest)?;
        checkpoints.push((0, path));
    }

    let mut metrics = Vec::new();
    let mut opt = Sgd::new(schedule.lr0, schedule.momentum, schedule.weight_decay);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = data.len();

    for epoch in 1..=schedule.epochs {
        let lr = cosine_lr(schedule.lr0, epoch - 1, schedule.epochs);
        opt.lr = lr;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in order.chunks(schedule.batch_size) {
            let mut images = Array4::<u8>::zeros((batch.len(), 3, data.image_size(), data.image_size()));
            for (row, &idx) in batch.iter().enumerate() {
                images.index_axis_mut(Axis(0), row).assign(&data.image(idx));
            }
            let mut g = Graph::new();
            let leaves = Leaves::load(&mut g, &params, true);
            let x = g.constant(normalization.apply(images.view()));
            let (out, _) = encoder.forward_with_taps(&mut g, &leaves, &mut params, x, Phase::Train);
            let per_example = match encoder.config.mode {
                Mode::Classifier => {
                    let targets: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
                    let logits = g.value(out);
                    let logits = logits.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    for (row, &idx) in batch.iter().enumerate() {
                        let pred = logits
                            .row(row)
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .unwrap()
                            .0;
                        if pred == data.labels[idx] {
                            correct += 1;
                        }
                    }
                    g.softmax_cross_entropy(out, targets)
                }
                Mode::Autoencoder => {
                    let target = g.constant(normalization.apply(images.view()));
                    g.squared_error(out, target)
                }
            };
            let loss = g.mean_all(per_example);
            let loss_value = g.value(loss).first().copied().unwrap();
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss_value * batch.len() as f64;
            seen += batch.len();
            let mut grads = g.backward(loss);
            let grads = leaves.gradients(&mut grads);
            opt.step(&mut params, &grads);
        }
        metrics.push(EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / seen as f64,
            accuracy: match encoder.config.mode {
                Mode::Classifier => Some(correct as f64 / seen as f64),
                Mode::Autoencoder => None,
            },
        });
        if checkpoint_epochs.contains(&epoch) {
            let path = checkpoint_path(out_dir, epoch);
            params.save(&path, &digest)?;
            checkpoints.push((epoch, path));
        }
    }
    Ok(TrainOutcome { params, metrics, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pattern_dataset, PatternDatasetSpec};

    fn desk_config() -> EncoderConfig {
        EncoderConfig {
            input_size: 8,
            hyper_layer_channels: [6, 8, 12],
            blocks_per_hyper_layer: 1,
            num_classes: 10,
            leaky_slope: 0.01,
            mode: Mode::Classifier,
        }
    }

    #[test]
    fn default_tap_shapes_match_contract() {
        let config = EncoderConfig::default();
        assert_eq!(config.tap_shape(Tap::H1), (Some(32), 16));
        assert_eq!(config.tap_shape(Tap::H2), (Some(16), 32));
        assert_eq!(config.tap_shape(Tap::H3), (Some(8), 64));
        assert_eq!(config.tap_shape(Tap::H4), (None, 256));

        let sixteen = EncoderConfig { input_size: 16, ..EncoderConfig::default() };
        assert_eq!(sixteen.tap_shape(Tap::H3), (Some(4), 64));
        assert_eq!(sixteen.tap_shape(Tap::H4), (None, 64));
    }

    #[test]
    fn conv_layer_count_is_twenty_one_with_defaults() {
        let encoder = Encoder::new(EncoderConfig::default()).unwrap();
        assert_eq!(encoder.conv_layer_count(), 21);
        let shallow = Encoder::new(EncoderConfig {
            blocks_per_hyper_layer: 1,
            ..EncoderConfig::default()
        })
        .unwrap();
        assert!(shallow.conv_layer_count() < 21);
    }

    #[test]
    fn parameter_count_monotone_in_depth() {
        let deep = Encoder::new(EncoderConfig::default()).unwrap().init_params(0);
        let shallow = Encoder::new(EncoderConfig {
            blocks_per_hyper_layer: 1,
            ..EncoderConfig::default()
        })
        .unwrap()
        .init_params(0);
        assert!(shallow.num_scalars() < deep.num_scalars());
    }

    #[test]
    fn config_validation_errors() {
        let bad = EncoderConfig { input_size: 30, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { hyper_layer_channels: [0, 8, 8], ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
    }

    fn forward_taps_once(encoder: &Encoder, params: &ParamSet, images: &Array4<u8>) -> Vec<Arr> {
        let norm = Normalization { mean: [128.0; 3], std: [64.0; 3] };
        compute_taps(encoder, params, &norm, images.view(), 0)
            .into_iter()
            .map(|t| t.values)
            .collect()
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_shaped() {
        let encoder = Encoder::new(desk_config()).unwrap();
        let params = encoder.init_params(7);
        let mut images = Array4::<u8>::zeros((5, 3, 8, 8));
        for (i, v) in images.iter_mut().enumerate() {
            *v = (i % 251) as u8;
        }
        let a = forward_taps_once(&encoder, &params, &images);
        let b = forward_taps_once(&encoder, &params, &images);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y, "eval forward must be bit-identical");
        }
        assert_eq!(a[0].shape(), &[5, 6, 8, 8]);
        assert_eq!(a[1].shape(), &[5, 8, 4, 4]);
        assert_eq!(a[2].shape(), &[5, 12, 2, 2]);
        assert_eq!(a[3].shape(), &[5, 12]);
    }

    #[test]
    fn h4_equals_pooled_h3() {
        let encoder = Encoder::new(desk_config()).unwrap();
        let params = encoder.init_params(3);
        let mut images = Array4::<u8>::zeros((2, 3, 8, 8));
        for (i, v) in images.iter_mut().enumerate() {
            *v = (i * 13 % 256) as u8;
        }
        let taps = forward_taps_once(&encoder, &params, &images);
        let h3 = taps[2].view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let h4 = taps[3].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let k = encoder.config.pool_kernel();
        assert_eq!(k, 2);
        // manual 2x2 average pool + flatten
        for n in 0..2 {
            let mut idx = 0;
            for c in 0..12 {
                let mut acc = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        acc += h3[(n, c, i, j)];
                    }
                }
                assert!((h4[(n, idx)] - acc / 4.0).abs() < 1e-12);
                idx += 1;
            }
        }
    }

    #[test]
    fn autoencoder_reconstruction_shape_and_bottleneck() {
        let config = EncoderConfig { mode: Mode::Autoencoder, ..EncoderConfig::default() };
        assert_eq!(config.tap_shape(Tap::H4), (None, 256));

        let desk = EncoderConfig { mode: Mode::Autoencoder, ..desk_config() };
        let encoder = Encoder::new(desk).unwrap();
        let params = encoder.init_params(5);
        let mut g = Graph::new();
        let leaves = Leaves::load(&mut g, &params, false);
        let x = g.constant(Arr::zeros(IxDyn(&[2, 3, 8, 8])));
        let mut scratch = params.clone();
        let (out, taps) = encoder.forward_with_taps(&mut g, &leaves, &mut scratch, x, Phase::Eval);
        assert_eq!(g.value(out).shape(), &[2, 3, 8, 8]);
        assert_eq!(g.value(taps.h4).shape(), &[2, 12]);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_taps() {
        let dir = tempfile::tempdir().unwrap();
        let encoder = Encoder::new(desk_config()).unwrap();
        let params = encoder.init_params(11);
        let path = checkpoint_path(dir.path(), 0);
        params.save(&path, &encoder.config.digest()).unwrap();
        let loaded = load_checkpoint(&path, &encoder.config).unwrap();

        let mut images = Array4::<u8>::zeros((3, 3, 8, 8));
        for (i, v) in images.iter_mut().enumerate() {
            *v = (i * 7 % 256) as u8;
        }
        let a = forward_taps_once(&encoder, &params, &images);
        let b = forward_taps_once(&encoder, &loaded, &images);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y, "checkpoint round trip must be bit-identical");
        }

        // config digest mismatch refuses to load
        let other = EncoderConfig { num_classes: 5, ..desk_config() };
        assert!(load_checkpoint(&path, &other).is_err());
    }

    #[test]
    fn desk_scale_classifier_beats_chance_within_five_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_pattern_dataset(&PatternDatasetSpec::default(), 21, 240).unwrap();
        let encoder = Encoder::new(desk_config()).unwrap();
        let params = encoder.init_params(1);
        let norm = Normalization::fit(&data);
        let schedule = TrainSchedule {
            lr0: 0.05,
            epochs: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 48,
        };
        let outcome = train_encoder(&encoder, params, &data, &norm, &schedule, &[0, 5], dir.path(), 2).unwrap();
        let final_acc = outcome.metrics.last().unwrap().accuracy.unwrap();
        assert!(final_acc > 0.1, "accuracy {final_acc} not above chance");
        assert_eq!(outcome.checkpoints.len(), 2);

        // epoch-0 checkpoint equals the fresh initialization
        let fresh = Encoder::new(desk_config()).unwrap().init_params(1);
        let restored = load_checkpoint(&outcome.checkpoints[0].1, &encoder.config).unwrap();
        assert_eq!(restored.digest(), fresh.digest());
    }

    #[test]
    fn autoencoder_loss_decreases_from_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_pattern_dataset(&PatternDatasetSpec::default(), 23, 180).unwrap();
        let config = EncoderConfig { mode: Mode::Autoencoder, ..desk_config() };
        let encoder = Encoder::new(config).unwrap();
        let params = encoder.init_params(9);
        let norm = Normalization::fit(&data);
        let schedule = TrainSchedule {
            lr0: 0.02,
            epochs: 6,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 45,
        };
        let outcome = train_encoder(&encoder, params, &data, &norm, &schedule, &[], dir.path(), 4).unwrap();
        let first = outcome.metrics.first().unwrap().loss;
        let last = outcome.metrics.last().unwrap().loss;
        assert!(last < first, "MSE did not improve: {first} -> {last}");
    }
}
