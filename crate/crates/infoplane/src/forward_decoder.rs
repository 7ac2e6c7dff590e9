//! Forward-direction decoders: bound I(y; h) by freezing the encoder up to
//! a tap and retraining the classifier-architecture remainder on the
//! decoding split. Linear probes measure plain linear separability of the
//! same frozen activations.
//!
//! Because the prefix is frozen, its activations are precomputed once in
//! evaluation mode and the suffix trains on those cached tensors; the
//! freezing contract (identical prefix outputs before and after suffix
//! training) holds by construction and is asserted via parameter digests.

use ndarray::{Array4, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{Encoder, EncoderConfig, EpochMetrics, Mode, Normalization, Phase, Tap};
use crate::error::{Error, Result};
use crate::mi::mean_and_stderr;
use crate::nn::{cosine_lr, Arr, Graph, Initializer, Leaves, ParamSet, Sgd};

/// Training recipe for a forward decoder; the same cosine-annealed SGD as
/// the encoder, defaulting to a shorter desk-scale budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardDecoderSpec {
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ForwardDecoderSpec {
    fn default() -> Self {
        ForwardDecoderSpec { epochs: 50, lr0: 0.1, momentum: 0.9, weight_decay: 5e-4, batch_size: 128 }
    }
}

/// Probe recipe: same optimizer family, no weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec { epochs: 50, lr0: 0.1, momentum: 0.9, batch_size: 128 }
    }
}

/// A frozen encoder prefix with a freshly initialized classifier suffix.
pub struct ForwardDecoder {
    pub encoder: Encoder,
    pub tap: Tap,
    pub params: ParamSet,
}

/// Per-example NLL statistics of a classifier on the evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderEvaluation {
    pub mean_nll: f64,
    pub stderr: f64,
    pub accuracy: f64,
}

pub struct ForwardDecoderOutcome {
    pub decoder: ForwardDecoder,
    pub evaluation: DecoderEvaluation,
    pub metrics: Vec<EpochMetrics>,
}

/// Build the composite model: parameters at depth ≤ tap are copied
/// bit-identically from the checkpoint (classifier or autoencoder trunk);
/// everything after the tap is reinitialized from `seed` in classifier
/// configuration.
pub fn make_forward_decoder(
    config: &EncoderConfig,
    checkpoint: &ParamSet,
    tap: Tap,
    seed: u64,
) -> Result<ForwardDecoder> {
    let classifier_config = EncoderConfig { mode: Mode::Classifier, ..config.clone() };
    let encoder = Encoder::new(classifier_config)?;
    let fresh = encoder.init_params(seed);

    let mut params = ParamSet::new();
    for (name, value) in fresh.params() {
        if name.starts_with("dec.") {
            continue;
        }
        if Encoder::is_prefix_param(tap, name) {
            params.add_param(name, checkpoint.param(name).clone());
        } else {
            params.add_param(name, value.clone());
        }
    }
    // buffers: running statistics follow the same prefix/suffix partition
    for prefix in Encoder::prefix_layers(tap) {
        copy_buffers(&mut params, checkpoint, prefix);
    }
    for hl in ["enc.hl2.", "enc.hl3."] {
        if !Encoder::prefix_layers(tap).contains(&hl) {
            copy_buffers(&mut params, &fresh, hl);
        }
    }
    Ok(ForwardDecoder { encoder, tap, params })
}

fn copy_buffers(dst: &mut ParamSet, src: &ParamSet, prefix: &str) {
    let names: Vec<String> = src
        .params()
        .keys()
        .filter(|n| n.starts_with(prefix) && n.ends_with(".gamma"))
        .cloned()
        .collect();
    for gamma_name in names {
        let base = gamma_name.trim_end_matches(".gamma");
        for suffix in [".running_mean", ".running_var"] {
            let buf = format!("{base}{suffix}");
            dst.add_buffer(&buf, src.buffer(&buf).clone());
        }
    }
}

/// Evaluation-mode prefix activations for a whole dataset, in batches.
pub fn cached_tap_values(
    encoder: &Encoder,
    params: &ParamSet,
    normalization: &Normalization,
    data: &Dataset,
    tap: Tap,
) -> Arr {
    let mut pieces: Vec<Arr> = Vec::new();
    let n = data.len();
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut images = Array4::<u8>::zeros((end - start, 3, data.image_size(), data.image_size()));
        for (row, idx) in (start..end).enumerate() {
            images.index_axis_mut(Axis(0), row).assign(&data.image(idx));
        }
        let mut g = Graph::new();
        let leaves = Leaves::load(&mut g, params, false);
        let x = g.constant(normalization.apply(images.view()));
        let mut scratch = params.clone();
        let tap_var = encoder.forward_to_tap(&mut g, &leaves, &mut scratch, x, tap, Phase::Eval);
        pieces.push(g.value(tap_var).clone());
        start = end;
    }
    let views: Vec<_> = pieces.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("tap chunks stack")
}

fn batch_rows(values: &Arr, rows: &[usize]) -> Arr {
    let mut shape: Vec<usize> = values.shape().to_vec();
    shape[0] = rows.len();
    let mut out = Arr::zeros(IxDyn(&shape));
    for (dst, &src) in rows.iter().enumerate() {
        out.index_axis_mut(Axis(0), dst)
            .assign(&values.index_axis(Axis(0), src));
    }
    out
}

/// Train the suffix on the decoding split; report mean NLL of the true
/// labels (nats), its standard error, and accuracy on the evaluation split.
pub fn train_forward_decoder(
    mut decoder: ForwardDecoder,
    normalization: &Normalization,
    decoding: &Dataset,
    evaluation: &Dataset,
    spec: &ForwardDecoderSpec,
    seed: u64,
) -> Result<ForwardDecoderOutcome> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let tap = decoder.tap;
    let prefix_digest_before = prefix_digest(&decoder.params, tap);
    let train_taps = cached_tap_values(&decoder.encoder, &decoder.params, normalization, decoding, tap);
    let eval_taps = cached_tap_values(&decoder.encoder, &decoder.params, normalization, evaluation, tap);

    let mut opt = Sgd::new(spec.lr0, spec.momentum, spec.weight_decay);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = decoding.len();
    let mut metrics = Vec::new();

    for epoch in 1..=spec.epochs {
        opt.lr = cosine_lr(spec.lr0, epoch - 1, spec.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let mut g = Graph::new();
            let leaves = Leaves::load_partitioned(&mut g, &decoder.params, |name| {
                !Encoder::is_prefix_param(tap, name)
            });
            let x = g.constant(batch_rows(&train_taps, batch));
            let logits =
                decoder
                    .encoder
                    .forward_from_tap(&mut g, &leaves, &mut decoder.params, tap, x, Phase::Train);
            let targets: Vec<usize> = batch.iter().map(|&i| decoding.labels[i]).collect();
            let nll = g.softmax_cross_entropy(logits, targets);
            let loss = g.mean_all(nll);
            let value = g.value(loss).first().copied().unwrap();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += value * batch.len() as f64;
            let mut grads = g.backward(loss);
            let grads = leaves.gradients(&mut grads);
            opt.step(&mut decoder.params, &grads);
        }
        metrics.push(EpochMetrics {
            epoch,
            lr: opt.lr,
            loss: loss_sum / n as f64,
            accuracy: None,
        });
    }

    debug_assert_eq!(
        prefix_digest(&decoder.params, tap),
        prefix_digest_before,
        "frozen prefix was modified"
    );

    let evaluation = evaluate_suffix(&decoder, &eval_taps, &evaluation.labels)?;
    Ok(ForwardDecoderOutcome { decoder, evaluation, metrics })
}

fn prefix_digest(params: &ParamSet, tap: Tap) -> String {
    Encoder::prefix_layers(tap)
        .iter()
        .map(|p| params.digest_prefix(p))
        .collect::<Vec<_>>()
        .join("|")
}

/// Evaluation-mode NLL/accuracy of the suffix on cached tap activations.
pub fn evaluate_suffix(decoder: &ForwardDecoder, eval_taps: &Arr, labels: &[usize]) -> Result<DecoderEvaluation> {
    let mut g = Graph::new();
    let leaves = Leaves::load(&mut g, &decoder.params, false);
    let x = g.constant(eval_taps.clone());
    let mut scratch = decoder.params.clone();
    let logits =
        decoder
            .encoder
            .forward_from_tap(&mut g, &leaves, &mut scratch, decoder.tap, x, Phase::Eval);
    let nll = g.softmax_cross_entropy(logits, labels.to_vec());
    let per_example: Vec<f64> = g.value(nll).iter().copied().collect();
    let (mean_nll, stderr) = mean_and_stderr(&per_example);
    let accuracy = accuracy_of(g.value(logits), labels);
    Ok(DecoderEvaluation { mean_nll, stderr, accuracy })
}

fn accuracy_of(logits: &Arr, labels: &[usize]) -> f64 {
    let logits = logits.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let pred = logits
            .row(row)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

pub struct ProbeOutcome {
    pub evaluation: DecoderEvaluation,
    pub weights: ParamSet,
}

/// A single affine map from the flattened tap to class logits, trained to
/// convergence on the decoding split.
pub fn linear_probe(
    config: &EncoderConfig,
    checkpoint: &ParamSet,
    tap: Tap,
    normalization: &Normalization,
    decoding: &Dataset,
    evaluation: &Dataset,
    spec: &ProbeSpec,
    seed: u64,
) -> Result<ProbeOutcome> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let encoder = Encoder::new(EncoderConfig { mode: Mode::Classifier, ..config.clone() })?;
    let flat = |values: Arr| -> Arr {
        let shape = values.shape().to_vec();
        let n = shape[0];
        let f: usize = shape[1..].iter().product();
        values.into_shape_with_order(IxDyn(&[n, f])).unwrap()
    };
    let train_x = flat(cached_tap_values(&encoder, checkpoint, normalization, decoding, tap));
    let eval_x = flat(cached_tap_values(&encoder, checkpoint, normalization, evaluation, tap));
    let features = train_x.shape()[1];
    let classes = config.num_classes;

    let mut params = ParamSet::new();
    let mut init = Initializer::new(seed);
    params.add_param("probe.w", init.fan_in(&[classes, features], features));
    params.add_param("probe.b", init.fan_in(&[classes], features));

    let mut opt = Sgd::new(spec.lr0, spec.momentum, 0.0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let n = decoding.len();
    for epoch in 1..=spec.epochs {
        opt.lr = cosine_lr(spec.lr0, epoch - 1, spec.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            let mut g = Graph::new();
            let leaves = Leaves::load(&mut g, &params, true);
            let x = g.constant(batch_rows(&train_x, batch));
            let w = leaves.var("probe.w");
            let b = leaves.var("probe.b");
            let logits = g.linear(x, w, b);
            let targets: Vec<usize> = batch.iter().map(|&i| decoding.labels[i]).collect();
            let nll = g.softmax_cross_entropy(logits, targets);
            let loss = g.mean_all(nll);
            if !g.value(loss).first().copied().unwrap().is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let mut grads = g.backward(loss);
            let grads = leaves.gradients(&mut grads);
            opt.step(&mut params, &grads);
        }
    }

    let mut g = Graph::new();
    let leaves = Leaves::load(&mut g, &params, false);
    let x = g.constant(eval_x);
    let w = leaves.var("probe.w");
    let b = leaves.var("probe.b");
    let logits = g.linear(x, w, b);
    let nll = g.softmax_cross_entropy(logits, evaluation.labels.clone());
    let per_example: Vec<f64> = g.value(nll).iter().copied().collect();
    let (mean_nll, stderr) = mean_and_stderr(&per_example);
    let accuracy = accuracy_of(g.value(logits), &evaluation.labels);
    Ok(ProbeOutcome { evaluation: DecoderEvaluation { mean_nll, stderr, accuracy }, weights: params })
}
