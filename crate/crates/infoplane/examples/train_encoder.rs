//! Train a desk-scale tapped classifier and inspect the tap activations
//! and the cosine-annealed schedule.
//!
//! Run with: cargo run --release --example train_encoder

use infoplane::data::{generate_pattern_dataset, three_way_split, PatternDatasetSpec};
use infoplane::encoder::{
    compute_taps, train_encoder, Encoder, EncoderConfig, Mode, Normalization, TrainSchedule,
};
use infoplane::nn::cosine_lr;

fn main() -> infoplane::Result<()> {
    let data = generate_pattern_dataset(&PatternDatasetSpec::default(), 42, 900)?;
    let (split, _) = three_way_split(&data, 0)?;

    let config = EncoderConfig {
        input_size: 8,
        hyper_layer_channels: [8, 12, 16],
        blocks_per_hyper_layer: 1,
        num_classes: 10,
        leaky_slope: 0.01,
        mode: Mode::Classifier,
    };
    let encoder = Encoder::new(config.clone())?;
    println!(
        "encoder: {} conv layers, {} parameters",
        encoder.conv_layer_count(),
        encoder.init_params(0).num_scalars()
    );
    for tap in infoplane::encoder::Tap::ALL {
        let (spatial, channels) = config.tap_shape(tap);
        match spatial {
            Some(s) => println!("  {tap}: {s}x{s} x {channels} channels"),
            None => println!("  {tap}: vector of length {channels}"),
        }
    }

    let schedule = TrainSchedule { lr0: 0.05, epochs: 20, batch_size: 64, ..TrainSchedule::default() };
    println!(
        "\ncosine schedule: lr(0) = {:.4}, lr(10) = {:.4}, lr(20) = {:.4}",
        cosine_lr(schedule.lr0, 0, 20),
        cosine_lr(schedule.lr0, 10, 20),
        cosine_lr(schedule.lr0, 20, 20)
    );

    let normalization = Normalization::fit(&split.encoding);
    let out_dir = std::env::temp_dir().join("infoplane-train-encoder");
    let outcome = train_encoder(
        &encoder,
        encoder.init_params(1),
        &split.encoding,
        &normalization,
        &schedule,
        &[0, 20],
        &out_dir,
        2,
    )?;
    for m in outcome.metrics.iter().step_by(4) {
        println!(
            "epoch {:>3}: loss {:.4}, accuracy {:.3}, lr {:.4}",
            m.epoch,
            m.loss,
            m.accuracy.unwrap_or(f64::NAN),
            m.lr
        );
    }
    let last = outcome.metrics.last().unwrap();
    println!("final training accuracy: {:.3}", last.accuracy.unwrap());

    // evaluation-mode taps for a few held-out images
    let taps = compute_taps(
        &encoder,
        &outcome.params,
        &normalization,
        split.evaluation.images.view(),
        schedule.epochs,
    );
    for t in &taps {
        println!("tap {} activations: shape {:?}", t.tap, t.values.shape());
    }
    println!("checkpoints under {}", out_dir.display());
    Ok(())
}
