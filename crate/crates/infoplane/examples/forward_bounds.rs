//! Forward-direction MI bounds: retrain the classifier suffix from frozen
//! taps and compare against linear probes, at the initialization and after
//! training.
//!
//! Run with: cargo run --release --example forward_bounds

use infoplane::data::{generate_pattern_dataset, three_way_split, PatternDatasetSpec};
use infoplane::encoder::{train_encoder, Encoder, EncoderConfig, Mode, Normalization, Tap, TrainSchedule};
use infoplane::forward_decoder::{
    linear_probe, make_forward_decoder, train_forward_decoder, ForwardDecoderSpec, ProbeSpec,
};
use infoplane::mi::forward_mi_nats;

fn main() -> infoplane::Result<()> {
    let data = generate_pattern_dataset(&PatternDatasetSpec::default(), 77, 900)?;
    let (split, _) = three_way_split(&data, 0)?;
    let normalization = Normalization::fit(&split.encoding);

    let config = EncoderConfig {
        input_size: 8,
        hyper_layer_channels: [8, 12, 16],
        blocks_per_hyper_layer: 1,
        num_classes: 10,
        leaky_slope: 0.01,
        mode: Mode::Classifier,
    };
    let encoder = Encoder::new(config.clone())?;
    let out_dir = std::env::temp_dir().join("infoplane-forward-bounds");
    let schedule = TrainSchedule { lr0: 0.05, epochs: 20, batch_size: 64, ..TrainSchedule::default() };
    let trained = train_encoder(
        &encoder,
        encoder.init_params(1),
        &split.encoding,
        &normalization,
        &schedule,
        &[],
        &out_dir,
        2,
    )?
    .params;
    let random = encoder.init_params(1);

    let spec = ForwardDecoderSpec { epochs: 15, lr0: 0.05, batch_size: 64, ..Default::default() };
    let probe_spec = ProbeSpec { epochs: 15, lr0: 0.05, batch_size: 64, ..Default::default() };
    let prior = vec![0.1; 10];

    println!("{:<22} {:>10} {:>10} {:>10}", "decoder", "NLL nats", "MI nats", "accuracy");
    for (label, params) in [("trained encoder", &trained), ("random initialization", &random)] {
        for tap in [Tap::H2, Tap::H3, Tap::H4] {
            let decoder = make_forward_decoder(&config, params, tap, 7)?;
            let outcome =
                train_forward_decoder(decoder, &normalization, &split.decoding, &split.evaluation, &spec, 9)?;
            let mi = forward_mi_nats(outcome.evaluation.mean_nll, &prior)?;
            println!(
                "{:<22} {:>10.4} {:>10.4} {:>10.3}  ({label}, suffix from {tap})",
                format!("suffix@{tap}"),
                outcome.evaluation.mean_nll,
                mi,
                outcome.evaluation.accuracy
            );
        }
        let probe = linear_probe(
            &config,
            params,
            Tap::H4,
            &normalization,
            &split.decoding,
            &split.evaluation,
            &probe_spec,
            11,
        )?;
        let mi = forward_mi_nats(probe.evaluation.mean_nll, &prior)?;
        println!(
            "{:<22} {:>10.4} {:>10.4} {:>10.3}  ({label})",
            "linear probe@h4",
            probe.evaluation.mean_nll,
            mi,
            probe.evaluation.accuracy
        );
    }
    println!("\nceiling: ln(10) = {:.4} nats", 10.0f64.ln());
    Ok(())
}
