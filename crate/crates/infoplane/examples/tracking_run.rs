//! A complete desk-scale tracking run: encoder training with checkpoints,
//! per-checkpoint forward and inverse decoders, MI records, figures, and a
//! conditional sample grid.
//!
//! Run with: cargo run --release --example tracking_run
//! Artifacts land in ./target/infoplane-demo/.

use infoplane::data::{generate_pattern_dataset, three_way_split, PatternDatasetSpec};
use infoplane::encoder::{EncoderConfig, Mode, Tap, TrainSchedule};
use infoplane::experiment::{
    query_schedule, run_tracking, series_for, DecoderBudgets, RunManifest,
};
use infoplane::forward_decoder::{ForwardDecoderSpec, ProbeSpec};
use infoplane::mi::{compression_delta, Estimator, RecordStore};
use infoplane::pixelcnn::{InverseDecoderSpec, PixelCnnConfig};
use infoplane::viz;

fn main() -> infoplane::Result<()> {
    let out_dir = std::path::PathBuf::from("target/infoplane-demo");
    let data = generate_pattern_dataset(&PatternDatasetSpec::default(), 7, 900)?;
    let (split, _) = three_way_split(&data, 0)?;

    let encoder = EncoderConfig {
        input_size: 8,
        hyper_layer_channels: [8, 12, 16],
        blocks_per_hyper_layer: 1,
        num_classes: 10,
        leaky_slope: 0.01,
        mode: Mode::Classifier,
    };
    let schedule = TrainSchedule { lr0: 0.05, epochs: 20, batch_size: 64, ..TrainSchedule::default() };
    let query_epochs = query_schedule(schedule.epochs, "paper")?;
    println!("query epochs: {query_epochs:?}");

    let budgets = DecoderBudgets {
        forward: ForwardDecoderSpec { epochs: 12, lr0: 0.05, batch_size: 64, ..Default::default() },
        probe: ProbeSpec { epochs: 12, lr0: 0.05, batch_size: 64, ..Default::default() },
        inverse: InverseDecoderSpec { epochs: 6, lr: 1e-3, lr_decay_per_epoch: 0.999, batch_size: 30, grad_clip: 5.0 },
    };
    let pixelcnn = PixelCnnConfig {
        num_hyper_layers: 3,
        gated_blocks_per_hyper_layer: 1,
        filters: 10,
        mixture_components: 3,
        levels: 256,
        log_scale_floor: -7.0,
    };
    let mut manifest = RunManifest::new(
        11,
        encoder,
        schedule,
        query_epochs.clone(),
        vec![Tap::H2, Tap::H3, Tap::H4],
        budgets,
        pixelcnn,
    );
    manifest.run_probes = true;

    let report = run_tracking(&mut manifest, &split, &out_dir)?;
    println!(
        "tracking: {} records written, {} skipped, {} failures",
        report.records_written,
        report.records_skipped,
        report.failures.len()
    );

    let records = RecordStore::open(&out_dir.join("records.csv"))?.load_non_empty()?;
    for tap in [Tap::H2, Tap::H3, Tap::H4] {
        let forward = series_for(&records, tap, Estimator::ForwardDecoder);
        let inverse = series_for(&records, tap, Estimator::InverseRelative);
        let fwd: Vec<String> = forward.iter().map(|r| format!("{:.2}", r.value_nats)).collect();
        let inv: Vec<String> = inverse.iter().map(|r| format!("{:.1}", r.value_nats)).collect();
        println!("tap {tap}: forward MI {fwd:?} nats; inverse (relative) {inv:?} nats");
        if inverse.len() >= 2 {
            println!("  delta_c({tap}) = {:.2} nats", compression_delta(&inverse)?);
        }
    }

    // figures from the record store
    let forward_and_relative: Vec<_> = records
        .iter()
        .filter(|r| {
            matches!(r.estimator, Estimator::ForwardDecoder | Estimator::InverseRelative)
        })
        .cloned()
        .collect();
    viz::render_info_plane(&forward_and_relative, &out_dir.join("info_plane.svg"))?;
    viz::render_mi_curves(&records, Estimator::InverseRelative, &out_dir.join("inverse_curves.svg"))?;
    viz::render_mi_curves(&records, Estimator::ForwardDecoder, &out_dir.join("forward_curves.svg"))?;
    println!("wrote figures under {}", out_dir.display());
    Ok(())
}
