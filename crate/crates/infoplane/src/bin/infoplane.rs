//! Command-line front end. Every subcommand is a thin wrapper over the
//! library; the runnable examples under `examples/` show the same flows in
//! code.
//!
//! Exit codes: 0 success, 2 partial (some decoder jobs failed, completed
//! records kept), 64 usage error, 65 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::SeedableRng;

use infoplane::data::{
    generate_pattern_dataset, save_image_folder, splits_from_folder, template_split,
    PatternDatasetSpec, SplitDataset, TemplateDatasetSpec,
};
use infoplane::encoder::{compute_taps, load_checkpoint, Encoder, Tap};
use infoplane::error::Error;
use infoplane::experiment::{
    inverse_decoder_path, load_metrics, run_paths, run_tracking, run_tracking_filtered, JobFilter,
    RunManifest, METRICS_FILE,
};
use infoplane::mi::{compression_delta, Estimator, RecordStore};
use infoplane::nn::ParamSet;
use infoplane::pixelcnn::{conditional_sample, CondShape, PixelCnn};
use infoplane::viz;

#[derive(Parser)]
#[command(name = "infoplane", version, about = "Track decoder-based MI bounds through encoder training")]
struct Cli {
    /// Run manifest (TOML) for training and decoding commands.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the manifest seed when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output/run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Compute device; this build is CPU-only.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder, writing checkpoints at the manifest's query epochs.
    TrainEncoder {
        /// Image folder: root/<subset>/<class>/<image>.
        #[arg(long)]
        data: PathBuf,
    },
    /// Full tracking run: encoder, per-checkpoint decoders, MI records.
    RunTracking {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one forward decoder job and append its record.
    DecodeForward {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epoch: usize,
        #[arg(long)]
        tap: String,
    },
    /// Train one inverse decoder job and append its records.
    DecodeInverse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epoch: usize,
        #[arg(long)]
        tap: String,
    },
    /// Summarize the record store: series values and compression deltas.
    EstimateMi {
        /// Run directory holding records.csv.
        #[arg(long)]
        run: PathBuf,
    },
    /// Render a figure from a run's record store.
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// info_plane | mi_curves | loss_curves
        #[arg(long)]
        kind: String,
        /// Estimator for mi_curves and for the info-plane x-axis.
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Conditional sample grid: originals plus one column per checkpoint.
    SampleGrid {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tap: String,
        /// Comma-separated encoder epochs, e.g. 0,1,10,100,200.
        #[arg(long)]
        epochs: String,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        scale: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Partition a data folder and write the split digest manifest.
    MakeSplits {
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic dataset as an image-folder tree.
    GenSynth {
        /// pattern | templates
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 900)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        image_size: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Template pixel-flip rate (templates kind only).
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if cli.device != "cpu" {
        eprintln!(
            "config error at `device`: unsupported device `{}` (this build is CPU-only)",
            cli.device
        );
        return ExitCode::from(65);
    }
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config { .. } | Error::Manifest(_) => 65,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_manifest(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunManifest, Error> {
    let path = cli_config
        .as_ref()
        .ok_or_else(|| Error::Config {
            field: "config".into(),
            message: "this subcommand needs --config <manifest.toml>".into(),
        })?;
    let mut manifest = RunManifest::load(path)?;
    if let Some(seed) = seed {
        manifest.seed = seed;
    }
    Ok(manifest)
}

fn load_run_manifest(run: &Path) -> Result<RunManifest, Error> {
    RunManifest::load(&run.join("manifest.toml"))
}

fn splits_for(manifest: &RunManifest, data: &Path) -> Result<SplitDataset, Error> {
    let (split, report) = splits_from_folder(data, manifest.seed)?;
    if report.truncated > 0 {
        eprintln!("note: dropped {} trailing examples to equalize subsets", report.truncated);
    }
    if let Some(expected) = &manifest.split_digests {
        let got = split.digests();
        if got != *expected {
            return Err(Error::Contamination(
                "data folder digests differ from the manifest's recorded splits".into(),
            ));
        }
    }
    Ok(split)
}

fn dispatch(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::TrainEncoder { data } => {
            let mut manifest = load_manifest(&cli.config, cli.seed)?;
            // an encoder-only run is a tracking run with no decoder jobs
            let split = splits_for(&manifest, &data)?;
            let report = run_tracking_filtered(
                &mut manifest,
                &split,
                &cli.out,
                JobFilter { forward: false, inverse: false, ..JobFilter::default() },
            )?;
            println!(
                "encoder trained; checkpoints for epochs {:?} in {}",
                manifest.query_epochs,
                cli.out.join("checkpoints").display()
            );
            Ok(report.exit_code() as u8)
        }
        Command::RunTracking { data } => {
            let mut manifest = load_manifest(&cli.config, cli.seed)?;
            let split = splits_for(&manifest, &data)?;
            let report = run_tracking(&mut manifest, &split, &cli.out)?;
            println!(
                "tracking complete: {} records written, {} skipped, {} failures",
                report.records_written,
                report.records_skipped,
                report.failures.len()
            );
            for failure in &report.failures {
                eprintln!(
                    "failed: epoch {} tap {} ({}): {}",
                    failure.epoch, failure.tap, failure.what, failure.error
                );
            }
            Ok(report.exit_code() as u8)
        }
        Command::DecodeForward { data, epoch, tap } => {
            decode_one(&cli.config, cli.seed, &cli.out, &data, epoch, &tap, true)
        }
        Command::DecodeInverse { data, epoch, tap } => {
            decode_one(&cli.config, cli.seed, &cli.out, &data, epoch, &tap, false)
        }
        Command::EstimateMi { run } => {
            let store = RecordStore::open(&run.join("records.csv"))?;
            let records = store.load_non_empty()?;
            let mut estimators: Vec<Estimator> = records.iter().map(|r| r.estimator).collect();
            estimators.sort_by_key(|e| e.to_string());
            estimators.dedup();
            println!(
                "{:<6} {:<4} {:<18} {:>12} {:>8} {:>10}",
                "epoch", "tap", "estimator", "value", "budget", "stderr"
            );
            let mut sorted = records.clone();
            sorted.sort_by_key(|r| (r.tap, r.estimator.to_string(), r.epoch));
            for r in &sorted {
                println!(
                    "{:<6} {:<4} {:<18} {:>12.4} {:>8} {:>10.4}",
                    r.epoch,
                    r.tap.to_string(),
                    r.estimator.to_string(),
                    r.value_nats,
                    r.decoder_budget,
                    r.stderr
                );
            }
            println!();
            for estimator in estimators {
                let mut taps: Vec<Tap> = records
                    .iter()
                    .filter(|r| r.estimator == estimator)
                    .map(|r| r.tap)
                    .collect();
                taps.sort();
                taps.dedup();
                for tap in taps {
                    let series = infoplane::experiment::series_for(&records, tap, estimator);
                    if series.len() >= 2 {
                        let delta = compression_delta(&series)?;
                        println!("delta_c[{tap}, {estimator}] = {delta:.4} nats");
                    }
                }
            }
            Ok(0)
        }
        Command::Plot { run, kind, estimator, output } => {
            let (_, records_path, _) = run_paths(&run);
            let out = output.unwrap_or_else(|| run.join(format!("{kind}.svg")));
            match kind.as_str() {
                "info_plane" => {
                    let records = RecordStore::open(&records_path)?.load_non_empty()?;
                    let inverse_kind: Estimator =
                        estimator.as_deref().unwrap_or("inverse_relative").parse()?;
                    let filtered: Vec<_> = records
                        .into_iter()
                        .filter(|r| {
                            r.estimator == inverse_kind || r.estimator == Estimator::ForwardDecoder
                        })
                        .collect();
                    viz::render_info_plane(&filtered, &out)?;
                }
                "mi_curves" => {
                    let records = RecordStore::open(&records_path)?.load_non_empty()?;
                    let est: Estimator = estimator
                        .as_deref()
                        .ok_or_else(|| Error::Config {
                            field: "estimator".into(),
                            message: "mi_curves needs --estimator".into(),
                        })?
                        .parse()?;
                    viz::render_mi_curves(&records, est, &out)?;
                }
                "loss_curves" => {
                    let metrics = load_metrics(&run.join(METRICS_FILE))?;
                    viz::render_loss_curves(&metrics, &out)?;
                }
                other => {
                    return Err(Error::Config {
                        field: "kind".into(),
                        message: format!(
                            "unknown plot kind `{other}` (info_plane | mi_curves | loss_curves)"
                        ),
                    })
                }
            }
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::SampleGrid { run, data, tap, epochs, rows, scale, output } => {
            let manifest = load_run_manifest(&run)?;
            let tap = Tap::from_str(&tap)?;
            let epochs: Vec<usize> = epochs
                .split(',')
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|e| Error::Config {
                        field: "epochs".into(),
                        message: format!("bad epoch `{s}`: {e}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            let split = splits_for(&manifest, &data)?;
            let normalization = manifest.normalization.clone().ok_or_else(|| Error::Config {
                field: "normalization".into(),
                message: "run manifest has no normalization; run tracking first".into(),
            })?;

            let rows = rows.min(split.evaluation.len());
            let sources: Vec<ndarray::Array3<u8>> =
                (0..rows).map(|i| split.evaluation.image(i).to_owned()).collect();
            let mut source_batch = ndarray::Array4::<u8>::zeros((
                rows,
                3,
                split.evaluation.image_size(),
                split.evaluation.image_size(),
            ));
            for (i, img) in sources.iter().enumerate() {
                source_batch.index_axis_mut(ndarray::Axis(0), i).assign(img);
            }

            let encoder = Encoder::new(manifest.encoder.clone())?;
            let (spatial, channels) = manifest.encoder.tap_shape(tap);
            let cond_shape = CondShape { spatial, channels };
            let model =
                PixelCnn::new(manifest.pixelcnn.clone(), manifest.encoder.input_size, Some(cond_shape))?;

            let mut columns = Vec::new();
            for &epoch in &epochs {
                let ckpt = infoplane::encoder::checkpoint_path(&run.join("checkpoints"), epoch);
                if !ckpt.exists() {
                    return Err(Error::MissingCheckpoint { epoch, dir: run.join("checkpoints") });
                }
                let enc_params = load_checkpoint(&ckpt, &manifest.encoder)?;
                let taps =
                    compute_taps(&encoder, &enc_params, &normalization, source_batch.view(), epoch);
                let tap_values = taps.into_iter().find(|t| t.tap == tap).unwrap().values;

                let decoder_file = inverse_decoder_path(&run, epoch, tap);
                if !decoder_file.exists() {
                    return Err(Error::MissingCheckpoint { epoch, dir: run.join("decoders") });
                }
                let dec_params = ParamSet::load(&decoder_file, &model.config_digest())?;
                let mut imgs = Vec::with_capacity(rows);
                for row in 0..rows {
                    let cond_row = tap_values.index_axis(ndarray::Axis(0), row).to_owned();
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                        manifest.seed ^ ((epoch as u64) << 20) ^ row as u64,
                    );
                    imgs.push(conditional_sample(&model, &dec_params, Some(&cond_row), &mut rng)?);
                }
                columns.push((format!("epoch {epoch}"), imgs));
            }
            let out = output.unwrap_or_else(|| run.join(format!("samples_{tap}.png")));
            viz::sample_grid(&sources, &columns, scale, &out)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::MakeSplits { data } => {
            let seed = cli.seed.unwrap_or(0);
            let (split, report) = splits_from_folder(&data, seed)?;
            let digests = split.digests();
            std::fs::create_dir_all(&cli.out)?;
            let manifest_path = cli.out.join("splits.toml");
            let body = format!(
                "version = 1\nseed = {seed}\ntruncated = {}\n\n[digests]\nencoding = \"{}\"\ndecoding = \"{}\"\nevaluation = \"{}\"\n\n[sizes]\nencoding = {}\ndecoding = {}\nevaluation = {}\n",
                report.truncated,
                digests[0],
                digests[1],
                digests[2],
                split.encoding.len(),
                split.decoding.len(),
                split.evaluation.len(),
            );
            std::fs::write(&manifest_path, body)?;
            println!("wrote {}", manifest_path.display());
            Ok(0)
        }
        Command::GenSynth { kind, samples, image_size, classes, noise } => {
            let seed = cli.seed.unwrap_or(0);
            let dataset = match kind.as_str() {
                "pattern" => {
                    let spec = PatternDatasetSpec {
                        image_size,
                        num_classes: classes,
                        ..PatternDatasetSpec::default()
                    };
                    generate_pattern_dataset(&spec, seed, samples)?
                }
                "templates" => {
                    let spec = TemplateDatasetSpec {
                        image_size,
                        num_templates: classes,
                        noise_rate: noise,
                        labels: (0..classes).collect(),
            high_intensity: 255,
                    };
                    // discrete template samples repeat; ship three
                    // independent draws instead of splitting a pool
                    let (split, oracle) = template_split(&spec, seed, samples / 3)?;
                    println!(
                        "exact I(x; template) = {:.6} nats, I(x; label) = {:.6} nats",
                        oracle.exact_mi_template, oracle.exact_mi_label
                    );
                    save_image_folder(&split.encoding, &cli.out, "encoding")?;
                    save_image_folder(&split.decoding, &cli.out, "decoding")?;
                    save_image_folder(&split.evaluation, &cli.out, "evaluation")?;
                    println!(
                        "wrote {} images ({} per subset) under {}",
                        split.encoding.len() * 3,
                        split.encoding.len(),
                        cli.out.display()
                    );
                    return Ok(0);
                }
                other => {
                    return Err(Error::Config {
                        field: "kind".into(),
                        message: format!("unknown synthetic kind `{other}` (pattern | templates)"),
                    })
                }
            };
            let (split, _) = infoplane::data::three_way_split(&dataset, seed)?;
            save_image_folder(&split.encoding, &cli.out, "encoding")?;
            save_image_folder(&split.decoding, &cli.out, "decoding")?;
            save_image_folder(&split.evaluation, &cli.out, "evaluation")?;
            println!(
                "wrote {} images ({} per subset) under {}",
                split.encoding.len() * 3,
                split.encoding.len(),
                cli.out.display()
            );
            Ok(0)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn decode_one(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Path,
    data: &Path,
    epoch: usize,
    tap: &str,
    forward: bool,
) -> Result<u8, Error> {
    let mut manifest = load_manifest(config, seed)?;
    let tap = Tap::from_str(tap)?;
    if !manifest.query_epochs.contains(&epoch) {
        return Err(Error::Config {
            field: "epoch".into(),
            message: format!(
                "epoch {epoch} is not in the manifest's query epochs {:?}",
                manifest.query_epochs
            ),
        });
    }
    if !manifest.taps.contains(&tap) {
        return Err(Error::Config {
            field: "tap".into(),
            message: format!("tap {tap} is not in the manifest's taps {:?}", manifest.taps),
        });
    }
    let split = splits_for(&manifest, data)?;
    let filter = JobFilter {
        forward,
        inverse: !forward,
        only_epochs: Some(vec![epoch]),
        only_taps: Some(vec![tap]),
    };
    let report = run_tracking_filtered(&mut manifest, &split, out, filter)?;
    println!(
        "decode job done: {} records written, {} skipped",
        report.records_written, report.records_skipped
    );
    for failure in &report.failures {
        eprintln!("failed: {} ({})", failure.error, failure.what);
    }
    Ok(report.exit_code() as u8)
}
