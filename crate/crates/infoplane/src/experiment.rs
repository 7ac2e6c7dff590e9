//! Orchestration of a tracking run: train the encoder with checkpoints at
//! the query epochs, then for every (checkpoint, tap) pair train a forward
//! decoder and a conditional inverse decoder on the decoding split and
//! append MI records estimated on the evaluation split.
//!
//! Runs resume idempotently: completed (epoch, tap, direction, estimator)
//! keys are skipped, the unconditional baseline is reused when already
//! trained, and every derived seed is a pure function of the manifest seed,
//! so a re-run of an identical manifest reproduces identical records.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::encoder::{
    checkpoint_path, compute_taps, load_checkpoint, train_encoder, Encoder, EncoderConfig, Mode,
    Normalization, Tap, TrainSchedule,
};
use crate::error::{Error, Result};
use crate::forward_decoder::{
    linear_probe, make_forward_decoder, train_forward_decoder, ForwardDecoderSpec, ProbeSpec,
};
use crate::mi::{
    forward_mi_nats, inverse_mi_baselined, Direction, Estimator, MIRecord, RecordStore,
};
use crate::nn::Arr;
use crate::pixelcnn::{
    train_inverse_decoder, train_unconditional, CondShape, InverseDecoderSpec, PixelCnn,
    PixelCnnConfig,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const RECORDS_FILE: &str = "records.csv";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const BASELINE_FILE: &str = "unconditional.toml";
pub const DECODERS_DIR: &str = "decoders";
pub const METRICS_FILE: &str = "encoder_metrics.toml";

/// Path of the persisted conditional decoder for a (epoch, tap) job.
pub fn inverse_decoder_path(out_dir: &Path, epoch: usize, tap: Tap) -> PathBuf {
    out_dir.join(DECODERS_DIR).join(format!("inverse_e{epoch:04}_{tap}.ckpt"))
}

/// Decoder training budgets; one per estimator family, equal across all
/// (epoch, tap) jobs of a run so series stay comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderBudgets {
    pub forward: ForwardDecoderSpec,
    pub probe: ProbeSpec,
    pub inverse: InverseDecoderSpec,
}

impl Default for DecoderBudgets {
    fn default() -> Self {
        DecoderBudgets {
            forward: ForwardDecoderSpec::default(),
            probe: ProbeSpec::default(),
            inverse: InverseDecoderSpec::default(),
        }
    }
}

/// Full configuration of one tracking run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub schedule: TrainSchedule,
    /// Sorted, deduplicated; epoch 0 is the untouched initialization.
    pub query_epochs: Vec<usize>,
    pub taps: Vec<Tap>,
    pub budgets: DecoderBudgets,
    pub run_probes: bool,
    pub pixelcnn: PixelCnnConfig,
    /// In autoencoder mode the h3 forward decoder equals the h4 one up to
    /// a parameterless pooling, so one is computed and the other aliased.
    /// Set false to compute both.
    pub alias_autoencoder_h3_forward: bool,
    /// Filled in when the run starts.
    pub normalization: Option<Normalization>,
    pub split_digests: Option<[String; 3]>,
}

impl RunManifest {
    pub fn new(
        seed: u64,
        encoder: EncoderConfig,
        schedule: TrainSchedule,
        query_epochs: Vec<usize>,
        taps: Vec<Tap>,
        budgets: DecoderBudgets,
        pixelcnn: PixelCnnConfig,
    ) -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            seed,
            encoder,
            schedule,
            query_epochs,
            taps,
            budgets,
            run_probes: false,
            pixelcnn,
            alias_autoencoder_h3_forward: true,
            normalization: None,
            split_digests: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {}", self.version)));
        }
        self.encoder.validate()?;
        self.pixelcnn.validate()?;
        if self.query_epochs.is_empty() {
            return Err(Error::config("query_epochs", "need at least one query epoch"));
        }
        if self.query_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("query_epochs", "must be strictly increasing"));
        }
        if let Some(&last) = self.query_epochs.last() {
            if last > self.schedule.epochs {
                return Err(Error::config(
                    "query_epochs",
                    format!("epoch {last} beyond schedule end {}", self.schedule.epochs),
                ));
            }
        }
        if self.taps.is_empty() {
            return Err(Error::config("taps", "need at least one tap"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: RunManifest = toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Query-epoch presets. "paper" is the canonical checkpoint set
/// {0, 1, 10, 100, 200} clipped to the horizon; "log" doubles from one.
/// Both include the final epoch.
pub fn query_schedule(total_epochs: usize, preset: &str) -> Result<Vec<usize>> {
    if total_epochs == 0 {
        return Err(Error::config("total_epochs", "must be at least 1"));
    }
    let mut epochs: Vec<usize> = match preset {
        "paper" => [0usize, 1, 10, 100, 200].iter().copied().filter(|&e| e <= total_epochs).collect(),
        "log" => {
            let mut v = vec![0usize];
            let mut e = 1usize;
            while e < total_epochs {
                v.push(e);
                e *= 2;
            }
            v
        }
        other => {
            return Err(Error::config("preset", format!("unknown query preset `{other}`")));
        }
    };
    epochs.push(total_epochs);
    epochs.sort_unstable();
    epochs.dedup();
    Ok(epochs)
}

/// A decoder job that failed; the run continues and reports partial status.
#[derive(Debug)]
pub struct JobFailure {
    pub epoch: usize,
    pub tap: Tap,
    pub what: String,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct TrackingReport {
    pub records_written: usize,
    pub records_skipped: usize,
    pub failures: Vec<JobFailure>,
}

impl TrackingReport {
    /// 0 on success, 2 when some jobs failed but completed records remain.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

/// Unconditional-baseline sidecar, persisted so resumes reuse it.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BaselineRecord {
    mean_ll_nats: f64,
    stderr: f64,
    budget: usize,
}

fn subseed(base: u64, tag: u64, epoch: usize, tap: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
        .wrapping_add((epoch as u64).wrapping_mul(0x1656_67b1_9e37_79f9))
        .wrapping_add(tap as u64 + 1)
}

fn class_prior(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut prior = vec![0.0; num_classes];
    for &l in labels {
        prior[l] += 1.0;
    }
    let total: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= total);
    prior
}

/// Which decoder families (and optionally which jobs) a tracking
/// invocation should run. `None` restrictions mean "all in the manifest".
#[derive(Debug, Clone)]
pub struct JobFilter {
    pub forward: bool,
    pub inverse: bool,
    pub only_epochs: Option<Vec<usize>>,
    pub only_taps: Option<Vec<Tap>>,
}

impl Default for JobFilter {
    fn default() -> Self {
        JobFilter { forward: true, inverse: true, only_epochs: None, only_taps: None }
    }
}

impl JobFilter {
    fn wants_epoch(&self, epoch: usize) -> bool {
        self.only_epochs.as_ref().map_or(true, |e| e.contains(&epoch))
    }
    fn wants_tap(&self, tap: Tap) -> bool {
        self.only_taps.as_ref().map_or(true, |t| t.contains(&tap))
    }
}

/// Execute (or resume) a full tracking run in `out_dir`.
pub fn run_tracking(manifest: &mut RunManifest, split: &SplitDataset, out_dir: &Path) -> Result<TrackingReport> {
    run_tracking_filtered(manifest, split, out_dir, JobFilter::default())
}

/// [`run_tracking`] restricted to one decoder family; used by the one-off
/// decode subcommands.
pub fn run_tracking_filtered(
    manifest: &mut RunManifest,
    split: &SplitDataset,
    out_dir: &Path,
    filter: JobFilter,
) -> Result<TrackingReport> {
    manifest.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let encoder = Encoder::new(manifest.encoder.clone())?;
    if split.encoding.image_size() != manifest.encoder.input_size {
        return Err(Error::config(
            "encoder.input_size",
            format!(
                "dataset images are {}px but the config expects {}px",
                split.encoding.image_size(),
                manifest.encoder.input_size
            ),
        ));
    }

    // the manifest (normalization constants, split digests) is written
    // before any training starts
    let normalization = Normalization::fit(&split.encoding);
    manifest.normalization = Some(normalization.clone());
    manifest.split_digests = Some(split.digests());
    manifest.save(&out_dir.join(MANIFEST_FILE))?;

    let store = RecordStore::open(&out_dir.join(RECORDS_FILE))?;
    enforce_budget_consistency(&store, manifest)?;

    // encoder training with checkpoints at the query epochs
    let ckpt_dir = out_dir.join(CHECKPOINTS_DIR);
    let all_present = manifest
        .query_epochs
        .iter()
        .all(|&e| checkpoint_path(&ckpt_dir, e).exists());
    if !all_present {
        let params = encoder.init_params(manifest.seed);
        let outcome = train_encoder(
            &encoder,
            params,
            &split.encoding,
            &normalization,
            &manifest.schedule,
            &manifest.query_epochs,
            &ckpt_dir,
            subseed(manifest.seed, 1, 0, 0),
        )?;
        save_metrics(&outcome.metrics, &out_dir.join(METRICS_FILE))?;
    }

    // one unconditional inverse baseline per run
    let baseline = if filter.inverse {
        Some(load_or_train_baseline(manifest, split, out_dir)?)
    } else {
        None
    };

    let prior = class_prior(&split.evaluation.labels, split.evaluation.num_classes);
    let mut report = TrackingReport::default();

    for &epoch in &manifest.query_epochs {
        if !filter.wants_epoch(epoch) {
            continue;
        }
        let ckpt = checkpoint_path(&ckpt_dir, epoch);
        if !ckpt.exists() {
            return Err(Error::MissingCheckpoint { epoch, dir: ckpt_dir.clone() });
        }
        let params = load_checkpoint(&ckpt, &manifest.encoder)?;

        for &tap in &manifest.taps {
            if !filter.wants_tap(tap) {
                continue;
            }
            let aliased_forward = manifest.encoder.mode == Mode::Autoencoder
                && manifest.alias_autoencoder_h3_forward
                && tap == Tap::H3
                && manifest.taps.contains(&Tap::H4);

            if filter.forward && !aliased_forward {
                run_forward_jobs(manifest, split, &normalization, &params, epoch, tap, &prior, &store, &mut report);
            }
            if let Some(baseline) = &baseline {
                run_inverse_jobs(
                    manifest, split, &normalization, &params, epoch, tap, baseline, out_dir, &store,
                    &mut report,
                );
            }
        }

        // aliasing: copy the h4 forward records onto h3
        if filter.forward
            && manifest.encoder.mode == Mode::Autoencoder
            && manifest.alias_autoencoder_h3_forward
            && manifest.taps.contains(&Tap::H3)
            && manifest.taps.contains(&Tap::H4)
        {
            alias_forward_records(&store, epoch, &mut report)?;
        }
    }
    Ok(report)
}

fn enforce_budget_consistency(store: &RecordStore, manifest: &RunManifest) -> Result<()> {
    for record in store.load()? {
        let expected = match record.estimator {
            Estimator::ForwardDecoder => manifest.budgets.forward.epochs,
            Estimator::Probe => manifest.budgets.probe.epochs,
            Estimator::InverseRelative | Estimator::InverseBaselined => manifest.budgets.inverse.epochs,
            Estimator::ExactOracle => continue,
        };
        if record.decoder_budget != expected {
            return Err(Error::BudgetMismatch(format!(
                "existing record (epoch {}, tap {}, {}) used budget {} but the manifest says {expected}",
                record.epoch, record.tap, record.estimator, record.decoder_budget
            )));
        }
    }
    Ok(())
}

fn load_or_train_baseline(
    manifest: &RunManifest,
    split: &SplitDataset,
    out_dir: &Path,
) -> Result<BaselineRecord> {
    let path = out_dir.join(BASELINE_FILE);
    if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        let baseline: BaselineRecord =
            toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        if baseline.budget != manifest.budgets.inverse.epochs {
            return Err(Error::BudgetMismatch(format!(
                "stored unconditional baseline used budget {} but the manifest says {}",
                baseline.budget, manifest.budgets.inverse.epochs
            )));
        }
        return Ok(baseline);
    }
    let model = PixelCnn::new(manifest.pixelcnn.clone(), manifest.encoder.input_size, None)?;
    let params = model.init_params(subseed(manifest.seed, 2, 0, 0));
    let outcome = train_unconditional(
        &model,
        params,
        &split.decoding,
        &split.evaluation,
        &manifest.budgets.inverse,
        subseed(manifest.seed, 3, 0, 0),
    )?;
    let baseline = BaselineRecord {
        mean_ll_nats: outcome.evaluation.mean_ll_nats,
        stderr: outcome.evaluation.stderr,
        budget: manifest.budgets.inverse.epochs,
    };
    let text = toml::to_string_pretty(&baseline).map_err(|e| Error::Manifest(e.to_string()))?;
    std::fs::write(&path, text)?;
    Ok(baseline)
}

#[allow(clippy::too_many_arguments)]
fn run_forward_jobs(
    manifest: &RunManifest,
    split: &SplitDataset,
    normalization: &Normalization,
    params: &crate::nn::ParamSet,
    epoch: usize,
    tap: Tap,
    prior: &[f64],
    store: &RecordStore,
    report: &mut TrackingReport,
) {
    let forward_key = (epoch, tap, Direction::Forward, Estimator::ForwardDecoder);
    match store.contains(forward_key) {
        Ok(true) => report.records_skipped += 1,
        Ok(false) => {
            let job = || -> Result<MIRecord> {
                let decoder = make_forward_decoder(
                    &manifest.encoder,
                    params,
                    tap,
                    subseed(manifest.seed, 4, epoch, tap.index()),
                )?;
                let outcome = train_forward_decoder(
                    decoder,
                    normalization,
                    &split.decoding,
                    &split.evaluation,
                    &manifest.budgets.forward,
                    subseed(manifest.seed, 5, epoch, tap.index()),
                )?;
                Ok(MIRecord {
                    epoch,
                    tap,
                    direction: Direction::Forward,
                    estimator: Estimator::ForwardDecoder,
                    value_nats: forward_mi_nats(outcome.evaluation.mean_nll, prior)?,
                    decoder_budget: manifest.budgets.forward.epochs,
                    stderr: outcome.evaluation.stderr,
                })
            };
            append_job(store, job(), epoch, tap, "forward decoder", report);
        }
        Err(e) => report.failures.push(JobFailure { epoch, tap, what: "store".into(), error: e }),
    }

    if manifest.run_probes {
        let probe_key = (epoch, tap, Direction::Forward, Estimator::Probe);
        match store.contains(probe_key) {
            Ok(true) => report.records_skipped += 1,
            Ok(false) => {
                let job = || -> Result<MIRecord> {
                    let outcome = linear_probe(
                        &manifest.encoder,
                        params,
                        tap,
                        normalization,
                        &split.decoding,
                        &split.evaluation,
                        &manifest.budgets.probe,
                        subseed(manifest.seed, 6, epoch, tap.index()),
                    )?;
                    Ok(MIRecord {
                        epoch,
                        tap,
                        direction: Direction::Forward,
                        estimator: Estimator::Probe,
                        value_nats: forward_mi_nats(outcome.evaluation.mean_nll, prior)?,
                        decoder_budget: manifest.budgets.probe.epochs,
                        stderr: outcome.evaluation.stderr,
                    })
                };
                append_job(store, job(), epoch, tap, "linear probe", report);
            }
            Err(e) => report.failures.push(JobFailure { epoch, tap, what: "store".into(), error: e }),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_inverse_jobs(
    manifest: &RunManifest,
    split: &SplitDataset,
    normalization: &Normalization,
    params: &crate::nn::ParamSet,
    epoch: usize,
    tap: Tap,
    baseline: &BaselineRecord,
    out_dir: &Path,
    store: &RecordStore,
    report: &mut TrackingReport,
) {
    let rel_key = (epoch, tap, Direction::Inverse, Estimator::InverseRelative);
    let base_key = (epoch, tap, Direction::Inverse, Estimator::InverseBaselined);
    let (have_rel, have_base) = match (store.contains(rel_key), store.contains(base_key)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => (false, false),
    };
    if have_rel && have_base {
        report.records_skipped += 2;
        return;
    }

    let job = || -> Result<(MIRecord, MIRecord)> {
        let encoder = Encoder::new(manifest.encoder.clone())?;
        let (spatial, channels) = manifest.encoder.tap_shape(tap);
        let cond_shape = CondShape { spatial, channels };
        let model = PixelCnn::new(manifest.pixelcnn.clone(), manifest.encoder.input_size, Some(cond_shape))?;

        let cond_of = |data: &crate::data::Dataset| -> Arr {
            let taps = compute_taps(&encoder, params, normalization, data.images.view(), epoch);
            taps.into_iter().find(|t| t.tap == tap).expect("tap computed").values
        };
        let cond_dec = cond_of(&split.decoding);
        let cond_eval = cond_of(&split.evaluation);

        let model_params = model.init_params(subseed(manifest.seed, 7, epoch, tap.index()));
        let outcome = train_inverse_decoder(
            &model,
            model_params,
            &split.decoding,
            Some(&cond_dec),
            &split.evaluation,
            Some(&cond_eval),
            &manifest.budgets.inverse,
            subseed(manifest.seed, 8, epoch, tap.index()),
        )?;
        let decoder_path = inverse_decoder_path(out_dir, epoch, tap);
        std::fs::create_dir_all(decoder_path.parent().unwrap())?;
        outcome.params.save(&decoder_path, &model.config_digest())?;
        let relative = MIRecord {
            epoch,
            tap,
            direction: Direction::Inverse,
            estimator: Estimator::InverseRelative,
            value_nats: crate::mi::inverse_mi_relative(outcome.evaluation.mean_ll_nats)?,
            decoder_budget: manifest.budgets.inverse.epochs,
            stderr: outcome.evaluation.stderr,
        };
        let combined_stderr =
            (outcome.evaluation.stderr.powi(2) + baseline.stderr.powi(2)).sqrt();
        let baselined = MIRecord {
            epoch,
            tap,
            direction: Direction::Inverse,
            estimator: Estimator::InverseBaselined,
            value_nats: inverse_mi_baselined(
                outcome.evaluation.mean_ll_nats,
                manifest.budgets.inverse.epochs,
                baseline.mean_ll_nats,
                baseline.budget,
            )?,
            decoder_budget: manifest.budgets.inverse.epochs,
            stderr: combined_stderr,
        };
        Ok((relative, baselined))
    };

    match job() {
        Ok((relative, baselined)) => {
            if !have_rel {
                append_job(store, Ok(relative), epoch, tap, "inverse decoder (relative)", report);
            }
            if !have_base {
                append_job(store, Ok(baselined), epoch, tap, "inverse decoder (baselined)", report);
            }
        }
        Err(error) => {
            report.failures.push(JobFailure { epoch, tap, what: "inverse decoder".into(), error });
        }
    }
}

fn append_job(
    store: &RecordStore,
    job: Result<MIRecord>,
    epoch: usize,
    tap: Tap,
    what: &str,
    report: &mut TrackingReport,
) {
    match job.and_then(|record| store.append(&record)) {
        Ok(()) => report.records_written += 1,
        Err(error) => {
            report.failures.push(JobFailure { epoch, tap, what: what.to_string(), error });
        }
    }
}

fn alias_forward_records(store: &RecordStore, epoch: usize, report: &mut TrackingReport) -> Result<()> {
    let records = store.load()?;
    let sources: Vec<MIRecord> = records
        .iter()
        .filter(|r| r.epoch == epoch && r.tap == Tap::H4 && r.direction == Direction::Forward)
        .cloned()
        .collect();
    for source in sources {
        let key = (epoch, Tap::H3, Direction::Forward, source.estimator);
        if store.contains(key)? {
            report.records_skipped += 1;
            continue;
        }
        let aliased = MIRecord { tap: Tap::H3, ..source };
        store.append(&aliased)?;
        report.records_written += 1;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    metrics: Vec<crate::encoder::EpochMetrics>,
}

pub fn save_metrics(metrics: &[crate::encoder::EpochMetrics], path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(&MetricsFile { metrics: metrics.to_vec() })
        .map_err(|e| Error::Manifest(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_metrics(path: &Path) -> Result<Vec<crate::encoder::EpochMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let file: MetricsFile = toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    Ok(file.metrics)
}

/// Convenience accessor: records of one (tap, direction, estimator) series
/// sorted by epoch.
pub fn series_for(records: &[MIRecord], tap: Tap, estimator: Estimator) -> Vec<MIRecord> {
    let mut series: Vec<MIRecord> = records
        .iter()
        .filter(|r| r.tap == tap && r.estimator == estimator)
        .cloned()
        .collect();
    series.sort_by_key(|r| r.epoch);
    series
}

/// Paths of a run directory.
pub fn run_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join(MANIFEST_FILE),
        out_dir.join(RECORDS_FILE),
        out_dir.join(CHECKPOINTS_DIR),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pattern_dataset, three_way_split, PatternDatasetSpec};

    #[test]
    fn query_schedule_presets() {
        assert_eq!(query_schedule(200, "paper").unwrap(), vec![0, 1, 10, 100, 200]);
        assert_eq!(query_schedule(20, "paper").unwrap(), vec![0, 1, 10, 20]);
        let log8 = query_schedule(8, "log").unwrap();
        assert_eq!(log8, vec![0, 1, 2, 4, 8]);
        assert!(log8.windows(2).all(|w| w[0] < w[1]));
        assert!(query_schedule(8, "linear").is_err());
        assert!(query_schedule(0, "paper").is_err());
    }

    fn desk_manifest(seed: u64) -> RunManifest {
        let encoder = EncoderConfig {
            input_size: 8,
            hyper_layer_channels: [4, 6, 8],
            blocks_per_hyper_layer: 1,
            num_classes: 10,
            leaky_slope: 0.01,
            mode: Mode::Classifier,
        };
        let schedule = TrainSchedule { lr0: 0.05, epochs: 2, momentum: 0.9, weight_decay: 5e-4, batch_size: 30 };
        let budgets = DecoderBudgets {
            forward: ForwardDecoderSpec { epochs: 2, lr0: 0.05, batch_size: 30, ..Default::default() },
            probe: ProbeSpec { epochs: 2, lr0: 0.05, batch_size: 30, ..Default::default() },
            inverse: InverseDecoderSpec { epochs: 1, lr: 5e-4, lr_decay_per_epoch: 1.0, batch_size: 15, grad_clip: 5.0 },
        };
        let pixelcnn = PixelCnnConfig {
            num_hyper_layers: 3,
            gated_blocks_per_hyper_layer: 1,
            filters: 4,
            mixture_components: 2,
            levels: 256,
            log_scale_floor: -7.0,
        };
        RunManifest::new(
            seed,
            encoder,
            schedule,
            vec![0, 2],
            vec![Tap::H3, Tap::H4],
            budgets,
            pixelcnn,
        )
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = desk_manifest(3);
        let path = dir.path().join("m.toml");
        manifest.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded, manifest);

        let mut bad = manifest.clone();
        bad.query_epochs = vec![0, 5];
        assert!(bad.validate().is_err(), "query epoch beyond schedule end");
        let mut bad = manifest;
        bad.query_epochs = vec![1, 1];
        assert!(bad.validate().is_err(), "non-increasing epochs");
    }

    #[test]
    fn tracking_run_writes_expected_records_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_pattern_dataset(&PatternDatasetSpec::default(), 5, 90).unwrap();
        let (split, _) = three_way_split(&data, 1).unwrap();
        let mut manifest = desk_manifest(11);

        let report = run_tracking(&mut manifest, &split, dir.path()).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.exit_code(), 0);
        // 2 epochs x 2 taps x (forward + inverse relative + inverse baselined)
        assert_eq!(report.records_written, 12);

        let store = RecordStore::open(&dir.path().join(RECORDS_FILE)).unwrap();
        let records = store.load_non_empty().unwrap();
        assert_eq!(records.len(), 12);
        let forward = series_for(&records, Tap::H4, Estimator::ForwardDecoder);
        assert_eq!(forward.len(), 2);
        assert_eq!(forward[0].epoch, 0);
        assert_eq!(forward[1].epoch, 2);

        // manifest written with normalization and digests
        let saved = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(saved.normalization.is_some());
        assert_eq!(saved.split_digests.unwrap(), split.digests());

        // resume skips everything
        let report2 = run_tracking(&mut manifest, &split, dir.path()).unwrap();
        assert_eq!(report2.records_written, 0);
        assert_eq!(report2.records_skipped, 12);
        assert_eq!(store.load().unwrap().len(), 12);
    }

    #[test]
    fn tracking_refuses_budget_drift_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_pattern_dataset(&PatternDatasetSpec::default(), 7, 90).unwrap();
        let (split, _) = three_way_split(&data, 2).unwrap();
        let mut manifest = desk_manifest(13);
        run_tracking(&mut manifest, &split, dir.path()).unwrap();

        let mut drifted = manifest.clone();
        drifted.budgets.inverse.epochs = 3;
        let err = run_tracking(&mut drifted, &split, dir.path()).unwrap_err();
        assert!(matches!(err, Error::BudgetMismatch(_)), "{err}");
    }

    #[test]
    fn autoencoder_aliases_h3_forward_records() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_pattern_dataset(&PatternDatasetSpec::default(), 9, 90).unwrap();
        let (split, _) = three_way_split(&data, 3).unwrap();
        let mut manifest = desk_manifest(17);
        manifest.encoder.mode = Mode::Autoencoder;
        manifest.query_epochs = vec![1];

        let report = run_tracking(&mut manifest, &split, dir.path()).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        let store = RecordStore::open(&dir.path().join(RECORDS_FILE)).unwrap();
        let records = store.load().unwrap();
        let h3 = series_for(&records, Tap::H3, Estimator::ForwardDecoder);
        let h4 = series_for(&records, Tap::H4, Estimator::ForwardDecoder);
        assert_eq!(h3.len(), 1);
        assert_eq!(h4.len(), 1);
        assert_eq!(h3[0].value_nats, h4[0].value_nats, "h3 must alias h4");
        // inverse records are computed per tap, not aliased
        let h3_inv = series_for(&records, Tap::H3, Estimator::InverseRelative);
        let h4_inv = series_for(&records, Tap::H4, Estimator::InverseRelative);
        assert_eq!(h3_inv.len(), 1);
        assert_eq!(h4_inv.len(), 1);
        assert_ne!(h3_inv[0].value_nats, h4_inv[0].value_nats);
    }
}
