//! Mutual-information estimators, the exact discrete oracle, compression
//! deltas, and the append-only record store.
//!
//! Decoder-based values are lower bounds: the forward bound is
//! H(prior) − NLL, the inverse bound is a mean conditional log-likelihood
//! reported either relative (up to the unknown data entropy) or baselined
//! against an unconditional decoder trained with the same budget. Series
//! mixing different decoder budgets are refused rather than reconciled.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoder::Tap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Inverse,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Forward => write!(f, "forward"),
            Direction::Inverse => write!(f, "inverse"),
        }
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "inverse" => Ok(Direction::Inverse),
            other => Err(Error::Store(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    ForwardDecoder,
    Probe,
    InverseRelative,
    InverseBaselined,
    ExactOracle,
}

impl Estimator {
    pub fn direction(&self) -> Direction {
        match self {
            Estimator::ForwardDecoder | Estimator::Probe => Direction::Forward,
            _ => Direction::Inverse,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Estimator::ForwardDecoder => "forward_decoder",
            Estimator::Probe => "probe",
            Estimator::InverseRelative => "inverse_relative",
            Estimator::InverseBaselined => "inverse_baselined",
            Estimator::ExactOracle => "exact_oracle",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward_decoder" => Ok(Estimator::ForwardDecoder),
            "probe" => Ok(Estimator::Probe),
            "inverse_relative" => Ok(Estimator::InverseRelative),
            "inverse_baselined" => Ok(Estimator::InverseBaselined),
            "exact_oracle" => Ok(Estimator::ExactOracle),
            other => Err(Error::Store(format!("unknown estimator `{other}`"))),
        }
    }
}

/// One MI estimate, traceable to an encoder epoch, a tap, and the decoder
/// budget that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MIRecord {
    pub epoch: usize,
    pub tap: Tap,
    pub direction: Direction,
    pub estimator: Estimator,
    pub value_nats: f64,
    /// Decoder training epochs behind this estimate.
    pub decoder_budget: usize,
    /// Standard error of the per-example log-likelihood mean.
    pub stderr: f64,
}

impl MIRecord {
    /// The resume key: one record per (epoch, tap, direction, estimator).
    pub fn key(&self) -> (usize, Tap, Direction, Estimator) {
        (self.epoch, self.tap, self.direction, self.estimator)
    }
}

/// Mean and standard error of a per-example statistic.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Entropy of a discrete distribution in nats.
pub fn entropy_nats(dist: &[f64]) -> f64 {
    dist.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Forward lower bound: H(prior) − mean decoder NLL.
pub fn forward_mi_nats(mean_nll: f64, class_prior: &[f64]) -> Result<f64> {
    if !(mean_nll >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "mean NLL must be non-negative, got {mean_nll}"
        )));
    }
    let total: f64 = class_prior.iter().sum();
    if class_prior.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter("class prior must be a distribution".into()));
    }
    Ok(entropy_nats(class_prior) - mean_nll)
}

/// Inverse bound up to the constant data entropy: the mean conditional
/// log-likelihood itself. Only differences across epochs are meaningful.
pub fn inverse_mi_relative(mean_cond_ll: f64) -> Result<f64> {
    if !mean_cond_ll.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "conditional log-likelihood must be finite, got {mean_cond_ll}"
        )));
    }
    Ok(mean_cond_ll)
}

/// Inverse bound baselined by an unconditional decoder trained with the
/// same budget: E[log q(x|h)] − E[log q(x)]. May be negative when the
/// conditional decoder underperforms; reported as-is.
pub fn inverse_mi_baselined(
    mean_cond_ll: f64,
    cond_budget: usize,
    mean_uncond_ll: f64,
    uncond_budget: usize,
) -> Result<f64> {
    if cond_budget != uncond_budget {
        return Err(Error::BudgetMismatch(format!(
            "conditional budget {cond_budget} vs unconditional budget {uncond_budget}"
        )));
    }
    if !mean_cond_ll.is_finite() || !mean_uncond_ll.is_finite() {
        return Err(Error::InvalidParameter("non-finite log-likelihood".into()));
    }
    Ok(mean_cond_ll - mean_uncond_ll)
}

/// Δc over one tap's series: peak value minus the final-epoch value.
/// Requires at least two records and a single decoder budget.
pub fn compression_delta(series: &[MIRecord]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidParameter(
            "compression delta needs at least two records".into(),
        ));
    }
    let budget = series[0].decoder_budget;
    if series.iter().any(|r| r.decoder_budget != budget) {
        return Err(Error::BudgetMismatch(
            "compression delta over mixed decoder budgets".into(),
        ));
    }
    let estimator = series[0].estimator;
    if series.iter().any(|r| r.estimator != estimator) {
        return Err(Error::MixedEstimators("compression delta series".into()));
    }
    let mut sorted: Vec<&MIRecord> = series.iter().collect();
    sorted.sort_by_key(|r| r.epoch);
    let last = sorted.last().unwrap().value_nats;
    let peak = sorted.iter().map(|r| r.value_nats).fold(f64::NEG_INFINITY, f64::max);
    Ok(peak - last)
}

/// Joint counts (or probabilities) over two finite alphabets.
#[derive(Debug, Clone)]
pub struct JointHistogram {
    counts: Array2<f64>,
}

impl JointHistogram {
    pub fn new(counts: Array2<f64>) -> Result<Self> {
        if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::InvalidParameter("joint counts must be non-negative".into()));
        }
        if counts.sum() <= 0.0 {
            return Err(Error::InvalidParameter("joint histogram is empty".into()));
        }
        Ok(JointHistogram { counts })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>, a: usize, b: usize) -> Result<Self> {
        let mut counts = Array2::<f64>::zeros((a, b));
        for (i, j) in pairs {
            counts[(i, j)] += 1.0;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &Array2<f64> {
        &self.counts
    }

    pub fn transposed(&self) -> JointHistogram {
        JointHistogram { counts: self.counts.t().to_owned() }
    }

    fn normalized(&self) -> Array2<f64> {
        &self.counts / self.counts.sum()
    }

    pub fn marginal_rows(&self) -> Array1<f64> {
        let p = self.normalized();
        p.sum_axis(ndarray::Axis(1))
    }

    pub fn marginal_cols(&self) -> Array1<f64> {
        let p = self.normalized();
        p.sum_axis(ndarray::Axis(0))
    }
}

/// Exact mutual information of a joint histogram in nats:
/// I = Σ p(a,b)·ln[p(a,b)/(p(a)p(b))], with 0·ln 0 = 0.
pub fn exact_mi_discrete(hist: &JointHistogram) -> f64 {
    let p = hist.normalized();
    let pa = p.sum_axis(ndarray::Axis(1));
    let pb = p.sum_axis(ndarray::Axis(0));
    let mut mi = 0.0;
    for ((i, j), &pij) in p.indexed_iter() {
        if pij > 0.0 {
            mi += pij * (pij / (pa[i] * pb[j])).ln();
        }
    }
    mi.max(0.0)
}

const SCHEMA_LINE: &str = "# schema: infoplane-mi-records/v1";
const HEADER: [&str; 7] = ["epoch", "tap", "direction", "estimator", "value_nats", "budget", "stderr"];

/// Append-only CSV store of [`MIRecord`]s, unique on
/// (epoch, tap, direction, estimator).
pub struct RecordStore {
    path: PathBuf,
}

impl RecordStore {
    /// Open (creating the file with schema marker and header if absent).
    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let mut f = std::fs::File::create(path)?;
            writeln!(f, "{SCHEMA_LINE}")?;
            writeln!(f, "{}", HEADER.join(","))?;
        }
        Ok(RecordStore { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn load(&self) -> Result<Vec<MIRecord>> {
        let content = std::fs::read_to_string(&self.path)?;
        let mut lines = content.lines();
        match lines.next() {
            Some(line) if line == SCHEMA_LINE => {}
            Some(line) => {
                return Err(Error::Store(format!(
                    "unsupported record schema `{line}` in {}",
                    self.path.display()
                )))
            }
            None => return Ok(Vec::new()),
        }
        let body = lines.collect::<Vec<_>>().join("\n").into_bytes();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(body.as_slice());
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() != HEADER.len() {
                return Err(Error::Store(format!("malformed record row: {row:?}")));
            }
            records.push(MIRecord {
                epoch: row[0].parse().map_err(|e| Error::Store(format!("bad epoch: {e}")))?,
                tap: row[1].parse()?,
                direction: row[2].parse()?,
                estimator: row[3].parse()?,
                value_nats: row[4].parse().map_err(|e| Error::Store(format!("bad value: {e}")))?,
                decoder_budget: row[5].parse().map_err(|e| Error::Store(format!("bad budget: {e}")))?,
                stderr: row[6].parse().map_err(|e| Error::Store(format!("bad stderr: {e}")))?,
            });
        }
        Ok(records)
    }

    /// Load, failing with an explicit error when no records exist yet.
    pub fn load_non_empty(&self) -> Result<Vec<MIRecord>> {
        let records = self.load()?;
        if records.is_empty() {
            return Err(Error::EmptyStore(self.path.clone()));
        }
        Ok(records)
    }

    pub fn contains(&self, key: (usize, Tap, Direction, Estimator)) -> Result<bool> {
        Ok(self.load()?.iter().any(|r| r.key() == key))
    }

    /// Append one record; refuses duplicates of the unique key.
    pub fn append(&self, record: &MIRecord) -> Result<()> {
        if self.contains(record.key())? {
            return Err(Error::Store(format!(
                "duplicate record for epoch {} tap {} {} {}",
                record.epoch, record.tap, record.direction, record.estimator
            )));
        }
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.path)?;
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            record.epoch,
            record.tap,
            record.direction,
            record.estimator,
            format_float(record.value_nats),
            record.decoder_budget,
            format_float(record.stderr),
        )?;
        Ok(())
    }
}

fn format_float(v: f64) -> String {
    // full round-trip precision
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_bound_examples() {
        let uniform10 = vec![0.1; 10];
        let ln10 = 10.0f64.ln();
        assert!((forward_mi_nats(ln10, &uniform10).unwrap()).abs() < 1e-12);
        assert!((forward_mi_nats(0.0, &uniform10).unwrap() - ln10).abs() < 1e-12);
        assert!((forward_mi_nats(1.0, &uniform10).unwrap() - (ln10 - 1.0)).abs() < 1e-12);
        assert!(forward_mi_nats(-0.1, &uniform10).is_err());
    }

    #[test]
    fn relative_inverse_is_difference_semantics() {
        let a = inverse_mi_relative(-3000.0).unwrap();
        let b = inverse_mi_relative(-3120.0).unwrap();
        assert!((b - a + 120.0).abs() < 1e-12);
        assert!((inverse_mi_relative(-5.0).unwrap() - inverse_mi_relative(-5.0).unwrap()).abs() == 0.0);
        // adding a constant to all entries leaves differences unchanged
        let c = 42.0;
        assert!(((b + c) - (a + c) - (b - a)).abs() < 1e-12);
        assert!(inverse_mi_relative(f64::NAN).is_err());
    }

    #[test]
    fn baselined_inverse_and_budget_guard() {
        assert_eq!(inverse_mi_baselined(-100.0, 5, -100.0, 5).unwrap(), 0.0);
        assert!((inverse_mi_baselined(-90.0, 5, -100.0, 5).unwrap() - 10.0).abs() < 1e-12);
        // negative allowed, flagged by sign rather than clamped
        assert!(inverse_mi_baselined(-110.0, 5, -100.0, 5).unwrap() < 0.0);
        assert!(matches!(
            inverse_mi_baselined(-90.0, 5, -100.0, 6),
            Err(Error::BudgetMismatch(_))
        ));
    }

    fn record(epoch: usize, value: f64, budget: usize) -> MIRecord {
        MIRecord {
            epoch,
            tap: Tap::H3,
            direction: Direction::Inverse,
            estimator: Estimator::InverseRelative,
            value_nats: value,
            decoder_budget: budget,
            stderr: 0.1,
        }
    }

    #[test]
    fn compression_delta_examples() {
        let series = vec![record(0, 10.0, 4), record(1, 50.0, 4), record(2, 30.0, 4)];
        assert!((compression_delta(&series).unwrap() - 20.0).abs() < 1e-12);

        let monotone = vec![record(0, 1.0, 4), record(1, 2.0, 4), record(2, 3.0, 4)];
        assert!(compression_delta(&monotone).unwrap().abs() < 1e-12);

        let mixed = vec![record(0, 1.0, 4), record(1, 2.0, 5)];
        assert!(matches!(compression_delta(&mixed), Err(Error::BudgetMismatch(_))));
        assert!(compression_delta(&series[..1]).is_err());
    }

    #[test]
    fn exact_mi_reference_values() {
        // independent uniform 2x2
        let indep = JointHistogram::new(array![[0.25, 0.25], [0.25, 0.25]]).unwrap();
        assert!(exact_mi_discrete(&indep).abs() < 1e-12);

        // perfectly correlated uniform over 4 symbols
        let mut diag = Array2::<f64>::zeros((4, 4));
        for i in 0..4 {
            diag[(i, i)] = 0.25;
        }
        let corr = JointHistogram::new(diag).unwrap();
        assert!((exact_mi_discrete(&corr) - 4.0f64.ln()).abs() < 1e-12);

        // brute-force evaluated reference for [[0.4,0.1],[0.1,0.4]]
        let joint = JointHistogram::new(array![[0.4, 0.1], [0.1, 0.4]]).unwrap();
        assert!((exact_mi_discrete(&joint) - 0.19274475702175753).abs() < 1e-10);
    }

    #[test]
    fn exact_mi_is_symmetric_and_bounded_by_entropy() {
        let joint = JointHistogram::new(array![[0.3, 0.05, 0.0], [0.1, 0.25, 0.3]]).unwrap();
        let mi = exact_mi_discrete(&joint);
        let mi_t = exact_mi_discrete(&joint.transposed());
        assert!((mi - mi_t).abs() < 1e-12);
        let ha = entropy_nats(joint.marginal_rows().as_slice().unwrap());
        let hb = entropy_nats(joint.marginal_cols().as_slice().unwrap());
        assert!(mi >= 0.0 && mi <= ha.min(hb) + 1e-12);
    }

    #[test]
    fn record_store_round_trip_and_unique_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let store = RecordStore::open(&path).unwrap();
        assert!(matches!(store.load_non_empty(), Err(Error::EmptyStore(_))));

        let rec = record(5, -123.456789012345, 8);
        store.append(&rec).unwrap();
        assert!(store.contains(rec.key()).unwrap());
        assert!(store.append(&rec).is_err());

        let loaded = store.load_non_empty().unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0], rec);

        // reopening preserves content
        let store2 = RecordStore::open(&path).unwrap();
        assert_eq!(store2.load().unwrap().len(), 1);
    }
}
