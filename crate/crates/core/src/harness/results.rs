use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 10] = [
    "sigma",
    "kl",
    "target_size",
    "algorithm",
    "lambda_schedule",
    "lambda_resolved",
    "seed",
    "test_accuracy",
    "train_seconds",
    "status",
];

/// Schedule label used by algorithms without an adversarial term.
pub const NO_SCHEDULE: &str = "none";
pub const STATUS_OK: &str = "ok";

/// One trained-and-evaluated grid cell. `seed` is the replicate index.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub kl: f64,
    pub target_size: usize,
    pub algorithm: String,
    pub lambda_schedule: String,
    pub lambda_resolved: f64,
    pub seed: u64,
    pub test_accuracy: Option<f64>,
    pub train_seconds: Option<f64>,
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes rows in the given order. Floats use the shortest representation
/// that parses back to the same value.
pub fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.sigma.to_string(),
            r.kl.to_string(),
            r.target_size.to_string(),
            r.algorithm.clone(),
            r.lambda_schedule.clone(),
            r.lambda_resolved.to_string(),
            r.seed.to_string(),
            opt(r.test_accuracy),
            opt(r.train_seconds),
            r.status.clone(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Parses a results table. Missing columns are reported by name.
pub fn rows_from_csv<R: Read>(reader: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let missing: Vec<&str> = CSV_COLUMNS
        .iter()
        .copied()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing columns: {}",
            missing.join(", ")
        )));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    rows_from_csv(std::fs::File::open(path)?)
}

/// Axes a summary can group by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Sigma,
    TargetSize,
    Algorithm,
    LambdaSchedule,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(Axis::Sigma),
            "target_size" => Ok(Axis::TargetSize),
            "algorithm" => Ok(Axis::Algorithm),
            "lambda_schedule" => Ok(Axis::LambdaSchedule),
            _ => Err(Error::Config(format!(
                "unknown axis {s:?} (expected sigma, target_size, algorithm or lambda_schedule)"
            ))),
        }
    }
}

/// Aggregate over the rows sharing one group key. Axes not grouped by are
/// `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub sigma: Option<f64>,
    pub target_size: Option<usize>,
    pub algorithm: Option<String>,
    pub lambda_schedule: Option<String>,
    pub count: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single row.
    pub std_accuracy: f64,
    pub mean_kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Key(Option<f64>, Option<usize>, Option<String>, Option<String>);

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        let sigma = match (self.0, other.0) {
            (Some(a), Some(b)) => a.total_cmp(&b),
            (a, b) => a.is_some().cmp(&b.is_some()),
        };
        sigma
            .then_with(|| self.1.cmp(&other.1))
            .then_with(|| self.2.cmp(&other.2))
            .then_with(|| self.3.cmp(&other.3))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Mean and spread of test accuracy over successful rows, grouped by
/// `group_by` and sorted by group key.
pub fn summarize(rows: &[SweepRow], group_by: &[Axis]) -> Result<Vec<SummaryRow>> {
    let has = |a: Axis| group_by.contains(&a);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let Some(acc) = r.test_accuracy else { continue };
        let key = Key(
            has(Axis::Sigma).then_some(r.sigma),
            has(Axis::TargetSize).then_some(r.target_size),
            has(Axis::Algorithm).then(|| r.algorithm.clone()),
            has(Axis::LambdaSchedule).then(|| r.lambda_schedule.clone()),
        );
        let e = groups.entry(key).or_default();
        e.0.push(acc);
        e.1.push(r.kl);
    }
    if groups.is_empty() {
        return Err(Error::Data("no successful rows to summarize".into()));
    }
    Ok(groups
        .into_iter()
        .map(|(k, (acc, kl))| {
            let (mean, std) = mean_std(&acc);
            SummaryRow {
                sigma: k.0,
                target_size: k.1,
                algorithm: k.2,
                lambda_schedule: k.3,
                count: acc.len(),
                mean_accuracy: mean,
                std_accuracy: std,
                mean_kl: mean_std(&kl).0,
            }
        })
        .collect())
}

/// Mean and sample standard deviation, summed in sorted order so the
/// result does not depend on input order.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn summary_to_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from(
        "sigma,target_size,algorithm,lambda_schedule,count,mean_accuracy,std_accuracy,mean_kl\n",
    );
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.sigma.map(|v| v.to_string()).unwrap_or_default(),
            s.target_size.map(|v| v.to_string()).unwrap_or_default(),
            s.algorithm.clone().unwrap_or_default(),
            s.lambda_schedule.clone().unwrap_or_default(),
            s.count,
            s.mean_accuracy,
            s.std_accuracy,
            s.mean_kl
        );
    }
    out
}

/// Spearman rank correlation with tied values given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Data(
            "spearman needs two equally long series of length >= 2".into(),
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean_std(&rx).0, mean_std(&ry).0);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Data(
            "spearman is undefined for a constant series".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}
