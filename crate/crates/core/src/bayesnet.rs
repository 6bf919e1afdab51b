//! Naive-Bayes ground truth: a class variable with conditionally
//! independent categorical features.
//!
//! Model files are JSON:
//!
//! ```json
//! { "version": 1, "s": 4, "arities": [2, 2, 3],
//!   "prior": [0.25, 0.25, 0.25, 0.25],
//!   "cpts": [ [[0.9, 0.1], ...one row per class...], ...one table per feature... ] }
//! ```
//!
//! `cpts[i][j][k]` is `p(x_i = k | z = j)`. Dataset files are CSV with the
//! header `x0,...,x{n-1}` optionally followed by `label`; all cells are
//! non-negative integers.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::Encoded;
use crate::seed;

pub const MODEL_VERSION: u32 = 1;
/// Tolerance on probability-vector sums.
pub const SUM_TOLERANCE: f64 = 1e-12;
/// Smallest CPT cell produced by [`default_target_model`].
pub const CPT_FLOOR: f64 = 1e-4;

/// Class prior plus one conditional probability table per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct NaiveBayesModel {
    prior: Vec<f64>,
    arities: Vec<usize>,
    cpts: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    s: usize,
    arities: Vec<usize>,
    prior: Vec<f64>,
    cpts: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<ModelFile> for NaiveBayesModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "unsupported model schema version {} (expected {MODEL_VERSION})",
                f.version
            )));
        }
        if f.prior.len() != f.s {
            return Err(Error::Model(format!(
                "s = {} but prior has {} entries",
                f.s,
                f.prior.len()
            )));
        }
        if f.arities.len() != f.cpts.len() {
            return Err(Error::Model(format!(
                "{} arities for {} CPTs",
                f.arities.len(),
                f.cpts.len()
            )));
        }
        for (i, (table, &r)) in f.cpts.iter().zip(&f.arities).enumerate() {
            if table.iter().any(|row| row.len() != r) {
                return Err(Error::Model(format!(
                    "feature {i}: CPT rows must have arity {r} entries"
                )));
            }
        }
        NaiveBayesModel::new(f.prior, f.cpts)
    }
}

impl From<NaiveBayesModel> for ModelFile {
    fn from(m: NaiveBayesModel) -> Self {
        ModelFile {
            version: MODEL_VERSION,
            s: m.prior.len(),
            arities: m.arities,
            prior: m.prior,
            cpts: m.cpts,
        }
    }
}

fn check_distribution(values: &[f64], what: impl Fn() -> String) -> Result<()> {
    if let Some(bad) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
        return Err(Error::Model(format!(
            "{}: probability {bad} outside (0, 1]",
            what()
        )));
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Model(format!("{} sums to {total}, not 1", what())));
    }
    Ok(())
}

impl NaiveBayesModel {
    /// Builds a validated model from a prior and `cpts[feature][class][value]`.
    pub fn new(prior: Vec<f64>, cpts: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if prior.len() < 2 {
            return Err(Error::Model("need at least 2 classes".into()));
        }
        if cpts.is_empty() {
            return Err(Error::Model("need at least 1 feature".into()));
        }
        check_distribution(&prior, || "prior".into())?;
        let mut arities = Vec::with_capacity(cpts.len());
        for (i, table) in cpts.iter().enumerate() {
            if table.len() != prior.len() {
                return Err(Error::Model(format!(
                    "feature {i}: CPT has {} rows for {} classes",
                    table.len(),
                    prior.len()
                )));
            }
            let r = table[0].len();
            if r == 0 {
                return Err(Error::Model(format!("feature {i}: arity must be >= 1")));
            }
            for (j, row) in table.iter().enumerate() {
                if row.len() != r {
                    return Err(Error::Model(format!(
                        "feature {i}, row {j}: expected {r} entries, got {}",
                        row.len()
                    )));
                }
                check_distribution(row, || format!("feature {i}, row {j}"))?;
            }
            arities.push(r);
        }
        Ok(NaiveBayesModel {
            prior,
            arities,
            cpts,
        })
    }

    /// Skips validation; used to exercise error paths of consumers.
    #[cfg(test)]
    pub(crate) fn from_parts_unchecked(prior: Vec<f64>, cpts: Vec<Vec<Vec<f64>>>) -> Self {
        let arities = cpts.iter().map(|t| t[0].len()).collect();
        NaiveBayesModel {
            prior,
            arities,
            cpts,
        }
    }

    /// Number of classes `s`.
    pub fn classes(&self) -> usize {
        self.prior.len()
    }

    pub fn n_features(&self) -> usize {
        self.arities.len()
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// Table of feature `i`, one row per class.
    pub fn cpt(&self, feature: usize) -> &[Vec<f64>] {
        &self.cpts[feature]
    }

    pub fn cpts(&self) -> &[Vec<Vec<f64>>] {
        &self.cpts
    }

    /// Width of the one-hot encoding, `sum(r_i)`.
    pub fn one_hot_width(&self) -> usize {
        self.arities.iter().sum()
    }

    pub fn same_structure(&self, other: &NaiveBayesModel) -> bool {
        self.classes() == other.classes() && self.arities == other.arities
    }

    /// Forward sampling: `z ~ p(z)`, then each `x_i ~ p(x_i | z)`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Dataset> {
        if count == 0 {
            return Err(Error::Param("sample count must be >= 1".into()));
        }
        let mut rng = seed::rng(seed);
        let n = self.n_features();
        let mut cells = Vec::with_capacity(count * n);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let z = draw(&mut rng, &self.prior);
            labels.push(z as u32);
            for table in &self.cpts {
                cells.push(draw(&mut rng, &table[z]) as u32);
            }
        }
        let mut data = Dataset::new(n, cells, Some(labels))?;
        data.provenance = Provenance {
            source: "sample".into(),
            seed: Some(seed),
        };
        Ok(data)
    }

    /// `log p(z = j) + sum_i log p(x_i | z = j)` for every class.
    pub fn log_joint(&self, row: &[u32]) -> Vec<f64> {
        (0..self.classes())
            .map(|j| {
                self.prior[j].ln()
                    + row
                        .iter()
                        .zip(&self.cpts)
                        .map(|(&x, t)| t[j][x as usize].ln())
                        .sum::<f64>()
            })
            .collect()
    }

    /// Maximum a-posteriori class; ties go to the lowest index.
    pub fn classify(&self, row: &[u32]) -> usize {
        let scores = self.log_joint(row);
        let mut best = 0;
        for (j, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = j;
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Model(format!("{}: {j}", path.display())),
            other => other,
        })
    }
}

fn draw(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn dirichlet(rng: &mut impl Rng, alpha: f64, len: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut v: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Raises every cell below `floor` to `floor` and rescales the others so
/// the row still sums to one. Repeats until no cell is below the floor.
fn floor_row(row: &mut [f64], floor: f64) {
    let mut pinned = vec![false; row.len()];
    loop {
        let mut changed = false;
        for (v, p) in row.iter_mut().zip(pinned.iter_mut()) {
            if !*p && *v < floor {
                *v = floor;
                *p = true;
                changed = true;
            }
        }
        let pinned_mass: f64 = pinned.iter().filter(|p| **p).count() as f64 * floor;
        let free: f64 = row
            .iter()
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|(v, _)| v)
            .sum();
        if free > 0.0 {
            let scale = (1.0 - pinned_mass) / free;
            for (v, p) in row.iter_mut().zip(&pinned) {
                if !*p {
                    *v *= scale;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Seeded synthetic target model with `n_binary_features` binary features.
///
/// The prior is drawn from a symmetric Dirichlet(5); each CPT row from
/// Dirichlet(1), floored at [`CPT_FLOOR`] and renormalized.
pub fn default_target_model(
    n_binary_features: usize,
    classes: usize,
    seed: u64,
) -> Result<NaiveBayesModel> {
    if n_binary_features < 1 || classes < 2 {
        return Err(Error::Param(format!(
            "need n >= 1 features and >= 2 classes, got n = {n_binary_features}, classes = {classes}"
        )));
    }
    let mut rng = seed::rng(seed);
    let prior = dirichlet(&mut rng, 5.0, classes);
    let cpts = (0..n_binary_features)
        .map(|_| {
            (0..classes)
                .map(|_| {
                    let mut row = dirichlet(&mut rng, 1.0, 2);
                    floor_row(&mut row, CPT_FLOOR);
                    row
                })
                .collect()
        })
        .collect();
    NaiveBayesModel::new(prior, cpts)
}

/// Accuracy of the exact MAP classifier of `model_true` on `test`.
pub fn bayes_optimal_accuracy(model_true: &NaiveBayesModel, test: &Dataset) -> Result<f64> {
    let labels = test
        .labels()
        .ok_or_else(|| Error::Data("test set has no labels".into()))?;
    test.check_arities(model_true.arities())?;
    if test.rows() == 0 {
        return Err(Error::Data("empty test set".into()));
    }
    let hits = (0..test.rows())
        .filter(|&r| model_true.classify(test.row(r)) == labels[r] as usize)
        .count();
    Ok(hits as f64 / test.rows() as f64)
}

/// Where a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
}

/// Integer-coded categorical rows with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n_features: usize,
    cells: Vec<u32>,
    labels: Option<Vec<u32>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(n_features: usize, cells: Vec<u32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if n_features == 0 || !cells.len().is_multiple_of(n_features) {
            return Err(Error::Data(format!(
                "{} cells do not form rows of {n_features} features",
                cells.len()
            )));
        }
        let rows = cells.len() / n_features;
        if let Some(l) = &labels {
            if l.len() != rows {
                return Err(Error::Data(format!("{} labels for {rows} rows", l.len())));
            }
        }
        Ok(Dataset {
            n_features,
            cells,
            labels,
            provenance: Provenance::default(),
        })
    }

    pub fn rows(&self) -> usize {
        self.cells.len() / self.n_features
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.cells[r * self.n_features..(r + 1) * self.n_features]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    /// Copies the given rows.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut cells = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            cells.extend_from_slice(self.row(r));
        }
        Dataset {
            n_features: self.n_features,
            cells,
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
            provenance: self.provenance.clone(),
        }
    }

    /// Verifies every cell lies within its feature's arity.
    pub fn check_arities(&self, arities: &[usize]) -> Result<()> {
        if arities.len() != self.n_features {
            return Err(Error::Data(format!(
                "{} arities for {} features",
                arities.len(),
                self.n_features
            )));
        }
        for r in 0..self.rows() {
            for (i, (&v, &a)) in self.row(r).iter().zip(arities).enumerate() {
                if v as usize >= a {
                    return Err(Error::Data(format!(
                        "row {r}, feature {i}: value {v} outside arity {a}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Concatenated per-feature one-hot blocks, width `sum(arities)`.
    pub fn one_hot(&self, arities: &[usize]) -> Result<Tensor> {
        self.check_arities(arities)?;
        let width: usize = arities.iter().sum();
        let offsets: Vec<usize> = arities
            .iter()
            .scan(0, |acc, &a| {
                let o = *acc;
                *acc += a;
                Some(o)
            })
            .collect();
        let mut data = vec![0.0; self.rows() * width];
        for r in 0..self.rows() {
            for (i, &v) in self.row(r).iter().enumerate() {
                data[r * width + offsets[i] + v as usize] = 1.0;
            }
        }
        Tensor::new(self.rows(), width, data)
    }

    /// One-hot inputs plus labels, ready for training.
    pub fn encode(&self, arities: &[usize]) -> Result<Encoded> {
        Ok(Encoded {
            inputs: self.one_hot(arities)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| l.iter().map(|&v| v as usize).collect()),
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_csv_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_csv_to(&mut w)?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    fn write_csv_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut header: Vec<String> = (0..self.n_features).map(|i| format!("x{i}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for r in 0..self.rows() {
            let mut rec: Vec<String> = self.row(r).iter().map(u32::to_string).collect();
            if let Some(l) = &self.labels {
                rec.push(l[r].to_string());
            }
            w.write_record(&rec)?;
        }
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let mut data = Self::read_csv_from(csv::Reader::from_path(path)?)?;
        data.provenance.source = path.display().to_string();
        Ok(data)
    }

    pub fn from_csv_str(text: &str) -> Result<Dataset> {
        Self::read_csv_from(csv::Reader::from_reader(text.as_bytes()))
    }

    fn read_csv_from<R: std::io::Read>(mut rdr: csv::Reader<R>) -> Result<Dataset> {
        let header = rdr.headers()?.clone();
        let has_label = header.iter().next_back() == Some("label");
        let n_features = header.len() - usize::from(has_label);
        for (i, name) in header.iter().take(n_features).enumerate() {
            if name != format!("x{i}") {
                return Err(Error::Data(format!(
                    "column {i} is named {name:?}, expected \"x{i}\""
                )));
            }
        }
        let mut cells = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (i, field) in rec.iter().enumerate() {
                let v: u32 = field.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "row {line}, column {i}: {field:?} is not a non-negative integer"
                    ))
                })?;
                if i < n_features {
                    cells.push(v);
                } else {
                    labels.push(v);
                }
            }
        }
        Dataset::new(n_features, cells, has_label.then_some(labels))
    }
}
