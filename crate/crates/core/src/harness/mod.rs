//! Accuracy-versus-divergence sweeps over perturbed source models.
//!
//! Every random stream in a sweep is derived with [`seed::mix`] from the base
//! seed, a stream tag and the grid indices of the cell it belongs to:
//!
//! | stream          | parts                                                    |
//! |-----------------|----------------------------------------------------------|
//! | source model    | base, `PERTURB`, sigma index, replicate                  |
//! | source rows     | base, `SOURCE`, sigma index, replicate                   |
//! | target rows     | base, `TARGET`, size index, replicate                    |
//! | test rows       | base, `TEST`, replicate                                  |
//! | training        | base, `TRAIN`, sigma index, size index, algorithm, schedule index, replicate |
//!
//! Unused indices in a training stream (the target baseline has no sigma,
//! the source baseline no target size) are `u64::MAX`.

mod results;

pub(crate) use results::mean_std;
pub use results::{
    read_rows, rows_from_csv, rows_to_csv, spearman, summarize, summary_to_csv, Axis, SummaryRow,
    SweepRow, CSV_COLUMNS, NO_SCHEDULE, STATUS_OK,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayesnet::{default_target_model, Dataset, NaiveBayesModel};
use crate::divergence::{kl_factorized, perturb_model, LambdaSchedule, PerturbationConfig};
use crate::error::{Error, Result};
use crate::nn::{evaluate, Encoded, Network, NetworkSpec, TrainConfig};
use crate::seed;
use crate::transfer::{
    fine_tune, train_baseline, train_dann, train_mcd, DannSpecs, FreezeStrategy, McdConfig,
    McdSpecs,
};

pub const SWEEP_VERSION: u32 = 1;
pub const DEFAULT_SIGMAS: [f64; 14] = [
    0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.5, 1.8, 2.0,
];
pub const DEFAULT_TARGET_SIZES: [usize; 7] = [50, 100, 200, 400, 800, 2000, 10000];

const PERTURB: u64 = 1;
const SOURCE: u64 = 2;
const TARGET: u64 = 3;
const TEST: u64 = 4;
const TRAIN: u64 = 5;
const UNUSED: u64 = u64::MAX;

/// Sort key of a result row: (sigma index, size index, algorithm id, schedule, replicate).
type RowKey = (usize, usize, u64, usize, usize);

/// Seed of the perturbation that produces a source model.
pub fn source_model_seed(base: u64, sigma_index: usize, replicate: usize) -> u64 {
    seed::mix(&[base, PERTURB, sigma_index as u64, replicate as u64])
}

/// Seed for sampling the labeled source rows.
pub fn source_rows_seed(base: u64, sigma_index: usize, replicate: usize) -> u64 {
    seed::mix(&[base, SOURCE, sigma_index as u64, replicate as u64])
}

/// Seed for sampling the target training rows of one size.
pub fn target_rows_seed(base: u64, size_index: usize, replicate: usize) -> u64 {
    seed::mix(&[base, TARGET, size_index as u64, replicate as u64])
}

/// Seed for sampling the target test rows.
pub fn test_rows_seed(base: u64, replicate: usize) -> u64 {
    seed::mix(&[base, TEST, replicate as u64])
}

/// Learning strategies a sweep can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Source,
    Target,
    Dann,
    DannTarget,
    Mcd,
    FinetuneAll,
    FinetuneLast1,
    FinetuneLast2,
    FinetuneLast3,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::Source,
        Algorithm::Target,
        Algorithm::Dann,
        Algorithm::DannTarget,
        Algorithm::Mcd,
        Algorithm::FinetuneAll,
        Algorithm::FinetuneLast1,
        Algorithm::FinetuneLast2,
        Algorithm::FinetuneLast3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Source => "source",
            Algorithm::Target => "target",
            Algorithm::Dann => "dann",
            Algorithm::DannTarget => "dann_target",
            Algorithm::Mcd => "mcd",
            Algorithm::FinetuneAll => "finetune_all",
            Algorithm::FinetuneLast1 => "finetune_last1",
            Algorithm::FinetuneLast2 => "finetune_last2",
            Algorithm::FinetuneLast3 => "finetune_last3",
        }
    }

    fn id(self) -> u64 {
        Algorithm::ALL
            .iter()
            .position(|&a| a == self)
            .expect("listed") as u64
    }

    /// Whether the algorithm has an adversarial weight and so runs once per
    /// lambda schedule.
    pub fn is_adversarial(self) -> bool {
        matches!(
            self,
            Algorithm::Dann | Algorithm::DannTarget | Algorithm::Mcd
        )
    }

    pub fn freeze_strategy(self) -> Option<FreezeStrategy> {
        match self {
            Algorithm::FinetuneAll => Some(FreezeStrategy::RetrainAll),
            Algorithm::FinetuneLast1 => Some(FreezeStrategy::RetrainLast(1)),
            Algorithm::FinetuneLast2 => Some(FreezeStrategy::RetrainLast(2)),
            Algorithm::FinetuneLast3 => Some(FreezeStrategy::RetrainLast(3)),
            _ => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

/// Where the target model comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetRef {
    Generated {
        n_features: usize,
        classes: usize,
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

impl Default for TargetRef {
    fn default() -> Self {
        TargetRef::Generated {
            n_features: 64,
            classes: 4,
            seed: 0,
        }
    }
}

impl TargetRef {
    pub fn resolve(&self) -> Result<NaiveBayesModel> {
        match self {
            TargetRef::Generated {
                n_features,
                classes,
                seed,
            } => default_target_model(*n_features, *classes, *seed),
            TargetRef::File { path } => NaiveBayesModel::load(path),
        }
    }
}

/// Full description of a sweep. `train.lambda` is not used; adversarial
/// algorithms run once per entry of `lambda_schedules`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub version: u32,
    pub target: TargetRef,
    pub sigmas: Vec<f64>,
    pub target_sizes: Vec<usize>,
    pub source_size: usize,
    pub test_size: usize,
    pub algorithms: Vec<Algorithm>,
    pub lambda_schedules: Vec<LambdaSchedule>,
    pub replicates: usize,
    pub base_seed: u64,
    pub train: TrainConfig,
    /// Classifier preset for the baselines and fine-tuning.
    pub network: String,
    /// Keep the ReLU in front of the label predictor's softmax.
    pub label_relu: bool,
    pub domain_width: usize,
    pub mcd: McdConfig,
    /// Fill `train_seconds`; off by default because wall-clock time breaks
    /// byte-identical output.
    pub record_timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            version: SWEEP_VERSION,
            target: TargetRef::default(),
            sigmas: DEFAULT_SIGMAS.to_vec(),
            target_sizes: DEFAULT_TARGET_SIZES.to_vec(),
            source_size: 10_000,
            test_size: 10_000,
            algorithms: Algorithm::ALL.to_vec(),
            lambda_schedules: vec![LambdaSchedule::Fixed(1.0)],
            replicates: 5,
            base_seed: 0,
            train: TrainConfig::default(),
            network: "baseline".into(),
            label_relu: true,
            domain_width: 1024,
            mcd: McdConfig::default(),
            record_timing: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != SWEEP_VERSION {
            return fail(format!(
                "unsupported sweep config version {} (expected {SWEEP_VERSION})",
                self.version
            ));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return fail("sigmas must be a non-empty list of finite values >= 0".into());
        }
        if self.target_sizes.is_empty() || self.target_sizes.contains(&0) {
            return fail("target_sizes must be a non-empty list of sizes >= 1".into());
        }
        if self.source_size == 0 || self.test_size == 0 {
            return fail("source_size and test_size must be >= 1".into());
        }
        if self.algorithms.is_empty() {
            return fail("at least one algorithm is required".into());
        }
        if self.replicates == 0 {
            return fail("replicates must be >= 1".into());
        }
        if self.algorithms.iter().any(|a| a.is_adversarial()) && self.lambda_schedules.is_empty() {
            return fail("adversarial algorithms need at least one lambda schedule".into());
        }
        for s in &self.lambda_schedules {
            s.validate()?;
        }
        if self.domain_width == 0 {
            return fail("domain_width must be >= 1".into());
        }
        if self.mcd.n_c == 0 {
            return fail("mcd.n_c must be >= 1".into());
        }
        self.train.validate()?;
        if let TargetRef::Generated {
            n_features,
            classes,
            ..
        } = self.target
        {
            if n_features == 0 || classes < 2 {
                return fail("generated target needs >= 1 feature and >= 2 classes".into());
            }
        }
        NetworkSpec::classifier_preset(&self.network, 2, 2, self.label_relu)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Schedules an algorithm runs under; non-adversarial ones run once.
    fn schedules_for(&self, a: Algorithm) -> Vec<(usize, Option<LambdaSchedule>)> {
        if a.is_adversarial() {
            self.lambda_schedules
                .iter()
                .copied()
                .map(Some)
                .enumerate()
                .collect()
        } else {
            vec![(0, None)]
        }
    }

    /// Number of result rows the sweep produces.
    pub fn cell_count(&self) -> usize {
        let per_sigma: usize = self
            .algorithms
            .iter()
            .map(|&a| self.schedules_for(a).len())
            .sum();
        per_sigma * self.sigmas.len() * self.target_sizes.len() * self.replicates
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }
}

/// A perturbed source model and its divergence from the target.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceRecord {
    pub sigma_index: usize,
    pub replicate: usize,
    pub sigma: f64,
    pub kl: f64,
    pub model: NaiveBayesModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub target: NaiveBayesModel,
    pub sources: Vec<SourceRecord>,
}

impl SweepResult {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| !r.is_ok())
    }
}

/// Execution settings that do not change results.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Worker threads; 0 uses one per available core.
    pub workers: usize,
    /// Called with (finished, total) after each training job.
    pub progress: Option<&'a (dyn Fn(usize, usize) + Sync)>,
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    run_sweep_with(cfg, &RunOptions::default())
}

struct Prepared {
    target: NaiveBayesModel,
    sources: Vec<SourceRecord>,
    source_data: Vec<Encoded>,
    target_data: Vec<Encoded>,
    test_data: Vec<Encoded>,
    classifier: NetworkSpec,
}

impl Prepared {
    fn source(
        &self,
        cfg: &SweepConfig,
        sigma_index: usize,
        rep: usize,
    ) -> (&SourceRecord, &Encoded) {
        let i = sigma_index * cfg.replicates + rep;
        (&self.sources[i], &self.source_data[i])
    }

    fn target(&self, cfg: &SweepConfig, size_index: usize, rep: usize) -> &Encoded {
        &self.target_data[size_index * cfg.replicates + rep]
    }
}

fn encode(ds: &Dataset, arities: &[usize]) -> Result<Encoded> {
    ds.encode(arities)
}

fn prepare(cfg: &SweepConfig) -> Result<Prepared> {
    let target = cfg.target.resolve()?;
    let arities = target.arities().to_vec();
    let b = cfg.base_seed;
    let mut sources = Vec::new();
    let mut source_data = Vec::new();
    for (si, &sigma) in cfg.sigmas.iter().enumerate() {
        for rep in 0..cfg.replicates {
            let model = perturb_model(
                &target,
                PerturbationConfig {
                    sigma,
                    seed: source_model_seed(b, si, rep),
                },
            )?;
            let kl = kl_factorized(&model, &target)?;
            let rows = model.sample(cfg.source_size, source_rows_seed(b, si, rep))?;
            source_data.push(encode(&rows, &arities)?);
            sources.push(SourceRecord {
                sigma_index: si,
                replicate: rep,
                sigma,
                kl,
                model,
            });
        }
    }
    let mut target_data = Vec::new();
    for (zi, &size) in cfg.target_sizes.iter().enumerate() {
        for rep in 0..cfg.replicates {
            let rows = target.sample(size, target_rows_seed(b, zi, rep))?;
            target_data.push(encode(&rows, &arities)?);
        }
    }
    let mut test_data = Vec::new();
    for rep in 0..cfg.replicates {
        let rows = target.sample(cfg.test_size, test_rows_seed(b, rep))?;
        test_data.push(encode(&rows, &arities)?);
    }
    let classifier = NetworkSpec::classifier_preset(
        &cfg.network,
        target.one_hot_width(),
        target.classes(),
        cfg.label_relu,
    )?;
    Ok(Prepared {
        target,
        sources,
        source_data,
        target_data,
        test_data,
        classifier,
    })
}

/// Unit of training work.
#[derive(Clone, Copy, Debug)]
enum Job {
    SourceBaseline {
        sigma: usize,
        rep: usize,
    },
    TargetBaseline {
        size: usize,
        rep: usize,
    },
    Cell {
        sigma: usize,
        size: usize,
        algorithm: Algorithm,
        schedule: usize,
        rep: usize,
    },
}

struct Outcome {
    accuracy: Result<f64>,
    seconds: f64,
    model: Option<Network>,
}

fn train_seed(
    cfg: &SweepConfig,
    sigma: u64,
    size: u64,
    algorithm: Algorithm,
    schedule: u64,
    rep: usize,
) -> u64 {
    seed::mix(&[
        cfg.base_seed,
        TRAIN,
        sigma,
        size,
        algorithm.id(),
        schedule,
        rep as u64,
    ])
}

fn run_job(
    cfg: &SweepConfig,
    p: &Prepared,
    job: Job,
    source_models: &[Option<Network>],
) -> Outcome {
    let start = Instant::now();
    let mut model = None;
    let accuracy = (|| -> Result<f64> {
        match job {
            Job::SourceBaseline { sigma, rep } => {
                let tc = cfg.train.with_seed(train_seed(
                    cfg,
                    sigma as u64,
                    UNUSED,
                    Algorithm::Source,
                    0,
                    rep,
                ));
                let net = train_baseline(p.source(cfg, sigma, rep).1, &p.classifier, &tc)?;
                let acc = evaluate(&net, &p.test_data[rep]);
                model = Some(net);
                acc
            }
            Job::TargetBaseline { size, rep } => {
                let tc = cfg.train.with_seed(train_seed(
                    cfg,
                    UNUSED,
                    size as u64,
                    Algorithm::Target,
                    0,
                    rep,
                ));
                let net = train_baseline(p.target(cfg, size, rep), &p.classifier, &tc)?;
                evaluate(&net, &p.test_data[rep])
            }
            Job::Cell {
                sigma,
                size,
                algorithm,
                schedule,
                rep,
            } => {
                let mut tc = cfg.train.with_seed(train_seed(
                    cfg,
                    sigma as u64,
                    size as u64,
                    algorithm,
                    schedule as u64,
                    rep,
                ));
                let (record, source) = p.source(cfg, sigma, rep);
                let target = p.target(cfg, size, rep);
                let test = &p.test_data[rep];
                let input = p.target.one_hot_width();
                let classes = p.target.classes();
                if let Some(strategy) = algorithm.freeze_strategy() {
                    let warm = source_models[sigma * cfg.replicates + rep]
                        .as_ref()
                        .ok_or_else(|| Error::Model("source baseline failed".into()))?;
                    let net = fine_tune(warm, target, strategy, &tc)?;
                    return evaluate(&net, test);
                }
                if algorithm.is_adversarial() {
                    tc.lambda = cfg.lambda_schedules[schedule];
                }
                match algorithm {
                    Algorithm::Dann | Algorithm::DannTarget => {
                        let specs = DannSpecs::standard(input, classes, cfg.label_relu)
                            .with_domain_width(cfg.domain_width);
                        let labeled = algorithm == Algorithm::DannTarget;
                        let unlabeled;
                        let t = if labeled {
                            target
                        } else {
                            unlabeled = target.without_labels();
                            &unlabeled
                        };
                        train_dann(source, t, &specs, &tc, record.kl, labeled)?.evaluate(test)
                    }
                    Algorithm::Mcd => {
                        let lambda = tc.lambda.resolve(record.kl);
                        let specs = McdSpecs::standard(input, classes);
                        train_mcd(
                            source,
                            &target.without_labels(),
                            &specs,
                            &tc,
                            lambda,
                            cfg.mcd,
                        )?
                        .evaluate(test)
                    }
                    _ => unreachable!("baselines run as separate jobs"),
                }
            }
        }
    })();
    Outcome {
        accuracy,
        seconds: start.elapsed().as_secs_f64(),
        model,
    }
}

/// Runs every cell of the grid. Results do not depend on `opts.workers`.
pub fn run_sweep_with(cfg: &SweepConfig, opts: &RunOptions) -> Result<SweepResult> {
    cfg.validate()?;
    let p = prepare(cfg)?;
    let reps = cfg.replicates;
    let wants = |f: fn(Algorithm) -> bool| cfg.algorithms.iter().any(|&a| f(a));
    let need_source = wants(|a| a == Algorithm::Source || a.freeze_strategy().is_some());
    let need_target = wants(|a| a == Algorithm::Target);

    let mut first = Vec::new();
    if need_source {
        for sigma in 0..cfg.sigmas.len() {
            for rep in 0..reps {
                first.push(Job::SourceBaseline { sigma, rep });
            }
        }
    }
    if need_target {
        for size in 0..cfg.target_sizes.len() {
            for rep in 0..reps {
                first.push(Job::TargetBaseline { size, rep });
            }
        }
    }
    let mut second = Vec::new();
    for sigma in 0..cfg.sigmas.len() {
        for size in 0..cfg.target_sizes.len() {
            for &algorithm in &cfg.algorithms {
                if matches!(algorithm, Algorithm::Source | Algorithm::Target) {
                    continue;
                }
                for (schedule, _) in cfg.schedules_for(algorithm) {
                    for rep in 0..reps {
                        second.push(Job::Cell {
                            sigma,
                            size,
                            algorithm,
                            schedule,
                            rep,
                        });
                    }
                }
            }
        }
    }

    let total = first.len() + second.len();
    let done = AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let run = |jobs: &[Job], models: &[Option<Network>]| -> Vec<Outcome> {
        pool.install(|| {
            jobs.par_iter()
                .map(|&job| {
                    let out = run_job(cfg, &p, job, models);
                    let n = done.fetch_add(1, Ordering::SeqCst) + 1;
                    if let Some(progress) = opts.progress {
                        progress(n, total);
                    }
                    out
                })
                .collect()
        })
    };
    let mut first_out = run(&first, &[]);
    let mut source_models: Vec<Option<Network>> = vec![None; cfg.sigmas.len() * reps];
    let mut source_acc = vec![usize::MAX; cfg.sigmas.len() * reps];
    let mut target_acc = vec![usize::MAX; cfg.target_sizes.len() * reps];
    for (i, (job, out)) in first.iter().zip(first_out.iter_mut()).enumerate() {
        match *job {
            Job::SourceBaseline { sigma, rep } => {
                source_models[sigma * reps + rep] = out.model.take();
                source_acc[sigma * reps + rep] = i;
            }
            Job::TargetBaseline { size, rep } => target_acc[size * reps + rep] = i,
            Job::Cell { .. } => unreachable!("cells run in the second phase"),
        }
    }
    let second_out = run(&second, &source_models);

    let mut keyed: Vec<(RowKey, SweepRow)> = Vec::with_capacity(cfg.cell_count());
    let make_row = |sigma: usize,
                    size: usize,
                    algorithm: Algorithm,
                    schedule: Option<usize>,
                    rep: usize,
                    out: &Outcome| {
        let record = &p.sources[sigma * reps + rep];
        let sched = schedule.map(|s| cfg.lambda_schedules[s]);
        let (accuracy, status) = match &out.accuracy {
            Ok(a) => (Some(*a), STATUS_OK.to_string()),
            Err(e) => (None, format!("error: {e}")),
        };
        (
            (sigma, size, algorithm.id(), schedule.unwrap_or(0), rep),
            SweepRow {
                sigma: cfg.sigmas[sigma],
                kl: record.kl,
                target_size: cfg.target_sizes[size],
                algorithm: algorithm.name().into(),
                lambda_schedule: sched
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| NO_SCHEDULE.into()),
                lambda_resolved: sched.map(|s| s.resolve(record.kl)).unwrap_or(0.0),
                seed: rep as u64,
                test_accuracy: accuracy,
                train_seconds: cfg.record_timing.then_some(out.seconds),
                status,
            },
        )
    };
    for sigma in 0..cfg.sigmas.len() {
        for size in 0..cfg.target_sizes.len() {
            for rep in 0..reps {
                if cfg.algorithms.contains(&Algorithm::Source) {
                    let out = &first_out[source_acc[sigma * reps + rep]];
                    keyed.push(make_row(sigma, size, Algorithm::Source, None, rep, out));
                }
                if cfg.algorithms.contains(&Algorithm::Target) {
                    let out = &first_out[target_acc[size * reps + rep]];
                    keyed.push(make_row(sigma, size, Algorithm::Target, None, rep, out));
                }
            }
        }
    }
    for (job, out) in second.iter().zip(&second_out) {
        if let Job::Cell {
            sigma,
            size,
            algorithm,
            schedule,
            rep,
        } = *job
        {
            let sched = algorithm.is_adversarial().then_some(schedule);
            keyed.push(make_row(sigma, size, algorithm, sched, rep, out));
        }
    }
    keyed.sort_by_key(|(k, _)| *k);
    Ok(SweepResult {
        rows: keyed.into_iter().map(|(_, r)| r).collect(),
        target: p.target,
        sources: p.sources,
    })
}

/// Directory name for a sweep's outputs.
pub fn run_dir_name(cfg: &SweepConfig) -> Result<String> {
    Ok(format!("run-{}", cfg.hash()?))
}

/// Writes `results.csv`, `resolved_config.json` and the target and source
/// models under `root/run-<hash>` and returns that directory.
pub fn persist_run(cfg: &SweepConfig, result: &SweepResult, root: &Path) -> Result<PathBuf> {
    let dir = root.join(run_dir_name(cfg)?);
    let models = dir.join("models");
    std::fs::create_dir_all(&models)?;
    std::fs::write(dir.join("resolved_config.json"), cfg.to_json()?)?;
    std::fs::write(dir.join("results.csv"), result.to_csv()?)?;
    result.target.save(models.join("target.json"))?;
    for s in &result.sources {
        s.model
            .save(models.join(source_model_file(s.sigma_index, s.replicate)))?;
    }
    Ok(dir)
}

pub fn source_model_file(sigma_index: usize, replicate: usize) -> String {
    format!("source_s{sigma_index}_r{replicate}.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny() -> SweepConfig {
        SweepConfig {
            target: TargetRef::Generated {
                n_features: 4,
                classes: 3,
                seed: 2,
            },
            sigmas: vec![0.1, 1.0],
            target_sizes: vec![20, 40],
            source_size: 120,
            test_size: 100,
            replicates: 2,
            domain_width: 16,
            lambda_schedules: vec![LambdaSchedule::Fixed(1.0), LambdaSchedule::Bounded(2.0)],
            train: TrainConfig {
                epochs: 1,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ..SweepConfig::default()
        }
    }

    #[test]
    fn one_cell_gives_one_row() {
        let cfg = SweepConfig {
            sigmas: vec![0.5],
            target_sizes: vec![30],
            replicates: 1,
            algorithms: vec![Algorithm::Source],
            ..tiny()
        };
        assert_eq!(cfg.cell_count(), 1);
        let res = run_sweep(&cfg).unwrap();
        assert_eq!(res.rows.len(), 1);
        let r = &res.rows[0];
        assert_eq!(
            (r.sigma, r.target_size, r.algorithm.as_str()),
            (0.5, 30, "source")
        );
        assert_eq!(r.lambda_schedule, NO_SCHEDULE);
        assert!(r.is_ok() && r.train_seconds.is_none());
    }

    #[test]
    fn full_grid_is_complete_sorted_and_reproducible() {
        let cfg = tiny();
        let a = run_sweep_with(
            &cfg,
            &RunOptions {
                workers: 1,
                progress: None,
            },
        )
        .unwrap();
        let b = run_sweep_with(
            &cfg,
            &RunOptions {
                workers: 3,
                progress: None,
            },
        )
        .unwrap();
        assert_eq!(a.rows.len(), cfg.cell_count());
        assert_eq!(cfg.cell_count(), (6 + 3 * 2) * 2 * 2 * 2);
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert!(!a.has_errors(), "{:?}", a.rows.iter().find(|r| !r.is_ok()));
        let adversarial: Vec<_> = a.rows.iter().filter(|r| r.algorithm == "dann").collect();
        assert_eq!(adversarial.len(), 2 * 2 * 2 * 2);
        assert!(adversarial
            .iter()
            .any(|r| r.lambda_schedule == "bounded(2)"));
        for r in &a.rows {
            assert!((0.0..=1.0).contains(&r.test_accuracy.unwrap()));
            assert!(r.kl >= 0.0);
            if r.lambda_schedule == "fixed(1)" {
                assert_eq!(r.lambda_resolved, 1.0);
            }
        }
        let mut sorted = a.rows.clone();
        sorted.sort_by(|x, y| {
            x.sigma
                .total_cmp(&y.sigma)
                .then(x.target_size.cmp(&y.target_size))
        });
        assert_eq!(sorted, a.rows);
    }

    #[test]
    fn baselines_are_shared_across_cells() {
        let res = run_sweep(&SweepConfig {
            algorithms: vec![Algorithm::Source, Algorithm::Target],
            ..tiny()
        })
        .unwrap();
        let acc = |alg: &str, sigma: f64, size: usize, seed: u64| {
            res.rows
                .iter()
                .find(|r| {
                    r.algorithm == alg
                        && r.sigma == sigma
                        && r.target_size == size
                        && r.seed == seed
                })
                .unwrap()
                .test_accuracy
        };
        assert_eq!(acc("source", 1.0, 20, 1), acc("source", 1.0, 40, 1));
        assert_eq!(acc("target", 0.1, 40, 0), acc("target", 1.0, 40, 0));
    }

    #[test]
    fn failing_cells_become_error_rows() {
        let cfg = SweepConfig {
            network: "m1".into(),
            algorithms: vec![
                Algorithm::Source,
                Algorithm::FinetuneLast3,
                Algorithm::FinetuneLast1,
            ],
            ..tiny()
        };
        let res = run_sweep(&cfg).unwrap();
        assert_eq!(res.rows.len(), cfg.cell_count());
        assert!(res.has_errors());
        for r in &res.rows {
            if r.algorithm == "finetune_last3" {
                assert!(r.status.starts_with("error: "), "{}", r.status);
                assert_eq!(r.test_accuracy, None);
            } else {
                assert!(r.is_ok());
            }
        }
    }

    #[test]
    fn persisted_sources_reproduce_recorded_kl() {
        let cfg = SweepConfig {
            algorithms: vec![Algorithm::Source],
            ..tiny()
        };
        let res = run_sweep(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = persist_run(&cfg, &res, dir.path()).unwrap();
        assert!(run.ends_with(run_dir_name(&cfg).unwrap()));
        let target = NaiveBayesModel::load(run.join("models/target.json")).unwrap();
        for r in &res.rows {
            let si = cfg.sigmas.iter().position(|&s| s == r.sigma).unwrap();
            let src = NaiveBayesModel::load(
                run.join("models")
                    .join(source_model_file(si, r.seed as usize)),
            )
            .unwrap();
            assert!((kl_factorized(&src, &target).unwrap() - r.kl).abs() <= 1e-12);
        }
        let csv = std::fs::read_to_string(run.join("results.csv")).unwrap();
        assert_eq!(rows_from_csv(csv.as_bytes()).unwrap(), res.rows);
        let snapshot = std::fs::read_to_string(run.join("resolved_config.json")).unwrap();
        assert_eq!(SweepConfig::from_json(&snapshot).unwrap(), cfg);
    }

    #[test]
    fn config_validation_and_json() {
        let cfg = tiny();
        let back = SweepConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_ne!(
            SweepConfig {
                base_seed: 1,
                ..tiny()
            }
            .hash()
            .unwrap(),
            cfg.hash().unwrap()
        );
        assert!(SweepConfig::from_json(r#"{"version": 1, "sigmaz": [1.0]}"#).is_err());
        assert!(SweepConfig::from_json(r#"{"version": 2}"#).is_err());
        let d = SweepConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(d, SweepConfig::default());
        assert_eq!(d.sigmas.len(), 14);
        for bad in [
            SweepConfig {
                sigmas: vec![-0.1],
                ..tiny()
            },
            SweepConfig {
                target_sizes: vec![0],
                ..tiny()
            },
            SweepConfig {
                algorithms: vec![],
                ..tiny()
            },
            SweepConfig {
                replicates: 0,
                ..tiny()
            },
            SweepConfig {
                lambda_schedules: vec![],
                ..tiny()
            },
            SweepConfig {
                network: "m9".into(),
                ..tiny()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let text = r#"{"version":1,"algorithms":["dann_target","finetune_last2"],"lambda_schedules":["kl_direct"],"target":{"kind":"file","path":"t.json"}}"#;
        let c = SweepConfig::from_json(text).unwrap();
        assert_eq!(
            c.algorithms,
            vec![Algorithm::DannTarget, Algorithm::FinetuneLast2]
        );
        assert_eq!(c.lambda_schedules, vec![LambdaSchedule::KlDirect]);
    }

    #[test]
    fn training_streams_are_distinct() {
        let cfg = SweepConfig::default();
        let mut seen = HashSet::new();
        for si in 0..cfg.sigmas.len() as u64 {
            for rep in 0..cfg.replicates {
                assert!(seen.insert(train_seed(&cfg, si, UNUSED, Algorithm::Source, 0, rep)));
                for zi in 0..cfg.target_sizes.len() as u64 {
                    for a in Algorithm::ALL {
                        for sched in 0..3 {
                            assert!(seen.insert(train_seed(&cfg, si, zi, a, sched, rep)));
                        }
                    }
                }
            }
        }
        for zi in 0..cfg.target_sizes.len() as u64 {
            for rep in 0..cfg.replicates {
                assert!(seen.insert(train_seed(&cfg, UNUSED, zi, Algorithm::Target, 0, rep)));
            }
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("dan".parse::<Algorithm>().is_err());
    }
}
