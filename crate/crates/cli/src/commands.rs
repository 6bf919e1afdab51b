use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use dtl_core::bayesnet::{Dataset, NaiveBayesModel};
use dtl_core::divergence::{kl_factorized, perturb_model, PerturbationConfig};
use dtl_core::harness::{
    self, persist_run, read_rows, run_dir_name, run_sweep_with, source_model_file, summarize,
    summary_to_csv, Algorithm, Axis, RunOptions, SweepConfig,
};
use dtl_core::nn::{Encoded, NetworkSpec, ParameterFile};
use dtl_core::plot::{self, Figure, PlotFilter};
use dtl_core::transfer::{
    fine_tune, train_baseline, train_dann, train_mcd, DannSpecs, McdSpecs, TrainedModel,
};

use crate::config::{self, SimulateConfig, TrainRunConfig};

/// Failure that maps to exit status 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(e: impl fmt::Display) -> anyhow::Error {
    anyhow!(InputError(e.to_string()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub struct SimulateArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub sigmas: Vec<f64>,
    pub base_seed: Option<u64>,
    pub target_model: Option<PathBuf>,
    pub n_features: Option<usize>,
    pub classes: Option<usize>,
    pub model_seed: Option<u64>,
    pub rows: Option<usize>,
}

pub fn simulate(args: SimulateArgs) -> anyhow::Result<ExitCode> {
    let mut cfg: SimulateConfig = config::load(args.config.as_deref())?;
    if !args.sigmas.is_empty() {
        cfg.sigmas = args.sigmas;
    }
    if let Some(s) = args.base_seed {
        cfg.base_seed = s;
    }
    if let Some(path) = args.target_model {
        cfg.target = harness::TargetRef::File { path };
    }
    if args.n_features.is_some() || args.classes.is_some() || args.model_seed.is_some() {
        let (n0, s0, seed0) = match cfg.target {
            harness::TargetRef::Generated {
                n_features,
                classes,
                seed,
            } => (n_features, classes, seed),
            harness::TargetRef::File { .. } => {
                bail!("--n-features/--classes/--model-seed conflict with a target model file")
            }
        };
        cfg.target = harness::TargetRef::Generated {
            n_features: args.n_features.unwrap_or(n0),
            classes: args.classes.unwrap_or(s0),
            seed: args.model_seed.unwrap_or(seed0),
        };
    }
    if let Some(n) = args.rows {
        cfg.source_rows = n;
        cfg.target_rows = n;
        cfg.test_rows = n;
    }
    cfg.validate()?;

    let target = cfg.target.resolve()?;
    let models = args.out.join("models");
    let data = args.out.join("data");
    create_dir(&models)?;
    create_dir(&data)?;
    config::write_snapshot(&cfg, &args.out.join("resolved_config.json"))?;
    target.save(models.join("target.json"))?;
    let mut index = String::from("sigma_index,sigma,kl,model,data\n");
    for (i, &sigma) in cfg.sigmas.iter().enumerate() {
        let source = perturb_model(
            &target,
            PerturbationConfig {
                sigma,
                seed: harness::source_model_seed(cfg.base_seed, i, 0),
            },
        )?;
        let kl = kl_factorized(&source, &target)?;
        let model_file = source_model_file(i, 0);
        let data_file = format!("source_s{i}.csv");
        source.save(models.join(&model_file))?;
        source
            .sample(
                cfg.source_rows,
                harness::source_rows_seed(cfg.base_seed, i, 0),
            )?
            .write_csv(data.join(&data_file))?;
        index.push_str(&format!(
            "{i},{sigma},{kl},models/{model_file},data/{data_file}\n"
        ));
        eprintln!("sigma {sigma}: kl {kl:.6}");
    }
    std::fs::write(args.out.join("sources.csv"), index)?;
    target
        .sample(
            cfg.target_rows,
            harness::target_rows_seed(cfg.base_seed, 0, 0),
        )?
        .write_csv(data.join("target_train.csv"))?;
    target
        .sample(cfg.test_rows, harness::test_rows_seed(cfg.base_seed, 0))?
        .write_csv(data.join("target_test.csv"))?;
    eprintln!(
        "wrote {} source models to {}",
        cfg.sigmas.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Formats like C's `%.12g`.
pub fn format_sig12(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..12).contains(&exp) {
        trim(&format!("{:.*}", (11 - exp) as usize, v))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    }
}

pub fn kl(p: &Path, q: &Path) -> anyhow::Result<ExitCode> {
    let mp = NaiveBayesModel::load(p).with_context(|| format!("loading {}", p.display()))?;
    let mq = NaiveBayesModel::load(q).with_context(|| format!("loading {}", q.display()))?;
    match kl_factorized(&mp, &mq) {
        Ok(v) => {
            println!("{}", format_sig12(v));
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ dtl_core::Error::Structure(_)) => Err(input_error(e)),
        Err(e) => Err(e.into()),
    }
}

fn infer_shape(sets: &[&Dataset]) -> (Vec<usize>, usize) {
    let n = sets[0].n_features();
    let mut arities = vec![2usize; n];
    let mut classes = 2usize;
    for ds in sets {
        for r in 0..ds.rows() {
            for (a, &v) in arities.iter_mut().zip(ds.row(r)) {
                *a = (*a).max(v as usize + 1);
            }
        }
        if let Some(labels) = ds.labels() {
            for &l in labels {
                classes = classes.max(l as usize + 1);
            }
        }
    }
    (arities, classes)
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::read_csv(path).with_context(|| format!("reading {}", path.display()))
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub algorithm: Option<Algorithm>,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub kl: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub lambda: Option<dtl_core::divergence::LambdaSchedule>,
}

pub fn train(args: TrainArgs) -> anyhow::Result<ExitCode> {
    let mut cfg: TrainRunConfig = config::load(args.config.as_deref())?;
    if let Some(a) = args.algorithm {
        cfg.algorithm = a;
    }
    cfg.source = args.source.or(cfg.source);
    cfg.target = args.target.or(cfg.target);
    cfg.model = args.model.or(cfg.model);
    if let Some(k) = args.kl {
        cfg.kl = k;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(l) = args.lambda {
        cfg.train.lambda = l;
    }
    cfg.validate()?;

    let source = cfg.source.as_deref().map(read_dataset).transpose()?;
    let target = cfg.target.as_deref().map(read_dataset).transpose()?;
    let present: Vec<&Dataset> = source.iter().chain(target.iter()).collect();
    let (arities, classes) = match &cfg.model {
        Some(p) => {
            let m = NaiveBayesModel::load(p).with_context(|| format!("loading {}", p.display()))?;
            (m.arities().to_vec(), m.classes())
        }
        None => infer_shape(&present),
    };
    let encode = |d: &Option<Dataset>| -> anyhow::Result<Option<Encoded>> {
        Ok(d.as_ref().map(|d| d.encode(&arities)).transpose()?)
    };
    let (source, target) = (encode(&source)?, encode(&target)?);
    let input: usize = arities.iter().sum();
    let classifier = NetworkSpec::classifier_preset(&cfg.network, input, classes, cfg.label_relu)?;
    let need = |d: &Option<Encoded>, what: &str| -> anyhow::Result<Encoded> {
        d.clone().ok_or_else(|| anyhow!("missing {what} dataset"))
    };
    let mut tc = cfg.train.clone();
    let name = cfg.algorithm.name().to_string();
    let model = match cfg.algorithm {
        Algorithm::Source => TrainedModel::Classifier {
            algorithm: name,
            network: train_baseline(&need(&source, "source")?, &classifier, &tc)?,
        },
        Algorithm::Target => TrainedModel::Classifier {
            algorithm: name,
            network: train_baseline(&need(&target, "target")?, &classifier, &tc)?,
        },
        Algorithm::Dann | Algorithm::DannTarget => {
            let labeled = cfg.algorithm == Algorithm::DannTarget;
            let t = need(&target, "target")?;
            let t = if labeled { t } else { t.without_labels() };
            let specs = DannSpecs::standard(input, classes, cfg.label_relu)
                .with_domain_width(cfg.domain_width);
            TrainedModel::Dann {
                algorithm: name,
                model: train_dann(&need(&source, "source")?, &t, &specs, &tc, cfg.kl, labeled)?,
            }
        }
        Algorithm::Mcd => {
            let lambda = tc.lambda.resolve(cfg.kl);
            TrainedModel::Mcd(train_mcd(
                &need(&source, "source")?,
                &need(&target, "target")?.without_labels(),
                &McdSpecs::standard(input, classes),
                &tc,
                lambda,
                cfg.mcd,
            )?)
        }
        a => {
            let strategy = a.freeze_strategy().expect("fine-tuning algorithm");
            let warm = train_baseline(&need(&source, "source")?, &classifier, &tc)?;
            tc.seed = dtl_core::seed::mix(&[tc.seed, 1]);
            TrainedModel::Classifier {
                algorithm: name,
                network: fine_tune(&warm, &need(&target, "target")?, strategy, &tc)?,
            }
        }
    };
    create_dir(&args.out)?;
    let file = model
        .to_parameter_file()
        .with_meta("arities", join(&arities))
        .with_meta("classes", classes);
    let path = args.out.join("model.json");
    file.save(&path)?;
    config::write_snapshot(&cfg, &args.out.join("resolved_config.json"))?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(model: &Path, data: &Path) -> anyhow::Result<ExitCode> {
    let file =
        ParameterFile::load(model).with_context(|| format!("loading {}", model.display()))?;
    let trained = TrainedModel::from_parameter_file(&file)?;
    let arities: Vec<usize> = file
        .metadata
        .get("arities")
        .ok_or_else(|| anyhow!("model file lacks feature arities"))?
        .split(',')
        .map(|a| a.parse().context("bad arity in model file"))
        .collect::<anyhow::Result<_>>()?;
    let ds = read_dataset(data)?;
    let encoded = ds.encode(&arities)?;
    if encoded.inputs.cols() != trained.input_width() {
        bail!(
            "data encodes to width {} but the model expects {}",
            encoded.inputs.cols(),
            trained.input_width()
        );
    }
    println!("{}", trained.evaluate(&encoded)?);
    Ok(ExitCode::SUCCESS)
}

pub struct SweepArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub workers: usize,
    pub dry_run: bool,
    pub replicates: Option<usize>,
    pub base_seed: Option<u64>,
    pub epochs: Option<usize>,
    pub algorithms: Vec<Algorithm>,
    pub sigmas: Vec<f64>,
    pub target_sizes: Vec<usize>,
}

pub fn sweep(args: SweepArgs) -> anyhow::Result<ExitCode> {
    let mut cfg: SweepConfig = config::load(args.config.as_deref())?;
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(s) = args.base_seed {
        cfg.base_seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if !args.algorithms.is_empty() {
        cfg.algorithms = args.algorithms;
    }
    if !args.sigmas.is_empty() {
        cfg.sigmas = args.sigmas;
    }
    if !args.target_sizes.is_empty() {
        cfg.target_sizes = args.target_sizes;
    }
    cfg.validate()?;
    if args.dry_run {
        println!("{}", cfg.cell_count());
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!(
        "sweep {}: {} result rows, {} workers",
        run_dir_name(&cfg)?,
        cfg.cell_count(),
        if args.workers == 0 {
            "auto".to_string()
        } else {
            args.workers.to_string()
        }
    );
    let last = std::sync::atomic::AtomicUsize::new(usize::MAX);
    let progress = |done: usize, total: usize| {
        let pct = done * 100 / total.max(1);
        if last.swap(pct, std::sync::atomic::Ordering::SeqCst) != pct {
            eprintln!("[{done}/{total}] training jobs finished");
        }
    };
    let result = run_sweep_with(
        &cfg,
        &RunOptions {
            workers: args.workers,
            progress: Some(&progress),
        },
    )?;
    create_dir(&args.out)?;
    let dir = persist_run(&cfg, &result, &args.out)?;
    let axes = [
        Axis::Sigma,
        Axis::TargetSize,
        Axis::Algorithm,
        Axis::LambdaSchedule,
    ];
    if let Ok(summary) = summarize(&result.rows, &axes) {
        std::fs::write(dir.join("summary.csv"), summary_to_csv(&summary))?;
    }
    println!("{}", dir.display());
    let failed = result.rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        eprintln!("{failed} cells failed; see the status column of results.csv");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize)]
struct PlotSnapshot<'a> {
    version: u32,
    results: &'a Path,
    figure: &'a str,
    algorithms: &'a [String],
    target_sizes: &'a [usize],
    lambda_schedules: &'a [String],
}

pub struct PlotArgs {
    pub results: PathBuf,
    pub figure: String,
    pub out: PathBuf,
    pub filter: PlotFilter,
}

pub fn plot(args: PlotArgs) -> anyhow::Result<ExitCode> {
    let figure: Figure = args.figure.parse().map_err(input_error)?;
    let rows = read_rows(&args.results).map_err(|e| match e {
        dtl_core::Error::Data(m) => input_error(m),
        e => anyhow!(e).context(format!("reading {}", args.results.display())),
    })?;
    let svg = plot::render(&rows, figure, &args.filter).map_err(input_error)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(&args.out, svg).with_context(|| format!("writing {}", args.out.display()))?;
    let snapshot = PlotSnapshot {
        version: config::CONFIG_VERSION,
        results: &args.results,
        figure: &args.figure,
        algorithms: &args.filter.algorithms,
        target_sizes: &args.filter.target_sizes,
        lambda_schedules: &args.filter.lambda_schedules,
    };
    config::write_snapshot(&snapshot, &args.out.with_extension("config.json"))?;
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::format_sig12;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(format_sig12(0.0), "0");
        assert_eq!(format_sig12(1.0), "1");
        assert_eq!(format_sig12(0.192740000000001), "0.19274");
        assert_eq!(format_sig12(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_sig12(123456.7890123456), "123456.789012");
        assert_eq!(format_sig12(1.5e-7), "1.5e-07");
        assert_eq!(format_sig12(2.0e15), "2e+15");
    }
}
