//! Command-line front end for emulator validation: run local, global, and
//! feature-space tests on user data or built-in synthetic settings, fit
//! approximate-likelihood models from ensembles, and reproduce the bundled
//! experiments. JSON results go to stdout, diagnostics to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use emuval_core::data::{pool_and_label, Sample};
use emuval_core::diagnose::{feature_space_test, split_train_test, write_diagnoses_csv};
use emuval_core::error::Error;
use emuval_core::globaltest::{global_test, GlobalTestConfig, ThetaReference, UniformityStat};
use emuval_core::harness::{
    estimate_power, run_experiment, ExperimentConfig, ExperimentName, ExperimentOverrides,
};
use emuval_core::localtest::{
    local_test, mc_gof_test, permutation_test, LocalTestConfig, Sampler,
};
use emuval_core::models::{
    fit_model, kl_estimate, load_ensembles, ApproxLikelihood, ApproxModel, EnsembleTestSampler,
    ModelKind, Prior, SyntheticSetting, TrueModel,
};
use emuval_core::regress::{ForestParams, MethodSpec};
use emuval_core::rng::RngStream;
use emuval_core::stats::{RegressionMode, StatisticSpec};

#[derive(Parser)]
#[command(
    name = "emuval",
    version,
    about = "Statistical validation of emulator models against stochastic simulators"
)]
struct Cli {
    /// RNG seed; drawn from OS entropy (and printed to stderr) when omitted
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores); results are identical for any value
    #[arg(long, global = true, env = "EMUVAL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-sample test at a fixed parameter value
    Local(LocalArgs),
    /// Goodness-of-fit across parameter space via pooled local p-values
    Global(GlobalArgs),
    /// Goodness-of-fit via repeated Monte Carlo samples from the emulator
    McGof(McGofArgs),
    /// Pointwise feature-space diagnostics with FDR control
    Diagnose(DiagnoseArgs),
    /// Fit an approximate-likelihood model from a training ensemble
    Fit(FitArgs),
    /// Model-comparison score on held-out test splits
    Kl(KlArgs),
    /// Rejection power of a local test over repeated trials
    Power(PowerArgs),
    /// Run a bundled experiment and write its report directory
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StatChoice {
    Regression,
    Mmd,
    Energy,
    C2st,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegressorChoice {
    Rf,
    Knn,
    Constant,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeChoice {
    Full,
    Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum UniformityChoice {
    Ks,
    Cvm,
}

#[derive(Args)]
struct StatArgs {
    /// Test statistic
    #[arg(long, value_enum, default_value_t = StatChoice::Regression)]
    stat: StatChoice,

    /// Regression engine for regression/c2st statistics
    #[arg(long, value_enum, default_value_t = RegressorChoice::Rf)]
    regressor: RegressorChoice,

    /// Neighbors for the knn regressor
    #[arg(long, default_value_t = 10)]
    k: usize,

    /// Trees in the random forest
    #[arg(long, default_value_t = 100)]
    trees: usize,

    /// Features scanned per split (default: ceil(sqrt(D)))
    #[arg(long)]
    mtry: Option<usize>,

    /// Minimum leaf size
    #[arg(long, default_value_t = 5)]
    min_leaf: usize,

    /// Fit on all points (full) or on a held-out half (split)
    #[arg(long, value_enum, default_value_t = ModeChoice::Full)]
    mode: ModeChoice,
}

impl StatArgs {
    fn method(&self) -> MethodSpec {
        match self.regressor {
            RegressorChoice::Rf => MethodSpec::RandomForest(ForestParams {
                n_trees: self.trees,
                mtry: self.mtry,
                min_leaf: self.min_leaf,
                bootstrap: true,
            }),
            RegressorChoice::Knn => MethodSpec::Knn { k: self.k },
            RegressorChoice::Constant => MethodSpec::Constant,
        }
    }

    fn statistic(&self) -> StatisticSpec {
        match self.stat {
            StatChoice::Regression => StatisticSpec::Regression {
                method: self.method(),
            },
            StatChoice::Mmd => StatisticSpec::Mmd,
            StatChoice::Energy => StatisticSpec::Energy,
            StatChoice::C2st => StatisticSpec::C2st {
                method: self.method(),
            },
        }
    }

    fn mode(&self) -> RegressionMode {
        match self.mode {
            ModeChoice::Full => RegressionMode::Full,
            ModeChoice::Split => RegressionMode::Split,
        }
    }
}

#[derive(Args)]
struct LocalArgs {
    /// Simulator sample CSV (with --s1)
    #[arg(long, requires = "s1", conflicts_with = "setting")]
    s0: Option<PathBuf>,

    /// Emulator sample CSV (with --s0)
    #[arg(long)]
    s1: Option<PathBuf>,

    /// Built-in setting: example1 | bernoulli | scaling | mog
    #[arg(long, conflicts_with = "s1")]
    setting: Option<String>,

    /// Parameter value (comma-separated coordinates)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Vec<f64>,

    /// Feature dimension of the built-in setting
    #[arg(long, default_value_t = 1)]
    dim: usize,

    /// Draws per sample for built-in settings
    #[arg(long, default_value_t = 100)]
    n: usize,

    /// Emulator draw count when it differs from --n
    #[arg(long)]
    n1: Option<usize>,

    /// Number of label permutations
    #[arg(long, default_value_t = 99)]
    perms: usize,

    #[command(flatten)]
    stat: StatArgs,
}

#[derive(Args)]
struct GlobalArgs {
    /// Built-in setting: example1 | bernoulli | scaling | mog
    #[arg(long, conflicts_with = "manifest")]
    setting: Option<String>,

    /// Ensemble manifest JSON (batch setting, with --model)
    #[arg(long, requires = "model")]
    manifest: Option<PathBuf>,

    /// Model to fit from the manifest: gaussian | poisson | kde
    #[arg(long)]
    model: Option<String>,

    /// Feature dimension of the built-in setting
    #[arg(long, default_value_t = 1)]
    dim: usize,

    /// Number of theta draws from the reference distribution
    #[arg(long, default_value_t = 100)]
    b: usize,

    /// Draws per sample in each local test
    #[arg(long, default_value_t = 100)]
    n_sim: usize,

    /// Number of label permutations per local test
    #[arg(long, default_value_t = 99)]
    perms: usize,

    /// Uniformity statistic for the pooled p-values
    #[arg(long, value_enum, default_value_t = UniformityChoice::Ks)]
    uniformity: UniformityChoice,

    /// Monte Carlo replicates for the uniformity null
    #[arg(long, default_value_t = 999)]
    n_null: usize,

    /// Directory for global.json and local_pvalues.csv
    #[arg(long)]
    out: Option<PathBuf>,

    #[command(flatten)]
    stat: StatArgs,
}

#[derive(Args)]
struct McGofArgs {
    /// Observed sample CSV
    #[arg(long, conflicts_with = "setting")]
    s: Option<PathBuf>,

    /// Built-in setting providing both the observed draws and the emulator
    #[arg(long)]
    setting: Option<String>,

    /// Parameter value
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Vec<f64>,

    /// Feature dimension of the built-in setting
    #[arg(long, default_value_t = 1)]
    dim: usize,

    /// Observed draws when --setting generates them
    #[arg(long, default_value_t = 20)]
    n: usize,

    /// Ensemble manifest (emulator fitted from it, with --model)
    #[arg(long, requires = "model")]
    manifest: Option<PathBuf>,

    /// Model to fit from the manifest: gaussian | poisson | kde
    #[arg(long)]
    model: Option<String>,

    /// Monte Carlo reference sample size
    #[arg(long, default_value_t = 500)]
    ne: usize,

    /// Number of Monte Carlo replicates
    #[arg(long, default_value_t = 99)]
    perms: usize,

    #[command(flatten)]
    stat: StatArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Simulator sample CSV
    #[arg(long)]
    s0: PathBuf,

    /// Emulator sample CSV
    #[arg(long)]
    s1: PathBuf,

    /// Held-out fraction of the pooled sample used as test points
    #[arg(long, default_value_t = 0.35)]
    test_frac: f64,

    /// Explicit test points CSV instead of the held-out split
    #[arg(long)]
    test_points: Option<PathBuf>,

    /// Number of label permutations
    #[arg(long, default_value_t = 99)]
    perms: usize,

    /// FDR level for the Benjamini-Hochberg correction
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Output CSV of per-point diagnoses
    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    stat: StatArgs,
}

#[derive(Args)]
struct FitArgs {
    /// Ensemble manifest JSON
    #[arg(long)]
    manifest: PathBuf,

    /// Model family: gaussian | poisson | kde
    #[arg(long)]
    model: String,

    /// Output path for the fitted model JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KlArgs {
    /// Fitted model JSON from `emuval fit`
    #[arg(long)]
    model_file: PathBuf,

    /// Ensemble manifest with the held-out test splits
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct PowerArgs {
    /// Built-in setting: example1 | bernoulli | scaling | mog
    #[arg(long)]
    setting: String,

    /// Parameter value
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Vec<f64>,

    /// Feature dimension of the built-in setting
    #[arg(long, default_value_t = 1)]
    dim: usize,

    /// Draws per sample in each local test
    #[arg(long, default_value_t = 100)]
    n: usize,

    /// Number of label permutations
    #[arg(long, default_value_t = 99)]
    perms: usize,

    /// Repeated trials
    #[arg(long, default_value_t = 100)]
    trials: usize,

    /// Rejection level
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Estimate the null rejection rate (truth vs truth) instead of power
    #[arg(long)]
    null: bool,

    #[command(flatten)]
    stat: StatArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment: example1 | example2 | poisson_synth
    #[arg(long)]
    name: String,

    /// Report directory
    #[arg(long)]
    out: PathBuf,

    /// TOML file overriding the desk-scale defaults
    #[arg(long)]
    config: Option<PathBuf>,

    /// Paper-scale settings instead of desk-scale defaults
    #[arg(long)]
    full: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
        {
            eprintln!("error: could not configure the thread pool");
            return ExitCode::from(1);
        }
    }
    let seed = match cli.seed {
        Some(s) => s,
        None => {
            let mut bytes = [0u8; 8];
            if getrandom::fill(&mut bytes).is_err() {
                eprintln!("error: no OS entropy source for --seed");
                return ExitCode::from(1);
            }
            let s = u64::from_le_bytes(bytes);
            eprintln!("seed: {s}");
            s
        }
    };
    let rng = RngStream::new(seed, 0);

    match run(cli.command, rng) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_setting(name: &str, dim: usize, theta: &[f64]) -> Result<SyntheticSetting, Error> {
    let setting = SyntheticSetting::from_name(name, dim)?;
    if theta.len() != setting.theta_dim() {
        return Err(Error::InvalidParameter(format!(
            "setting {name} needs a {}-dimensional theta, got {}",
            setting.theta_dim(),
            theta.len()
        )));
    }
    if !setting.contains(theta) {
        return Err(Error::ThetaOutOfDomain {
            setting: name.into(),
            theta: theta.to_vec(),
        });
    }
    Ok(setting)
}

fn run(command: Command, rng: RngStream) -> Result<(), Error> {
    match command {
        Command::Local(args) => cmd_local(args, rng),
        Command::Global(args) => cmd_global(args, rng),
        Command::McGof(args) => cmd_mc_gof(args, rng),
        Command::Diagnose(args) => cmd_diagnose(args, rng),
        Command::Fit(args) => cmd_fit(args),
        Command::Kl(args) => cmd_kl(args),
        Command::Power(args) => cmd_power(args, rng),
        Command::Experiment(args) => cmd_experiment(args, rng),
    }
}

fn cmd_local(args: LocalArgs, rng: RngStream) -> Result<(), Error> {
    let mut cfg = LocalTestConfig::new(args.stat.statistic(), args.perms, args.n, args.n1.unwrap_or(args.n));
    cfg.mode = args.stat.mode();
    let result = match (&args.s0, &args.s1, &args.setting) {
        (Some(p0), Some(p1), None) => {
            let s0 = Sample::read_csv(p0)?;
            let s1 = Sample::read_csv(p1)?;
            cfg.n_sim0 = s0.len();
            cfg.n_sim1 = s1.len();
            permutation_test(&s0, &s1, &cfg, rng)?
        }
        (None, None, Some(name)) => {
            let setting = parse_setting(name, args.dim, &args.theta)?;
            local_test(
                &args.theta,
                &TrueModel(setting),
                &ApproxModel(setting),
                &cfg,
                rng,
            )?
        }
        _ => {
            return Err(Error::InvalidParameter(
                "provide either --s0 and --s1, or --setting with --theta".into(),
            ))
        }
    };
    print_json(&result)
}

fn cmd_global(args: GlobalArgs, rng: RngStream) -> Result<(), Error> {
    let uniformity = match args.uniformity {
        UniformityChoice::Ks => UniformityStat::Ks,
        UniformityChoice::Cvm => UniformityStat::Cvm,
    };
    let mut local = LocalTestConfig::new(args.stat.statistic(), args.perms, args.n_sim, args.n_sim);
    local.mode = args.stat.mode();

    let (reference, simulator, emulator): (
        ThetaReference,
        Box<dyn Sampler>,
        Box<dyn Sampler>,
    ) = match (&args.setting, &args.manifest) {
        (Some(name), None) => {
            let setting = SyntheticSetting::from_name(name, args.dim)?;
            let reference = match setting {
                SyntheticSetting::Example1 => {
                    // theta reference is the unit-scale gamma prior
                    let prior = Prior::Gamma { shape: 1.0, rate: 1.0 };
                    let mut prng = rng.derive_substream(u64::MAX).rng();
                    let thetas: Vec<Vec<f64>> =
                        (0..args.b).map(|_| vec![prior.sample(&mut prng)]).collect();
                    ThetaReference::Weighted {
                        weights: vec![1.0; thetas.len()],
                        thetas,
                    }
                }
                SyntheticSetting::Bernoulli { .. } | SyntheticSetting::Scaling { .. } => {
                    ThetaReference::Box { lo: vec![0.001], hi: vec![0.999] }
                }
                SyntheticSetting::MixtureOfGaussians { .. } => {
                    ThetaReference::Box { lo: vec![-5.0], hi: vec![5.0] }
                }
                SyntheticSetting::PoissonSynth => {
                    return Err(Error::InvalidParameter(
                        "poisson_synth has no closed-form emulator; use --manifest with --model"
                            .into(),
                    ))
                }
            };
            (
                reference,
                Box::new(TrueModel(setting)) as Box<dyn Sampler>,
                Box::new(ApproxModel(setting)) as Box<dyn Sampler>,
            )
        }
        (None, Some(path)) => {
            let ensembles = load_ensembles(path)?;
            let kind = ModelKind::from_name(args.model.as_deref().unwrap_or_default())?;
            let model = fit_model(kind, &ensembles)?;
            let grid: Vec<Vec<f64>> = ensembles.iter().map(|e| e.theta.clone()).collect();
            (
                ThetaReference::Grid(grid),
                Box::new(EnsembleTestSampler(ensembles)) as Box<dyn Sampler>,
                Box::new(model) as Box<dyn Sampler>,
            )
        }
        _ => {
            return Err(Error::InvalidParameter(
                "provide either --setting or --manifest with --model".into(),
            ))
        }
    };

    let cfg = GlobalTestConfig {
        reference,
        b_draws: args.b,
        local,
        uniformity,
        n_null: args.n_null,
    };
    let result = global_test(&cfg, simulator.as_ref(), emulator.as_ref(), rng)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("global.json"), result.to_json())?;
        result.write_local_pvalues_csv(&dir.join("local_pvalues.csv"))?;
    }
    print_json(&result)
}

fn cmd_mc_gof(args: McGofArgs, rng: RngStream) -> Result<(), Error> {
    let method = args.stat.method();
    let emulator: Box<dyn Sampler> = match (&args.manifest, &args.setting) {
        (Some(path), _) => {
            let ensembles = load_ensembles(path)?;
            let kind = ModelKind::from_name(args.model.as_deref().unwrap_or_default())?;
            Box::new(fit_model(kind, &ensembles)?)
        }
        (None, Some(name)) => {
            let setting = parse_setting(name, args.dim, &args.theta)?;
            Box::new(ApproxModel(setting))
        }
        (None, None) => {
            return Err(Error::InvalidParameter(
                "provide an emulator via --setting or --manifest with --model".into(),
            ))
        }
    };
    let s = match (&args.s, &args.setting) {
        (Some(path), _) => Sample::read_csv(path)?,
        (None, Some(name)) => {
            let setting = parse_setting(name, args.dim, &args.theta)?;
            setting.simulate(&args.theta, args.n, rng.derive_substream(u64::MAX))?
        }
        (None, None) => {
            return Err(Error::InvalidParameter(
                "provide the observed sample via --s or draw it with --setting".into(),
            ))
        }
    };
    let result = mc_gof_test(
        &s,
        emulator.as_ref(),
        &args.theta,
        args.ne,
        args.perms,
        &method,
        args.stat.mode(),
        rng,
    )?;
    print_json(&result)
}

#[derive(Serialize)]
struct DiagnoseSummary {
    n_points: usize,
    n_flagged: usize,
    alpha: f64,
    seed: RngStream,
    out: String,
}

fn cmd_diagnose(args: DiagnoseArgs, rng: RngStream) -> Result<(), Error> {
    let s0 = Sample::read_csv(&args.s0)?;
    let s1 = Sample::read_csv(&args.s1)?;
    let pooled = pool_and_label(&s0, &s1)?;
    let (train, test_points) = match &args.test_points {
        Some(path) => (pooled, Sample::read_csv(path)?),
        None => split_train_test(&pooled, args.test_frac, rng.derive_substream(0))?,
    };
    let diagnoses = feature_space_test(
        &train,
        &test_points,
        &args.stat.method(),
        args.perms,
        args.alpha,
        rng.derive_substream(1),
    )?;
    write_diagnoses_csv(&args.out, &diagnoses)?;
    print_json(&DiagnoseSummary {
        n_points: diagnoses.len(),
        n_flagged: diagnoses.iter().filter(|d| d.flagged).count(),
        alpha: args.alpha,
        seed: rng,
        out: args.out.display().to_string(),
    })
}

#[derive(Serialize)]
struct FitSummary {
    model: ModelKind,
    dim: usize,
    n_thetas: usize,
    out: String,
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    let ensembles = load_ensembles(&args.manifest)?;
    let kind = ModelKind::from_name(&args.model)?;
    let model = fit_model(kind, &ensembles)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&model)?)?;
    print_json(&FitSummary {
        model: kind,
        dim: model.dim(),
        n_thetas: model.thetas().len(),
        out: args.out.display().to_string(),
    })
}

fn cmd_kl(args: KlArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.model_file)?;
    let model: ApproxLikelihood = serde_json::from_str(&text)?;
    let ensembles = load_ensembles(&args.manifest)?;
    let estimate = kl_estimate(&model, &ensembles)?;
    print_json(&estimate)
}

fn cmd_power(args: PowerArgs, rng: RngStream) -> Result<(), Error> {
    let setting = parse_setting(&args.setting, args.dim, &args.theta)?;
    let mut cfg = LocalTestConfig::new(args.stat.statistic(), args.perms, args.n, args.n);
    cfg.mode = args.stat.mode();
    let truth = TrueModel(setting);
    let row = if args.null {
        estimate_power(
            setting.name(),
            &truth,
            &truth,
            &args.theta,
            setting.dim(),
            &cfg,
            args.trials,
            args.alpha,
            rng,
        )?
    } else {
        estimate_power(
            setting.name(),
            &truth,
            &ApproxModel(setting),
            &args.theta,
            setting.dim(),
            &cfg,
            args.trials,
            args.alpha,
            rng,
        )?
    };
    print_json(&row)
}

fn cmd_experiment(args: ExperimentArgs, rng: RngStream) -> Result<(), Error> {
    let name = ExperimentName::from_name(&args.name)?;
    let base = if args.full {
        ExperimentConfig::full_scale(name)
    } else {
        ExperimentConfig::default_for(name)
    };
    let cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let overrides: ExperimentOverrides = toml::from_str(&text).map_err(|e| {
                Error::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    message: e.to_string(),
                }
            })?;
            overrides.apply(base)
        }
        None => base,
    };
    run_experiment(name, &cfg, &args.out, rng)?;
    eprintln!("report written to {}", args.out.display());
    print_json(&serde_json::json!({
        "experiment": name.name(),
        "out": args.out.display().to_string(),
        "seed": rng,
    }))
}
