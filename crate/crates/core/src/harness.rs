//! Power estimation over repeated trials and end-to-end experiment runs
//! emitting machine-readable tables.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::globaltest::{global_test, GlobalTestConfig, ThetaReference, UniformityStat};
use crate::localtest::{local_test, LocalTestConfig, Sampler};
use crate::models::{
    beta_product_suff_stat, fit_model, grid_posterior, ApproxModel, Ensemble, ModelKind,
    PosteriorGrid, Prior, SyntheticSetting, TrueModel,
};
use crate::regress::{ForestParams, MethodSpec};
use crate::rng::RngStream;
use crate::stats::{mmd_statistic, StatisticSpec};

/// One power-estimate record.
#[derive(Debug, Clone, Serialize)]
pub struct PowerRow {
    pub setting: String,
    pub statistic: String,
    pub theta: Vec<f64>,
    pub d: usize,
    pub n: usize,
    pub trials: usize,
    pub rejections: usize,
    pub power: f64,
    pub std_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Estimate rejection power of the configured local test: fresh draws per
/// trial on independent substreams, power = fraction of p <= alpha.
#[allow(clippy::too_many_arguments)]
pub fn estimate_power(
    setting: &str,
    truth: &dyn Sampler,
    alt: &dyn Sampler,
    theta: &[f64],
    dim: usize,
    cfg: &LocalTestConfig,
    trials: usize,
    alpha: f64,
    rng: RngStream,
) -> Result<PowerRow> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter("alpha must be in (0,1)".into()));
    }
    let warning = if (cfg.m_permutations + 1) as f64 * alpha < 1.0 {
        let w = format!(
            "alpha {alpha} is below the smallest attainable p-value 1/{}; rejection is impossible",
            cfg.m_permutations + 1
        );
        eprintln!("warning: {w}");
        Some(w)
    } else {
        None
    };
    let outcomes: Vec<bool> = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<bool> {
            let r = local_test(theta, truth, alt, cfg, rng.derive_substream(t))
                .map_err(|e| match e {
                    Error::LocalTestFailed { .. } => e,
                    other => Error::LocalTestFailed {
                        theta: theta.to_vec(),
                        index: t as usize,
                        completed: 0,
                        source: Box::new(other),
                    },
                })?;
            Ok(r.p_value <= alpha)
        })
        .collect::<Result<_>>()?;
    let rejections = outcomes.iter().filter(|&&r| r).count();
    let power = rejections as f64 / trials as f64;
    Ok(PowerRow {
        setting: setting.to_string(),
        statistic: cfg.statistic.tag(),
        theta: theta.to_vec(),
        d: dim,
        n: cfg.n_sim0,
        trials,
        rejections,
        power,
        std_error: (power * (1.0 - power) / trials as f64).sqrt(),
        warning,
    })
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    Example1,
    Example2,
    PoissonSynth,
}

impl ExperimentName {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "example1" => ExperimentName::Example1,
            "example2" => ExperimentName::Example2,
            "poisson_synth" => ExperimentName::PoissonSynth,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown experiment '{other}' (expected example1, example2, poisson_synth)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ExperimentName::Example1 => "example1",
            ExperimentName::Example2 => "example2",
            ExperimentName::PoissonSynth => "poisson_synth",
        }
    }
}

/// Fully resolved experiment configuration; the manifest echoes it verbatim.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub trials: usize,
    pub m_permutations: usize,
    pub n_sim: usize,
    pub n_null: usize,
    pub b_draws: usize,
    pub alpha: f64,
    pub forest_trees: usize,
    // example1
    pub replicates: usize,
    pub sbc_draws: usize,
    pub knn_k: usize,
    // example2
    pub dims: Vec<usize>,
    pub theta_points: usize,
    pub statistics: Vec<String>,
    // poisson_synth
    pub grid_side: usize,
    pub n_train: Vec<usize>,
    pub local_map_models: Vec<String>,
    pub local_map_n_train: usize,
    pub local_map_reps: usize,
    pub global_models: Vec<String>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: minutes-scale runs with the qualitative
    /// conclusions preserved. `--full` in the CLI restores the heavy
    /// settings (10^4-draw training ensembles, 20-point theta grids, all
    /// five dimensions, 100 trials, classifier baselines).
    pub fn default_for(name: ExperimentName) -> Self {
        let mut cfg = ExperimentConfig {
            trials: 100,
            m_permutations: 99,
            n_sim: 100,
            n_null: 999,
            b_draws: 100,
            alpha: 0.05,
            forest_trees: 100,
            replicates: 500,
            sbc_draws: 99,
            knn_k: 10,
            dims: vec![1, 10, 100],
            theta_points: 4,
            statistics: vec![
                "regression_rf".into(),
                "regression_nn".into(),
                "mmd".into(),
                "energy".into(),
            ],
            grid_side: 10,
            n_train: vec![50, 100, 2000],
            local_map_models: vec!["gaussian".into(), "poisson".into(), "kde".into()],
            local_map_n_train: 100,
            local_map_reps: 1,
            global_models: vec!["gaussian".into(), "poisson".into(), "kde".into()],
        };
        match name {
            ExperimentName::Example2 => {
                cfg.trials = 50;
                cfg.forest_trees = 50;
            }
            ExperimentName::PoissonSynth => {
                cfg.n_sim = 200;
                cfg.trials = 10;
                cfg.b_draws = 30;
                cfg.forest_trees = 50;
            }
            ExperimentName::Example1 => {}
        }
        cfg
    }

    pub fn full_scale(name: ExperimentName) -> Self {
        let mut cfg = Self::default_for(name);
        cfg.trials = 100;
        cfg.forest_trees = 100;
        match name {
            ExperimentName::Example2 => {
                cfg.dims = vec![1, 5, 10, 50, 100];
                cfg.theta_points = 20;
                cfg.statistics.push("c2st_rf".into());
                cfg.statistics.push("c2st_nn".into());
            }
            ExperimentName::PoissonSynth => {
                cfg.n_train = vec![50, 100, 10_000];
                cfg.b_draws = 100;
            }
            ExperimentName::Example1 => {}
        }
        cfg
    }

    pub fn statistic_from_tag(&self, tag: &str) -> Result<StatisticSpec> {
        let forest = MethodSpec::RandomForest(ForestParams {
            n_trees: self.forest_trees,
            ..Default::default()
        });
        // in-sample 1-NN predicts its own label, which makes the statistic
        // permutation-invariant; k = 3 is the smallest odd non-degenerate
        // neighborhood for the in-sample convention
        Ok(match tag {
            "regression_rf" | "rf" => StatisticSpec::Regression { method: forest },
            "regression_nn" | "nn" => StatisticSpec::Regression {
                method: MethodSpec::Knn { k: 3 },
            },
            "regression_knn" => StatisticSpec::Regression {
                method: MethodSpec::Knn { k: self.knn_k },
            },
            "mmd" => StatisticSpec::Mmd,
            "energy" => StatisticSpec::Energy,
            "c2st_rf" => StatisticSpec::C2st { method: forest },
            "c2st_nn" => StatisticSpec::C2st {
                method: MethodSpec::Knn { k: 1 },
            },
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown statistic tag '{other}'"
                )))
            }
        })
    }
}

/// Optional config-file overrides; unset fields keep the experiment default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentOverrides {
    pub trials: Option<usize>,
    pub m_permutations: Option<usize>,
    pub n_sim: Option<usize>,
    pub n_null: Option<usize>,
    pub b_draws: Option<usize>,
    pub alpha: Option<f64>,
    pub forest_trees: Option<usize>,
    pub replicates: Option<usize>,
    pub sbc_draws: Option<usize>,
    pub knn_k: Option<usize>,
    pub dims: Option<Vec<usize>>,
    pub theta_points: Option<usize>,
    pub statistics: Option<Vec<String>>,
    pub grid_side: Option<usize>,
    pub n_train: Option<Vec<usize>>,
    pub local_map_models: Option<Vec<String>>,
    pub local_map_n_train: Option<usize>,
    pub local_map_reps: Option<usize>,
    pub global_models: Option<Vec<String>>,
}

impl ExperimentOverrides {
    pub fn apply(self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            trials,
            m_permutations,
            n_sim,
            n_null,
            b_draws,
            alpha,
            forest_trees,
            replicates,
            sbc_draws,
            knn_k,
            dims,
            theta_points,
            statistics,
            grid_side,
            n_train,
            local_map_models,
            local_map_n_train,
            local_map_reps,
            global_models
        );
        cfg
    }
}

// ---------------------------------------------------------------------------
// Experiment outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LocalPRow {
    pub model: String,
    pub n_train: usize,
    pub rep: usize,
    pub theta: Vec<f64>,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistRow {
    pub diagnostic: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalRow {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    pub trial: usize,
    pub statistic: f64,
    pub global_p: f64,
}

#[derive(Debug, Default)]
pub struct ExperimentSummary {
    pub power: Vec<PowerRow>,
    pub locals: Vec<LocalPRow>,
    pub hist: Vec<HistRow>,
    pub globals: Vec<GlobalRow>,
}

impl ExperimentSummary {
    /// Median local p-value over rows selected by a predicate.
    pub fn median_local_p<F: Fn(&LocalPRow) -> bool>(&self, pred: F) -> Option<f64> {
        let mut vals: Vec<f64> = self
            .locals
            .iter()
            .filter(|r| pred(r))
            .map(|r| r.p_value)
            .collect();
        median(&mut vals)
    }

    pub fn global_power(&self, model: &str, n_train: usize, alpha: f64) -> Option<f64> {
        let rows: Vec<&GlobalRow> = self
            .globals
            .iter()
            .filter(|g| g.model == model && g.n_train == Some(n_train))
            .collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().filter(|g| g.global_p <= alpha).count() as f64 / rows.len() as f64)
    }

    pub fn median_raw_mmd(&self, model: &str, n_train: usize) -> Option<f64> {
        let mut vals: Vec<f64> = self
            .hist
            .iter()
            .filter(|h| h.diagnostic == "raw_mmd" && h.model == model && h.n_train == Some(n_train))
            .map(|h| h.value)
            .collect();
        median(&mut vals)
    }
}

pub fn median(vals: &mut [f64]) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = vals.len() / 2;
    Some(if vals.len() % 2 == 1 {
        vals[mid]
    } else {
        0.5 * (vals[mid - 1] + vals[mid])
    })
}

// ---------------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------------

/// Run a named experiment, write its report directory, and return the
/// in-memory summary. Outputs are fully determined by `(cfg, rng)`.
pub fn run_experiment(
    name: ExperimentName,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    rng: RngStream,
) -> Result<ExperimentSummary> {
    std::fs::create_dir_all(out_dir)?;
    let summary = match name {
        ExperimentName::Example1 => example1(cfg, rng)?,
        ExperimentName::Example2 => example2(cfg, rng)?,
        ExperimentName::PoissonSynth => poisson_synth(cfg, rng)?,
    };
    write_summary(name, cfg, &summary, out_dir, rng)?;
    Ok(summary)
}

/// Beta-coordinate model: posterior quantiles and ranks for the true and
/// flat likelihoods, plus global regression tests for both.
fn example1(cfg: &ExperimentConfig, rng: RngStream) -> Result<ExperimentSummary> {
    let mut summary = ExperimentSummary::default();
    let prior = Prior::Gamma {
        shape: 1.0,
        rate: 1.0,
    };
    let grid = PosteriorGrid::default_unit_scale();
    // grid-dependent constants shared by every replicate
    let ln_beta: Vec<f64> = grid
        .nodes
        .iter()
        .map(|&t| 2.0 * libm::lgamma(t) - libm::lgamma(2.0 * t))
        .collect();
    let log_prior: Vec<f64> = grid.nodes.iter().map(|&t| prior.log_pdf(t)).collect();

    let rep_rows: Vec<Vec<HistRow>> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<HistRow>> {
            let stream = rng.derive_substream(r);
            let mut prng = stream.derive_substream(0).rng();
            let theta = prior.sample(&mut prng);
            // sufficient statistic of x | theta, drawn in log space so tiny
            // thetas keep full tail information
            let s = beta_product_suff_stat(theta, 1000, stream.derive_substream(1));
            let log_weight: Vec<f64> = grid
                .nodes
                .iter()
                .zip(&ln_beta)
                .zip(&log_prior)
                .map(|((&t, &lb), &lp)| lp + (t - 1.0) * s - 1000.0 * lb)
                .collect();
            let post_true = grid_posterior(&grid, &log_weight)?;
            let post_flat = grid_posterior(&grid, &log_prior)?;

            let mut rows = Vec::with_capacity(4);
            for (model, post) in [("true", &post_true), ("flat", &post_flat)] {
                rows.push(HistRow {
                    diagnostic: "pq".into(),
                    model: model.into(),
                    n_train: None,
                    value: post.mass_below(theta),
                });
                let mut q = stream.derive_substream(2).rng();
                let rank = (0..cfg.sbc_draws)
                    .filter(|_| post.quantile(q.next_f64()) < theta)
                    .count();
                rows.push(HistRow {
                    diagnostic: "sbc".into(),
                    model: model.into(),
                    n_train: None,
                    value: rank as f64,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    summary.hist.extend(rep_rows.into_iter().flatten());

    // global regression tests: theta reference is a fresh prior sample
    let local = LocalTestConfig::new(
        cfg.statistic_from_tag("regression_knn")?,
        cfg.m_permutations,
        cfg.n_sim,
        cfg.n_sim,
    );
    let list_stream = rng.derive_substream(u64::MAX - 1);
    let thetas: Vec<Vec<f64>> = {
        let mut prng = list_stream.rng();
        (0..cfg.b_draws).map(|_| vec![prior.sample(&mut prng)]).collect()
    };
    let gcfg = GlobalTestConfig {
        reference: ThetaReference::Weighted {
            weights: vec![1.0; thetas.len()],
            thetas,
        },
        b_draws: cfg.b_draws,
        local,
        uniformity: UniformityStat::Ks,
        n_null: cfg.n_null,
    };
    let truth = TrueModel(SyntheticSetting::Example1);
    let flat = ApproxModel(SyntheticSetting::Example1);
    for (model, result) in [
        (
            "true",
            global_test(&gcfg, &truth, &truth, rng.derive_substream(u64::MAX - 2))?,
        ),
        (
            "flat",
            global_test(&gcfg, &truth, &flat, rng.derive_substream(u64::MAX - 3))?,
        ),
    ] {
        for &p in &result.local_p {
            summary.hist.push(HistRow {
                diagnostic: "local_p".into(),
                model: model.into(),
                n_train: None,
                value: p,
            });
        }
        summary.globals.push(GlobalRow {
            model: model.into(),
            n_train: None,
            trial: 0,
            statistic: result.statistic,
            global_p: result.global_p,
        });
    }
    Ok(summary)
}

/// Power of the local test by statistic, theta, and dimension for the three
/// sparse-alternative settings.
fn example2(cfg: &ExperimentConfig, rng: RngStream) -> Result<ExperimentSummary> {
    let mut summary = ExperimentSummary::default();
    let settings = ["bernoulli", "scaling", "mog"];
    let mut task = 0u64;
    for setting_name in settings {
        for &dim in &cfg.dims {
            let setting = SyntheticSetting::from_name(setting_name, dim)?;
            let truth = TrueModel(setting);
            let alt = ApproxModel(setting);
            let grid = setting.theta_grid(cfg.theta_points);
            for tag in &cfg.statistics {
                let statistic = cfg.statistic_from_tag(tag)?;
                let local = LocalTestConfig::new(
                    statistic,
                    cfg.m_permutations,
                    cfg.n_sim,
                    cfg.n_sim,
                );
                for theta in &grid {
                    let row = estimate_power(
                        setting_name,
                        &truth,
                        &alt,
                        theta,
                        dim,
                        &local,
                        cfg.trials,
                        cfg.alpha,
                        rng.derive_substream(task),
                    )?;
                    task += 1;
                    summary.power.push(row);
                }
            }
        }
    }
    Ok(summary)
}

fn draw_ensembles(
    grid: &[Vec<f64>],
    n_train: usize,
    n_test: usize,
    rng: RngStream,
) -> Result<Vec<Ensemble>> {
    grid.iter()
        .enumerate()
        .map(|(i, theta)| {
            let stream = rng.derive_substream(i as u64);
            Ok(Ensemble {
                theta: theta.clone(),
                train: SyntheticSetting::PoissonSynth.simulate(
                    theta,
                    n_train,
                    stream.derive_substream(0),
                )?,
                test: SyntheticSetting::PoissonSynth.simulate(
                    theta,
                    n_test,
                    stream.derive_substream(1),
                )?,
            })
        })
        .collect()
}

/// Count-pair experiment: local p-value maps over the theta grid, global
/// rejection power by model and training-set size, and the raw MMD medians
/// that motivate testing over raw distances.
fn poisson_synth(cfg: &ExperimentConfig, rng: RngStream) -> Result<ExperimentSummary> {
    let mut summary = ExperimentSummary::default();
    let setting = SyntheticSetting::PoissonSynth;
    let grid = setting.theta_grid(cfg.grid_side);
    let truth = TrueModel(setting);
    let rf = cfg.statistic_from_tag("regression_rf")?;
    let local = LocalTestConfig::new(rf, cfg.m_permutations, cfg.n_sim, cfg.n_sim);

    // local p-value maps at one training size
    for model_name in &cfg.local_map_models {
        let kind = ModelKind::from_name(model_name)?;
        for rep in 0..cfg.local_map_reps {
            let stream = rng
                .derive_substream(1_000_000 + rep as u64)
                .derive_substream(kind as u64);
            let ensembles = draw_ensembles(&grid, cfg.local_map_n_train, 1, stream.derive_substream(0))?;
            let model = fit_model(kind, &ensembles)?;
            let rows: Vec<LocalPRow> = grid
                .par_iter()
                .enumerate()
                .map(|(i, theta)| -> Result<LocalPRow> {
                    let r = local_test(
                        theta,
                        &truth,
                        &model,
                        &local,
                        stream.derive_substream(1 + i as u64),
                    )?;
                    Ok(LocalPRow {
                        model: model_name.clone(),
                        n_train: cfg.local_map_n_train,
                        rep,
                        theta: theta.clone(),
                        p_value: r.p_value,
                    })
                })
                .collect::<Result<_>>()?;
            summary.locals.extend(rows);
        }
    }

    // global power and raw MMD by model and n_train
    for model_name in &cfg.global_models {
        let kind = ModelKind::from_name(model_name)?;
        for (nt_idx, &n_train) in cfg.n_train.iter().enumerate() {
            for trial in 0..cfg.trials {
                let stream = rng
                    .derive_substream(2_000_000 + trial as u64)
                    .derive_substream(kind as u64)
                    .derive_substream(nt_idx as u64);
                let ensembles = draw_ensembles(&grid, n_train, 1, stream.derive_substream(0))?;
                let model = fit_model(kind, &ensembles)?;
                let gcfg = GlobalTestConfig {
                    reference: ThetaReference::Grid(grid.clone()),
                    b_draws: cfg.b_draws,
                    local: local.clone(),
                    uniformity: UniformityStat::Ks,
                    n_null: cfg.n_null,
                };
                let result = global_test(&gcfg, &truth, &model, stream.derive_substream(1))?;
                summary.globals.push(GlobalRow {
                    model: model_name.clone(),
                    n_train: Some(n_train),
                    trial,
                    statistic: result.statistic,
                    global_p: result.global_p,
                });

                // raw MMD at every grid cell on fresh draws
                let raw: Vec<HistRow> = grid
                    .par_iter()
                    .enumerate()
                    .map(|(i, theta)| -> Result<HistRow> {
                        let cell = stream.derive_substream(2).derive_substream(i as u64);
                        let s0 = truth.sample(theta, cfg.n_sim, cell.derive_substream(0))?;
                        let s1 = model.sample(theta, cfg.n_sim, cell.derive_substream(1))?;
                        let data = crate::data::pool_and_label(&s0, &s1)?;
                        Ok(HistRow {
                            diagnostic: "raw_mmd".into(),
                            model: model_name.clone(),
                            n_train: Some(n_train),
                            value: mmd_statistic(&data)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                summary.hist.extend(raw);
            }
        }
    }

    Ok(summary)
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

fn write_csv<T, F>(path: &Path, header: &str, rows: &[T], fmt: F) -> Result<()>
where
    F: Fn(&T) -> String,
{
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{}", fmt(row))?;
    }
    out.flush()?;
    Ok(())
}

fn join_theta(theta: &[f64]) -> String {
    theta
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn write_summary(
    name: ExperimentName,
    cfg: &ExperimentConfig,
    summary: &ExperimentSummary,
    out_dir: &Path,
    rng: RngStream,
) -> Result<()> {
    write_csv(
        &out_dir.join("power.csv"),
        "setting,statistic,theta,d,n,trials,rejections,power,std_error",
        &summary.power,
        |r| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                r.setting,
                r.statistic,
                join_theta(&r.theta),
                r.d,
                r.n,
                r.trials,
                r.rejections,
                r.power,
                r.std_error
            )
        },
    )?;
    write_csv(
        &out_dir.join("local_pvalues.csv"),
        "model,n_train,rep,theta,p_value",
        &summary.locals,
        |r| {
            format!(
                "{},{},{},{},{}",
                r.model,
                r.n_train,
                r.rep,
                join_theta(&r.theta),
                r.p_value
            )
        },
    )?;
    write_csv(
        &out_dir.join("histograms.csv"),
        "diagnostic,model,n_train,value",
        &summary.hist,
        |r| {
            format!(
                "{},{},{},{}",
                r.diagnostic,
                r.model,
                r.n_train.map_or(String::new(), |n| n.to_string()),
                r.value
            )
        },
    )?;
    let mut global_file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("global.json"))?);
    serde_json::to_writer_pretty(&mut global_file, &summary.globals)?;
    global_file.flush()?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        experiment: &'static str,
        seed: RngStream,
        version: &'static str,
        config: &'a ExperimentConfig,
    }
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(out_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(
        &mut manifest,
        &Manifest {
            experiment: name.name(),
            seed: rng,
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
        },
    )?;
    manifest.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(i: u64) -> RngStream {
        RngStream::new(808, i)
    }

    #[test]
    fn null_power_matches_level() {
        // truth = alternative: power sits within 3 binomial sds of alpha
        let setting = SyntheticSetting::MixtureOfGaussians { dim: 2 };
        let truth = TrueModel(setting);
        let cfg = LocalTestConfig::new(
            StatisticSpec::Regression {
                method: MethodSpec::Knn { k: 5 },
            },
            19,
            40,
            40,
        );
        let row = estimate_power(
            "mog",
            &truth,
            &truth,
            &[0.0],
            2,
            &cfg,
            200,
            0.05,
            seed(0),
        )
        .unwrap();
        let se = (0.05f64 * 0.95 / 200.0).sqrt();
        assert!(
            (row.power - 0.05).abs() <= 3.0 * se,
            "null power {}",
            row.power
        );
        assert!(row.warning.is_none());
    }

    #[test]
    fn impossible_alpha_warns() {
        let setting = SyntheticSetting::MixtureOfGaussians { dim: 1 };
        let truth = TrueModel(setting);
        let cfg = LocalTestConfig::new(StatisticSpec::Energy, 9, 10, 10);
        let row = estimate_power("mog", &truth, &truth, &[0.0], 1, &cfg, 5, 0.05, seed(1)).unwrap();
        assert!(row.warning.is_some());
        assert_eq!(row.rejections, 0);
    }

    #[test]
    fn overrides_apply_only_set_fields() {
        let base = ExperimentConfig::default_for(ExperimentName::Example2);
        let overrides: ExperimentOverrides =
            toml::from_str("trials = 7\ndims = [1, 2]\n").unwrap();
        let cfg = overrides.apply(base.clone());
        assert_eq!(cfg.trials, 7);
        assert_eq!(cfg.dims, vec![1, 2]);
        assert_eq!(cfg.m_permutations, base.m_permutations);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let r: std::result::Result<ExperimentOverrides, _> = toml::from_str("trails = 7\n");
        assert!(r.is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn tiny_example2_runs_and_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default_for(ExperimentName::Example2);
        cfg.trials = 3;
        cfg.m_permutations = 9;
        cfg.n_sim = 15;
        cfg.dims = vec![1];
        cfg.theta_points = 2;
        cfg.statistics = vec!["energy".into(), "regression_nn".into()];
        let summary =
            run_experiment(ExperimentName::Example2, &cfg, dir.path(), seed(2)).unwrap();
        // 3 settings x 1 dim x 2 stats x 2 thetas
        assert_eq!(summary.power.len(), 12);
        for file in [
            "power.csv",
            "local_pvalues.csv",
            "histograms.csv",
            "global.json",
            "manifest.json",
        ] {
            assert!(dir.path().join(file).exists(), "{file}");
        }
        let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"experiment\": \"example2\""));
        assert!(manifest.contains("\"trials\": 3"));
    }

    #[test]
    fn experiment_reports_are_byte_identical_on_rerun() {
        let mut cfg = ExperimentConfig::default_for(ExperimentName::PoissonSynth);
        cfg.trials = 1;
        cfg.m_permutations = 9;
        cfg.n_sim = 20;
        cfg.n_null = 49;
        cfg.b_draws = 4;
        cfg.grid_side = 2;
        cfg.n_train = vec![30];
        cfg.forest_trees = 10;
        cfg.local_map_models = vec!["poisson".into()];
        cfg.global_models = vec!["poisson".into()];
        let run = |threads: usize| {
            let dir = tempfile::tempdir().unwrap();
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                run_experiment(ExperimentName::PoissonSynth, &cfg, dir.path(), seed(3)).unwrap()
            });
            let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
            (
                read("power.csv"),
                read("local_pvalues.csv"),
                read("histograms.csv"),
                read("global.json"),
            )
        };
        assert_eq!(run(1), run(3));
    }
}
