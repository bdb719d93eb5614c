//! Goodness-of-fit across parameter space.
//!
//! The global test samples parameter values from a reference distribution,
//! runs an independent local test at each (disjoint RNG substreams, disjoint
//! draws), and tests the resulting p-values for uniformity. The uniformity
//! p-value is computed against a Monte Carlo simulation of the exact
//! finite-B null rather than an asymptotic distribution.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localtest::{local_test, LocalTestConfig, Sampler};
use crate::rng::RngStream;
use crate::stats::{cvm_uniformity, ks_uniformity};

/// Reference distribution over the parameter space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ThetaReference {
    /// Uniform over an explicit grid, sampled with replacement.
    Grid(Vec<Vec<f64>>),
    /// Uniform over an axis-aligned box.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Explicit list with (unnormalized) weights.
    Weighted {
        thetas: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

impl ThetaReference {
    fn validate(&self) -> Result<()> {
        match self {
            ThetaReference::Grid(g) if g.is_empty() => {
                Err(Error::InvalidParameter("empty theta grid".into()))
            }
            ThetaReference::Box { lo, hi } => {
                if lo.len() != hi.len() || lo.is_empty() {
                    return Err(Error::InvalidParameter("box bounds must match".into()));
                }
                if lo.iter().zip(hi).any(|(a, b)| a >= b) {
                    return Err(Error::InvalidParameter("box must have positive volume".into()));
                }
                Ok(())
            }
            ThetaReference::Weighted { thetas, weights } => {
                if thetas.len() != weights.len() || thetas.is_empty() {
                    return Err(Error::InvalidParameter("weights must match thetas".into()));
                }
                if weights.iter().any(|&w| w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::InvalidParameter("weights must be nonnegative with positive sum".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn draw(&self, rng: RngStream) -> Vec<f64> {
        let mut prng = rng.rng();
        match self {
            ThetaReference::Grid(grid) => {
                grid[prng.uniform_range(grid.len() as u64) as usize].clone()
            }
            ThetaReference::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(&a, &b)| a + prng.next_f64() * (b - a))
                .collect(),
            ThetaReference::Weighted { thetas, weights } => {
                let total: f64 = weights.iter().sum();
                let u = prng.next_f64() * total;
                let mut acc = 0.0;
                for (t, &w) in thetas.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return t.clone();
                    }
                }
                thetas.last().unwrap().clone()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UniformityStat {
    Ks,
    Cvm,
}

impl UniformityStat {
    pub fn compute(self, values: &[f64]) -> Result<f64> {
        match self {
            UniformityStat::Ks => ks_uniformity(values),
            UniformityStat::Cvm => cvm_uniformity(values),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalTestConfig {
    pub reference: ThetaReference,
    pub b_draws: usize,
    pub local: LocalTestConfig,
    pub uniformity: UniformityStat,
    pub n_null: usize,
}

/// Result of a global test: the local p-values with their thetas, the
/// uniformity statistic, and its Monte Carlo p-value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalTestResult {
    pub theta: Vec<Vec<f64>>,
    pub local_p: Vec<f64>,
    pub statistic: f64,
    pub global_p: f64,
    pub seed: RngStream,
}

impl GlobalTestResult {
    pub fn reject(&self, alpha: f64) -> bool {
        self.global_p <= alpha
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable result")
    }

    /// One row per local test: theta coordinates then the p-value.
    pub fn write_local_pvalues_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let dim = self.theta.first().map_or(0, |t| t.len());
        let header: Vec<String> = (0..dim)
            .map(|d| format!("theta_{d}"))
            .chain(["p_value".to_string()])
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (t, p) in self.theta.iter().zip(&self.local_p) {
            let mut row: Vec<String> = t.iter().map(|v| v.to_string()).collect();
            row.push(p.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Run the global goodness-of-fit test.
pub fn global_test(
    cfg: &GlobalTestConfig,
    simulator: &dyn Sampler,
    emulator: &dyn Sampler,
    rng: RngStream,
) -> Result<GlobalTestResult> {
    cfg.reference.validate()?;
    if cfg.b_draws < 2 {
        return Err(Error::InvalidParameter("need at least 2 theta draws".into()));
    }
    if cfg.n_null == 0 {
        return Err(Error::InvalidParameter("need at least 1 null replicate".into()));
    }

    let thetas: Vec<Vec<f64>> = (0..cfg.b_draws as u64)
        .map(|i| cfg.reference.draw(rng.derive_substream(i).derive_substream(0)))
        .collect();

    let locals: Vec<std::result::Result<f64, (usize, Error)>> = thetas
        .par_iter()
        .enumerate()
        .map(|(i, theta)| {
            local_test(
                theta,
                simulator,
                emulator,
                &cfg.local,
                rng.derive_substream(i as u64).derive_substream(1),
            )
            .map(|r| r.p_value)
            .map_err(|e| (i, e))
        })
        .collect();

    let mut local_p = Vec::with_capacity(cfg.b_draws);
    for r in locals {
        match r {
            Ok(p) => local_p.push(p),
            Err((i, e)) => {
                // abort rather than impute; report how far we got
                return Err(Error::LocalTestFailed {
                    theta: thetas[i].clone(),
                    index: i,
                    completed: local_p.len(),
                    source: Box::new(e),
                });
            }
        }
    }

    let statistic = cfg.uniformity.compute(&local_p)?;
    let global_p = uniformity_pvalue(
        statistic,
        cfg.b_draws,
        cfg.uniformity,
        cfg.n_null,
        rng.derive_substream(cfg.b_draws as u64),
    );

    Ok(GlobalTestResult {
        theta: thetas,
        local_p,
        statistic,
        global_p,
        seed: rng,
    })
}

/// Monte Carlo p-value for a uniformity statistic: draw `n_null` batches of
/// `b` i.i.d. uniforms, compute the same statistic on each, and return
/// `(1 + #{null >= observed}) / (n_null + 1)`.
pub fn uniformity_pvalue(
    stat_value: f64,
    b: usize,
    which: UniformityStat,
    n_null: usize,
    rng: RngStream,
) -> f64 {
    let exceed = (0..n_null as u64)
        .into_par_iter()
        .map(|i| {
            let draw = null_statistic(b, which, rng.derive_substream(i));
            u64::from(draw >= stat_value)
        })
        .sum::<u64>();
    (1 + exceed) as f64 / (n_null + 1) as f64
}

fn null_statistic(b: usize, which: UniformityStat, rng: RngStream) -> f64 {
    let mut prng = rng.rng();
    let uniforms: Vec<f64> = (0..b).map(|_| prng.next_f64()).collect();
    which.compute(&uniforms).expect("uniform draws are in range")
}

/// One row of the null-quantile probe.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub b: usize,
    pub median: f64,
    pub upper_quantile: f64,
}

/// Empirical check that the (1 - alpha) null quantile of the uniformity
/// statistic shrinks toward zero as the batch size grows.
pub fn assumption_probe(
    schedule: &[usize],
    which: UniformityStat,
    alpha: f64,
    n_null: usize,
    rng: RngStream,
) -> Result<Vec<ProbeRow>> {
    if schedule.is_empty() {
        return Err(Error::InvalidParameter("empty probe schedule".into()));
    }
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(Error::InvalidParameter("alpha must be in (0,1)".into()));
    }
    schedule
        .iter()
        .enumerate()
        .map(|(row, &b)| {
            let mut draws: Vec<f64> = (0..n_null as u64)
                .into_par_iter()
                .map(|i| null_statistic(b, which, rng.derive_substream(row as u64).derive_substream(i)))
                .collect();
            draws.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            // nearest-rank quantiles
            let q_idx = (((1.0 - alpha) * n_null as f64).ceil() as usize).clamp(1, n_null) - 1;
            Ok(ProbeRow {
                b,
                median: draws[(n_null - 1) / 2],
                upper_quantile: draws[q_idx],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::MethodSpec;
    use crate::stats::StatisticSpec;

    fn seed(i: u64) -> RngStream {
        RngStream::new(55, i)
    }

    #[test]
    fn uniformity_pvalue_edges() {
        assert_eq!(
            uniformity_pvalue(0.0, 10, UniformityStat::Ks, 99, seed(0)),
            1.0
        );
        // KS of 2 or more continuous uniforms is below 1 almost surely
        assert_eq!(
            uniformity_pvalue(1.0, 10, UniformityStat::Ks, 99, seed(1)),
            0.01
        );
    }

    #[test]
    fn uniformity_pvalue_nonincreasing_in_stat() {
        let seeded = seed(2);
        let mut last = 1.0;
        for s in [0.0, 0.02, 0.05, 0.1, 0.2, 0.5] {
            let p = uniformity_pvalue(s, 100, UniformityStat::Ks, 199, seeded);
            assert!(p <= last + 1e-12, "p({s}) = {p} > {last}");
            last = p;
        }
    }

    #[test]
    fn null_ks_median_matches_kolmogorov_quantile() {
        // median of the KS null at B = 100 is about 0.84 / sqrt(B)
        let mut draws: Vec<f64> = (0..500)
            .map(|i| null_statistic(100, UniformityStat::Ks, seed(3).derive_substream(i)))
            .collect();
        draws.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let median = draws[249];
        assert!((median - 0.084).abs() < 0.02, "median {median}");
    }

    #[test]
    fn probe_quantiles_shrink_with_b() {
        let rows = assumption_probe(&[100, 1000, 10_000], UniformityStat::Ks, 0.05, 400, seed(4))
            .unwrap();
        assert!(rows[0].upper_quantile > rows[1].upper_quantile);
        assert!(rows[1].upper_quantile > rows[2].upper_quantile);
        // asymptotic 1.36 / sqrt(B)
        assert!((rows[0].upper_quantile - 0.134).abs() < 0.03, "{:?}", rows[0]);
        assert!(rows[2].upper_quantile < 0.02, "{:?}", rows[2]);

        let cvm = assumption_probe(&[100, 1000, 10_000], UniformityStat::Cvm, 0.05, 400, seed(5))
            .unwrap();
        assert!(cvm[0].upper_quantile > cvm[1].upper_quantile);
        assert!(cvm[1].upper_quantile > cvm[2].upper_quantile);
    }

    #[test]
    fn stubbed_identical_pvalues_reject_hard() {
        // all local p-values at 0.01: KS statistic 0.99 beats every null draw
        let locals = vec![0.01; 100];
        let stat = UniformityStat::Ks.compute(&locals).unwrap();
        assert!(stat > 0.98);
        let p = uniformity_pvalue(stat, 100, UniformityStat::Ks, 999, seed(6));
        assert_eq!(p, 1.0 / 1000.0);
    }

    #[test]
    fn reference_draws_stay_in_support() {
        let grid = ThetaReference::Grid(vec![vec![0.1], vec![0.2], vec![0.3]]);
        let boxed = ThetaReference::Box {
            lo: vec![0.0, -1.0],
            hi: vec![1.0, 1.0],
        };
        let weighted = ThetaReference::Weighted {
            thetas: vec![vec![5.0], vec![9.0]],
            weights: vec![0.0, 2.0],
        };
        for i in 0..50 {
            let g = grid.draw(seed(7).derive_substream(i));
            assert!([0.1, 0.2, 0.3].contains(&g[0]));
            let b = boxed.draw(seed(8).derive_substream(i));
            assert!((0.0..1.0).contains(&b[0]) && (-1.0..1.0).contains(&b[1]));
            // zero-weight atom never drawn
            assert_eq!(weighted.draw(seed(9).derive_substream(i)), vec![9.0]);
        }
    }

    #[test]
    fn failing_local_test_reports_theta() {
        struct Broken;
        impl Sampler for Broken {
            fn sample(&self, theta: &[f64], n: usize, rng: RngStream) -> crate::error::Result<crate::data::Sample> {
                if theta[0] > 0.5 {
                    return Err(Error::InvalidParameter("boom".into()));
                }
                use rand_distr::{Distribution, Normal};
                let mut prng = rng.rng();
                let normal = Normal::new(0.0, 1.0).unwrap();
                crate::data::Sample::new((0..n).map(|_| vec![normal.sample(&mut prng)]).collect())
            }
        }
        let cfg = GlobalTestConfig {
            reference: ThetaReference::Grid(vec![vec![0.1], vec![0.9]]),
            b_draws: 10,
            local: LocalTestConfig::new(
                StatisticSpec::Regression {
                    method: MethodSpec::Knn { k: 3 },
                },
                9,
                10,
                10,
            ),
            uniformity: UniformityStat::Ks,
            n_null: 99,
        };
        let err = global_test(&cfg, &Broken, &Broken, seed(10)).unwrap_err();
        match err {
            Error::LocalTestFailed { theta, .. } => assert_eq!(theta, vec![0.9]),
            other => panic!("unexpected error {other}"),
        }
    }
}
