//! Hypothesis tests at a fixed parameter value.
//!
//! `permutation_test` compares two samples by refitting the chosen statistic
//! under random relabelings of sample origin. `local_test` wraps it with
//! simulator/emulator draws at one theta. `mc_gof_test` replaces permutations
//! with repeated Monte Carlo samples from the emulator, for the regime where
//! real simulations are scarce but emulations are cheap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::regress::MethodSpec;
use crate::result::TestResult;
use crate::rng::RngStream;
use crate::stats::{PreparedStatistic, RegressionMode, StatisticSpec};

/// Anything that can produce a sample at a parameter value. Implementations
/// must be pure functions of `(theta, n, rng)`.
pub trait Sampler: Sync {
    fn sample(&self, theta: &[f64], n: usize, rng: RngStream) -> Result<Sample>;
}

/// A pre-generated held-out ensemble standing in for a live simulator.
/// Ignores `theta` and the stream; always returns the stored draws.
pub struct FixedSample(pub Sample);

impl Sampler for FixedSample {
    fn sample(&self, _theta: &[f64], n: usize, _rng: RngStream) -> Result<Sample> {
        if n > self.0.len() {
            return Err(Error::InsufficientData(format!(
                "held-out ensemble has {} draws, {n} requested",
                self.0.len()
            )));
        }
        Sample::new(self.0.points()[..n].to_vec())
    }
}

/// How the local test builds its null distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestVariant {
    Permutation,
    /// Repeated Monte Carlo sampling from the emulator with reference
    /// samples of size `n_e`.
    MonteCarloGof { n_e: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTestConfig {
    pub statistic: StatisticSpec,
    pub m_permutations: usize,
    pub n_sim0: usize,
    pub n_sim1: usize,
    pub mode: RegressionMode,
    pub variant: TestVariant,
}

impl LocalTestConfig {
    pub fn new(statistic: StatisticSpec, m_permutations: usize, n_sim0: usize, n_sim1: usize) -> Self {
        LocalTestConfig {
            statistic,
            m_permutations,
            n_sim0,
            n_sim1,
            mode: RegressionMode::Full,
            variant: TestVariant::Permutation,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m_permutations == 0 {
            return Err(Error::InvalidParameter("need at least 1 permutation".into()));
        }
        if self.n_sim0 == 0 || self.n_sim1 == 0 {
            return Err(Error::InvalidParameter("draw counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Lexicographic comparison of two samples (row by row, then by length).
fn lex_less(a: &Sample, b: &Sample) -> bool {
    for (ra, rb) in a.points().iter().zip(b.points()) {
        for (x, y) in ra.iter().zip(rb) {
            match x.partial_cmp(y).unwrap() {
                std::cmp::Ordering::Less => return true,
                std::cmp::Ordering::Greater => return false,
                std::cmp::Ordering::Equal => {}
            }
        }
    }
    a.len() < b.len()
}

/// Two-sample test via label permutations.
///
/// Computes the statistic on the observed origin labeling, then on
/// `m_permutations` uniformly random relabelings (refitting the statistic
/// each time), and returns `p = (1 + #{T_perm > T_obs}) / (M + 1)`. Ties count
/// toward non-rejection.
///
/// The pooled layout puts the lexicographically smaller sample first with
/// labels assigned by membership in `s1`, so for statistics symmetric in the
/// group roles the result is identical under swapping `(s0, s1)`.
pub fn permutation_test(
    s0: &Sample,
    s1: &Sample,
    cfg: &LocalTestConfig,
    rng: RngStream,
) -> Result<TestResult> {
    cfg.validate()?;
    if s0.dim() != s1.dim() {
        return Err(Error::DimensionMismatch {
            expected: s0.dim(),
            got: s1.dim(),
        });
    }
    let swap = lex_less(s1, s0);
    let (first, second) = if swap { (s1, s0) } else { (s0, s1) };
    let first_label = u8::from(swap);
    let mut points = Vec::with_capacity(first.len() + second.len());
    points.extend(first.points().iter().cloned());
    points.extend(second.points().iter().cloned());
    let mut labels = vec![first_label; first.len()];
    labels.extend(std::iter::repeat_n(1 - first_label, second.len()));
    let data = LabeledDataset::new(points, labels)?;

    permutation_test_on(&data, cfg, rng)
}

/// Permutation test over an already pooled dataset.
pub fn permutation_test_on(
    data: &LabeledDataset,
    cfg: &LocalTestConfig,
    rng: RngStream,
) -> Result<TestResult> {
    if !data.has_both_labels() {
        return Err(Error::SingleLabel);
    }
    let prepared = PreparedStatistic::new(&cfg.statistic, cfg.mode, data)?;
    let observed = prepared.eval(&data.labels, rng.derive_substream(0));
    let null_draws: Vec<f64> = (1..=cfg.m_permutations as u64)
        .into_par_iter()
        .map(|m| {
            let stream = rng.derive_substream(m);
            let mut labels = data.labels.clone();
            stream.derive_substream(0).rng().shuffle(&mut labels);
            prepared.eval(&labels, stream.derive_substream(1))
        })
        .collect();
    Ok(TestResult::from_null_draws(observed, null_draws, rng))
}

/// Local test at a fixed theta: draw from the simulator and the emulator,
/// then run the configured two-sample comparison.
pub fn local_test(
    theta: &[f64],
    simulator: &dyn Sampler,
    emulator: &dyn Sampler,
    cfg: &LocalTestConfig,
    rng: RngStream,
) -> Result<TestResult> {
    cfg.validate()?;
    let s0 = simulator.sample(theta, cfg.n_sim0, rng.derive_substream(0))?;
    match cfg.variant {
        TestVariant::Permutation => {
            let s1 = emulator.sample(theta, cfg.n_sim1, rng.derive_substream(1))?;
            permutation_test(&s0, &s1, cfg, rng.derive_substream(2))
        }
        TestVariant::MonteCarloGof { n_e } => {
            let method = match &cfg.statistic {
                StatisticSpec::Regression { method } => method.clone(),
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "the Monte Carlo goodness-of-fit variant needs a regression statistic, got {}",
                        other.tag()
                    )))
                }
            };
            mc_gof_test(
                &s0,
                emulator,
                theta,
                n_e,
                cfg.m_permutations,
                &method,
                cfg.mode,
                rng.derive_substream(2),
            )
        }
    }
}

/// Goodness-of-fit regression test via Monte Carlo sampling.
///
/// Computes the regression statistic on `s` vs one emulator sample of size
/// `n_e`; each of the `m` null replicates redraws both a fresh `|s|`-sized
/// sample and a fresh `n_e`-sized sample from the emulator and refits.
#[allow(clippy::too_many_arguments)]
pub fn mc_gof_test(
    s: &Sample,
    emulator: &dyn Sampler,
    theta: &[f64],
    n_e: usize,
    m: usize,
    method: &MethodSpec,
    mode: RegressionMode,
    rng: RngStream,
) -> Result<TestResult> {
    if n_e == 0 || m == 0 {
        return Err(Error::InvalidParameter(
            "n_e and the replicate count must be at least 1".into(),
        ));
    }
    let statistic = StatisticSpec::Regression {
        method: method.clone(),
    };
    let eval = |s0: &Sample, s1: &Sample, stream: RngStream| -> Result<f64> {
        let data = crate::data::pool_and_label(s0, s1)?;
        let prepared = PreparedStatistic::new(&statistic, mode, &data)?;
        Ok(prepared.eval(&data.labels, stream))
    };

    let s_e = emulator.sample(theta, n_e, rng.derive_substream(0))?;
    let observed = eval(s, &s_e, rng.derive_substream(1))?;

    let null_draws: Vec<f64> = (1..=m as u64)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let stream = rng.derive_substream(1 + i);
            let null_s = emulator.sample(theta, s.len(), stream.derive_substream(0))?;
            let null_e = emulator.sample(theta, n_e, stream.derive_substream(1))?;
            eval(&null_s, &null_e, stream.derive_substream(2))
        })
        .collect::<Result<_>>()?;
    Ok(TestResult::from_null_draws(observed, null_draws, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::RegressionMode;

    fn seed(i: u64) -> RngStream {
        RngStream::new(31, i)
    }

    struct Gaussian {
        mean: Vec<f64>,
        std: f64,
    }

    impl Sampler for Gaussian {
        fn sample(&self, _theta: &[f64], n: usize, rng: RngStream) -> Result<Sample> {
            use rand_distr::{Distribution, Normal};
            let mut prng = rng.rng();
            let points = (0..n)
                .map(|_| {
                    self.mean
                        .iter()
                        .map(|&m| Normal::new(m, self.std).unwrap().sample(&mut prng))
                        .collect()
                })
                .collect();
            Sample::new(points)
        }
    }

    fn knn_cfg(m: usize, n: usize) -> LocalTestConfig {
        LocalTestConfig::new(
            StatisticSpec::Regression {
                method: MethodSpec::Knn { k: 5 },
            },
            m,
            n,
            n,
        )
    }

    #[test]
    fn deterministic_given_stream() {
        let g = Gaussian { mean: vec![0.0, 0.0], std: 1.0 };
        let cfg = knn_cfg(19, 30);
        let a = local_test(&[0.0], &g, &g, &cfg, seed(1)).unwrap();
        let b = local_test(&[0.0], &g, &g, &cfg, seed(1)).unwrap();
        assert_eq!(a.statistic, b.statistic);
        assert_eq!(a.p_value, b.p_value);
        assert_eq!(a.null_draws, b.null_draws);
    }

    #[test]
    fn determinism_across_thread_counts() {
        let g = Gaussian { mean: vec![0.0], std: 1.0 };
        let cfg = knn_cfg(33, 40);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| local_test(&[0.0], &g, &g, &cfg, seed(2)).unwrap())
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.statistic, four.statistic);
        assert_eq!(one.null_draws, four.null_draws);
        assert_eq!(one.p_value, four.p_value);
    }

    #[test]
    fn p_values_live_on_the_grid() {
        let g = Gaussian { mean: vec![0.0], std: 1.0 };
        let cfg = knn_cfg(9, 20);
        for t in 0..20 {
            let r = local_test(&[0.0], &g, &g, &cfg, seed(100 + t)).unwrap();
            let steps = r.p_value * 10.0;
            assert!((steps - steps.round()).abs() < 1e-9);
            assert!(r.p_value >= 0.1 - 1e-12 && r.p_value <= 1.0);
        }
    }

    #[test]
    fn degenerate_emulator_rejects_hard() {
        // constant emulator vs continuous simulator: observed separation is
        // maximal, so p hits the floor in almost every trial
        struct Point;
        impl Sampler for Point {
            fn sample(&self, _t: &[f64], n: usize, _r: RngStream) -> Result<Sample> {
                Sample::new(vec![vec![0.0]; n])
            }
        }
        let sim = Gaussian { mean: vec![0.0], std: 1.0 };
        let cfg = LocalTestConfig::new(
            StatisticSpec::Regression {
                method: MethodSpec::Knn { k: 5 },
            },
            99,
            100,
            100,
        );
        let mut floor = 0;
        for t in 0..100 {
            let r = local_test(&[0.0], &sim, &Point, &cfg, seed(200 + t)).unwrap();
            if r.p_value == 0.01 {
                floor += 1;
            }
        }
        assert!(floor >= 95, "floor hits = {floor}");
    }

    #[test]
    fn swap_symmetry_with_shared_schedule() {
        // symmetric statistics: identical p-value when the samples swap roles
        let g0 = Gaussian { mean: vec![0.0, 0.0], std: 1.0 };
        let g1 = Gaussian { mean: vec![0.6, 0.0], std: 1.0 };
        let s0 = g0.sample(&[], 25, seed(3)).unwrap();
        let s1 = g1.sample(&[], 30, seed(4)).unwrap();
        for statistic in [StatisticSpec::Energy, StatisticSpec::Mmd] {
            let cfg = LocalTestConfig::new(statistic, 49, 25, 30);
            let a = permutation_test(&s0, &s1, &cfg, seed(5)).unwrap();
            let b = permutation_test(&s1, &s0, &cfg, seed(5)).unwrap();
            assert_eq!(a.p_value, b.p_value, "{:?}", cfg.statistic.tag());
            assert_eq!(a.statistic, b.statistic);
        }
    }

    #[test]
    fn unequal_sample_sizes_allowed() {
        let g = Gaussian { mean: vec![0.0], std: 1.0 };
        let s0 = g.sample(&[], 30, seed(6)).unwrap();
        let s1 = g.sample(&[], 70, seed(7)).unwrap();
        let cfg = knn_cfg(19, 30);
        let r = permutation_test(&s0, &s1, &cfg, seed(8)).unwrap();
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = Sample::new(vec![vec![0.0, 1.0]; 4]).unwrap();
        let b = Sample::new(vec![vec![0.0]; 4]).unwrap();
        assert!(matches!(
            permutation_test(&a, &b, &knn_cfg(9, 4), seed(0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mc_gof_needs_regression_statistic() {
        let g = Gaussian { mean: vec![0.0], std: 1.0 };
        let mut cfg = LocalTestConfig::new(StatisticSpec::Energy, 9, 10, 10);
        cfg.variant = TestVariant::MonteCarloGof { n_e: 50 };
        assert!(local_test(&[0.0], &g, &g, &cfg, seed(9)).is_err());
    }

    #[test]
    fn mc_gof_shift_detected() {
        let sim = Gaussian { mean: vec![3.0], std: 1.0 };
        let emu = Gaussian { mean: vec![0.0], std: 1.0 };
        let s = sim.sample(&[], 20, seed(10)).unwrap();
        let r = mc_gof_test(
            &s,
            &emu,
            &[],
            200,
            49,
            &MethodSpec::Knn { k: 9 },
            RegressionMode::Full,
            seed(11),
        )
        .unwrap();
        assert_eq!(r.p_value, 1.0 / 50.0);
    }

    #[test]
    fn fixed_sample_serves_prefixes() {
        let s = Sample::new((0..10).map(|i| vec![i as f64]).collect()).unwrap();
        let fixed = FixedSample(s);
        let got = fixed.sample(&[], 4, seed(0)).unwrap();
        assert_eq!(got.len(), 4);
        assert!(fixed.sample(&[], 11, seed(0)).is_err());
    }
}
