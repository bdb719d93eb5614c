//! Generative models: built-in synthetic simulators with their misspecified
//! closed-form approximations, approximate-likelihood models fitted from
//! training ensembles, and posterior-based calibration diagnostics.

mod fitted;
mod posterior;

pub use fitted::{
    fit_gaussian_model, fit_kde_model, fit_model, fit_poisson_model, kl_estimate,
    load_ensembles, save_ensembles, ApproxLikelihood, Ensemble, EnsembleTestSampler, KlEstimate,
    ModelKind,
};
pub use posterior::{
    approximate_lr_pvalue, beta_product_suff_stat, grid_posterior, pq_statistic, sbc_rank,
    BetaProductLikelihood, BetaSufficientLikelihood, FlatLikelihood, GridPosterior, PosteriorGrid,
    Prior, ThetaLikelihood,
};

use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::localtest::Sampler;
use crate::rng::RngStream;

/// The built-in synthetic experiments.
///
/// `Example1` draws 1000 i.i.d. Beta(theta, theta) coordinates per point.
/// `Bernoulli`, `Scaling`, and `MixtureOfGaussians` differ from their
/// approximations only in the first coordinate. `PoissonSynth` mimics count
/// data: a Poisson pair whose rate jumps from 1 to 10^4 at theta_1 = 0.5 and
/// which is sorted into `x1 <= x2` when theta_2 < 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SyntheticSetting {
    Example1,
    Bernoulli { dim: usize },
    Scaling { dim: usize },
    MixtureOfGaussians { dim: usize },
    PoissonSynth,
}

impl SyntheticSetting {
    pub fn from_name(name: &str, dim: usize) -> Result<Self> {
        Ok(match name {
            "example1" => SyntheticSetting::Example1,
            "bernoulli" => SyntheticSetting::Bernoulli { dim },
            "scaling" => SyntheticSetting::Scaling { dim },
            "mog" => SyntheticSetting::MixtureOfGaussians { dim },
            "poisson_synth" => SyntheticSetting::PoissonSynth,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown setting '{other}' (expected example1, bernoulli, scaling, mog, poisson_synth)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticSetting::Example1 => "example1",
            SyntheticSetting::Bernoulli { .. } => "bernoulli",
            SyntheticSetting::Scaling { .. } => "scaling",
            SyntheticSetting::MixtureOfGaussians { .. } => "mog",
            SyntheticSetting::PoissonSynth => "poisson_synth",
        }
    }

    /// Dimension of one draw.
    pub fn dim(&self) -> usize {
        match self {
            SyntheticSetting::Example1 => 1000,
            SyntheticSetting::Bernoulli { dim }
            | SyntheticSetting::Scaling { dim }
            | SyntheticSetting::MixtureOfGaussians { dim } => *dim,
            SyntheticSetting::PoissonSynth => 2,
        }
    }

    pub fn theta_dim(&self) -> usize {
        match self {
            SyntheticSetting::PoissonSynth => 2,
            _ => 1,
        }
    }

    /// Parameter region: bernoulli and scaling over [0, 1], the Gaussian
    /// mixture over [-5, 5], the count pair over [0, 1]^2, and theta > 0 for
    /// the Beta model.
    pub fn contains(&self, theta: &[f64]) -> bool {
        if theta.len() != self.theta_dim() || theta.iter().any(|t| !t.is_finite()) {
            return false;
        }
        match self {
            SyntheticSetting::Example1 => theta[0] > 0.0,
            SyntheticSetting::Bernoulli { .. } | SyntheticSetting::Scaling { .. } => {
                (0.0..=1.0).contains(&theta[0])
            }
            SyntheticSetting::MixtureOfGaussians { .. } => (-5.0..=5.0).contains(&theta[0]),
            SyntheticSetting::PoissonSynth => theta.iter().all(|t| (0.0..=1.0).contains(t)),
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if self.contains(theta) {
            Ok(())
        } else {
            Err(Error::ThetaOutOfDomain {
                setting: self.name().into(),
                theta: theta.to_vec(),
            })
        }
    }

    /// Draw `n` points from the true data-generating process at `theta`.
    pub fn simulate(&self, theta: &[f64], n: usize, rng: RngStream) -> Result<Sample> {
        self.check_theta(theta)?;
        let mut prng = rng.rng();
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let points: Vec<Vec<f64>> = match self {
            SyntheticSetting::Example1 => {
                let beta = Beta::new(theta[0], theta[0])
                    .map_err(|e| Error::InvalidParameter(format!("beta({0},{0}): {e}", theta[0])))?;
                // at tiny theta the gamma-ratio sampler can underflow to an
                // exact endpoint; keep draws inside the open interval so
                // log-densities stay finite
                (0..n)
                    .map(|_| {
                        (0..1000)
                            .map(|_| beta.sample(&mut prng).clamp(1e-300, 1.0 - 1e-16))
                            .collect()
                    })
                    .collect()
            }
            SyntheticSetting::Bernoulli { dim } => {
                let t = theta[0];
                let shifted = Normal::new(t, 1.0).unwrap();
                (0..n)
                    .map(|_| {
                        let mut row = Vec::with_capacity(*dim);
                        row.push(f64::from(prng.next_f64() < t));
                        row.extend((1..*dim).map(|_| shifted.sample(&mut prng)));
                        row
                    })
                    .collect()
            }
            SyntheticSetting::Scaling { dim } => {
                // theta is the variance of the first coordinate
                let first = Normal::new(0.0, theta[0].sqrt()).unwrap();
                (0..n)
                    .map(|_| {
                        let mut row = Vec::with_capacity(*dim);
                        row.push(first.sample(&mut prng));
                        row.extend((1..*dim).map(|_| std_normal.sample(&mut prng)));
                        row
                    })
                    .collect()
            }
            SyntheticSetting::MixtureOfGaussians { dim } => (0..n)
                .map(|_| {
                    let mu = if prng.next_f64() < 0.5 { -theta[0] } else { theta[0] };
                    let mut row = Vec::with_capacity(*dim);
                    row.push(mu + std_normal.sample(&mut prng));
                    row.extend((1..*dim).map(|_| std_normal.sample(&mut prng)));
                    row
                })
                .collect(),
            SyntheticSetting::PoissonSynth => {
                let lambda = if theta[0] < 0.5 { 1.0 } else { 1e4 };
                let pois = Poisson::new(lambda).unwrap();
                (0..n)
                    .map(|_| {
                        let mut x1: f64 = pois.sample(&mut prng);
                        let mut x2: f64 = pois.sample(&mut prng);
                        if theta[1] < 0.5 && x1 > x2 {
                            std::mem::swap(&mut x1, &mut x2);
                        }
                        vec![x1, x2]
                    })
                    .collect()
            }
        };
        Sample::new(points)
    }

    /// Draw from the closed-form misspecified approximation: independent
    /// normals for the Table-style settings, the flat (uniform) model for
    /// the Beta setting. The count pair has no closed-form approximation;
    /// its models are fitted from ensembles.
    pub fn approximate_simulate(&self, theta: &[f64], n: usize, rng: RngStream) -> Result<Sample> {
        self.check_theta(theta)?;
        let mut prng = rng.rng();
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let points: Vec<Vec<f64>> = match self {
            SyntheticSetting::Example1 => (0..n)
                .map(|_| (0..1000).map(|_| prng.next_f64()).collect())
                .collect(),
            SyntheticSetting::Bernoulli { dim } => {
                let shifted = Normal::new(theta[0], 1.0).unwrap();
                (0..n)
                    .map(|_| (0..*dim).map(|_| shifted.sample(&mut prng)).collect())
                    .collect()
            }
            SyntheticSetting::Scaling { dim } | SyntheticSetting::MixtureOfGaussians { dim } => {
                (0..n)
                    .map(|_| (0..*dim).map(|_| std_normal.sample(&mut prng)).collect())
                    .collect()
            }
            SyntheticSetting::PoissonSynth => {
                return Err(Error::InvalidParameter(
                    "poisson_synth has no closed-form approximation; fit a model from ensembles"
                        .into(),
                ))
            }
        };
        Sample::new(points)
    }

    /// Evenly spaced theta grid over the parameter region (cell centers).
    pub fn theta_grid(&self, points_per_axis: usize) -> Vec<Vec<f64>> {
        let axis = |lo: f64, hi: f64| -> Vec<f64> {
            (0..points_per_axis)
                .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / points_per_axis as f64)
                .collect()
        };
        match self {
            SyntheticSetting::Bernoulli { .. } | SyntheticSetting::Scaling { .. } => {
                axis(0.0, 1.0).into_iter().map(|t| vec![t]).collect()
            }
            SyntheticSetting::MixtureOfGaussians { .. } => {
                axis(-5.0, 5.0).into_iter().map(|t| vec![t]).collect()
            }
            SyntheticSetting::PoissonSynth => {
                let a = axis(0.0, 1.0);
                let mut grid = Vec::with_capacity(points_per_axis * points_per_axis);
                for t1 in &a {
                    for t2 in &a {
                        grid.push(vec![*t1, *t2]);
                    }
                }
                grid
            }
            SyntheticSetting::Example1 => axis(0.05, 3.0).into_iter().map(|t| vec![t]).collect(),
        }
    }
}

/// The true data-generating process as a sampler.
pub struct TrueModel(pub SyntheticSetting);

impl Sampler for TrueModel {
    fn sample(&self, theta: &[f64], n: usize, rng: RngStream) -> Result<Sample> {
        self.0.simulate(theta, n, rng)
    }
}

/// The closed-form misspecified approximation as a sampler.
pub struct ApproxModel(pub SyntheticSetting);

impl Sampler for ApproxModel {
    fn sample(&self, theta: &[f64], n: usize, rng: RngStream) -> Result<Sample> {
        self.0.approximate_simulate(theta, n, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localtest::{permutation_test, LocalTestConfig};
    use crate::regress::MethodSpec;
    use crate::stats::{ks_uniformity, StatisticSpec};

    fn seed(i: u64) -> RngStream {
        RngStream::new(404, i)
    }

    #[test]
    fn bernoulli_theta_zero_first_coordinate_always_zero() {
        let s = SyntheticSetting::Bernoulli { dim: 3 }
            .simulate(&[0.0], 200, seed(0))
            .unwrap();
        assert!(s.points().iter().all(|p| p[0] == 0.0));
    }

    #[test]
    fn example1_theta_one_is_uniform() {
        // Beta(1,1) = Uniform(0,1): KS over the flattened coordinates
        let s = SyntheticSetting::Example1.simulate(&[1.0], 10, seed(1)).unwrap();
        let flat: Vec<f64> = s.points().iter().flatten().copied().collect();
        assert_eq!(flat.len(), 10_000);
        assert!(ks_uniformity(&flat).unwrap() < 0.05);
        // and the flat approximation is exactly uniform by construction
        let a = SyntheticSetting::Example1
            .approximate_simulate(&[1.0], 10, seed(2))
            .unwrap();
        let flat: Vec<f64> = a.points().iter().flatten().copied().collect();
        assert!(ks_uniformity(&flat).unwrap() < 0.05);
    }

    /// Independent oracle: enumerate the sorted-pair mean of two independent
    /// Poisson(1) draws, E[min] = sum over k >= 1 of P(X >= k)^2, with terms
    /// up to k = 30.
    #[test]
    fn poisson_synth_sorted_pair_matches_enumeration() {
        let mut tail = Vec::new(); // P(X >= k) for k = 1..=30, lambda = 1
        let mut pmf = (-1.0f64).exp(); // P(X = 0)
        let mut cdf = pmf;
        for k in 1..=30u32 {
            tail.push(1.0 - cdf);
            pmf *= 1.0 / k as f64;
            cdf += pmf;
        }
        let e_min: f64 = tail.iter().map(|t| t * t).sum();
        assert!((e_min - 0.476).abs() < 1e-3, "enumerated E[min] = {e_min}");

        let s = SyntheticSetting::PoissonSynth
            .simulate(&[0.3, 0.3], 10_000, seed(3))
            .unwrap();
        assert!(s.points().iter().all(|p| p[0] <= p[1]));
        let mean_x1 = s.points().iter().map(|p| p[0]).sum::<f64>() / 10_000.0;
        assert!((mean_x1 - e_min).abs() < 0.05, "mean {mean_x1} vs {e_min}");
    }

    #[test]
    fn poisson_synth_independent_branch_uncorrelated() {
        let s = SyntheticSetting::PoissonSynth
            .simulate(&[0.3, 0.7], 20_000, seed(4))
            .unwrap();
        let m1 = s.points().iter().map(|p| p[0]).sum::<f64>() / 20_000.0;
        let m2 = s.points().iter().map(|p| p[1]).sum::<f64>() / 20_000.0;
        let (mut cov, mut v1, mut v2) = (0.0, 0.0, 0.0);
        for p in s.points() {
            cov += (p[0] - m1) * (p[1] - m2);
            v1 += (p[0] - m1) * (p[0] - m1);
            v2 += (p[1] - m2) * (p[1] - m2);
        }
        let corr = cov / (v1 * v2).sqrt();
        assert!(corr.abs() < 0.03, "corr = {corr}");
    }

    #[test]
    fn poisson_synth_high_count_branch_uses_clt_scale() {
        let s = SyntheticSetting::PoissonSynth
            .simulate(&[0.7, 0.7], 2_000, seed(5))
            .unwrap();
        let m1 = s.points().iter().map(|p| p[0]).sum::<f64>() / 2_000.0;
        assert!((m1 - 1e4).abs() < 3.0 * 100.0 / (2_000.0f64).sqrt());
    }

    #[test]
    fn mog_at_zero_equals_standard_normal_distribution() {
        // the mixture collapses at theta = 0, so a calibrated test must not
        // reject the closed-form approximation
        let setting = SyntheticSetting::MixtureOfGaussians { dim: 2 };
        let s0 = setting.simulate(&[0.0], 100, seed(6)).unwrap();
        let s1 = setting.approximate_simulate(&[0.0], 100, seed(7)).unwrap();
        let cfg = LocalTestConfig::new(
            StatisticSpec::Regression {
                method: MethodSpec::Knn { k: 7 },
            },
            99,
            100,
            100,
        );
        let r = permutation_test(&s0, &s1, &cfg, seed(8)).unwrap();
        assert!(r.p_value > 0.01, "p = {}", r.p_value);
    }

    #[test]
    fn mog_symmetric_in_theta_sign() {
        let setting = SyntheticSetting::MixtureOfGaussians { dim: 2 };
        let s_pos = setting.simulate(&[3.0], 100, seed(9)).unwrap();
        let s_neg = setting.simulate(&[-3.0], 100, seed(10)).unwrap();
        let cfg = LocalTestConfig::new(StatisticSpec::Energy, 99, 100, 100);
        let r = permutation_test(&s_pos, &s_neg, &cfg, seed(11)).unwrap();
        assert!(r.p_value > 0.01, "p = {}", r.p_value);
    }

    #[test]
    fn bernoulli_approximation_shifts_every_coordinate() {
        let s = SyntheticSetting::Bernoulli { dim: 4 }
            .approximate_simulate(&[0.5], 4_000, seed(12))
            .unwrap();
        for d in 0..4 {
            let mean = s.points().iter().map(|p| p[d]).sum::<f64>() / 4_000.0;
            assert!((mean - 0.5).abs() < 0.06, "coordinate {d} mean {mean}");
        }
    }

    #[test]
    fn theta_domain_enforced() {
        assert!(SyntheticSetting::Bernoulli { dim: 2 }
            .simulate(&[1.5], 10, seed(13))
            .is_err());
        assert!(SyntheticSetting::Example1.simulate(&[0.0], 1, seed(14)).is_err());
        assert!(SyntheticSetting::PoissonSynth
            .simulate(&[0.5], 10, seed(15))
            .is_err());
        assert!(SyntheticSetting::PoissonSynth
            .approximate_simulate(&[0.5, 0.5], 10, seed(16))
            .is_err());
    }

    #[test]
    fn grid_splits_halves_evenly() {
        let grid = SyntheticSetting::PoissonSynth.theta_grid(10);
        assert_eq!(grid.len(), 100);
        let low = grid.iter().filter(|t| t[0] < 0.5).count();
        assert_eq!(low, 50);
        assert!(grid.iter().all(|t| SyntheticSetting::PoissonSynth.contains(t)));
    }
}
