//! Posterior-quantile and rank calibration diagnostics for 1-D parameters,
//! plus the approximate likelihood-ratio p-value for a point null.
//!
//! The posterior is computed by normalizing prior(theta) * L(x; theta) on a
//! log-spaced theta grid, in log space with max subtraction; within-cell
//! integration treats the density as linear between nodes.

use rand_distr::{Distribution, Gamma as GammaDist};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ApproxLikelihood;
use crate::rng::{Prng, RngStream};

/// Prior over a scalar theta.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Prior {
    /// Shape-rate parameterization.
    Gamma { shape: f64, rate: f64 },
}

impl Prior {
    pub fn log_pdf(&self, theta: f64) -> f64 {
        match *self {
            Prior::Gamma { shape, rate } => {
                if theta <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                (shape - 1.0) * theta.ln() - rate * theta + shape * rate.ln()
                    - libm::lgamma(shape)
            }
        }
    }

    pub fn sample(&self, prng: &mut Prng) -> f64 {
        match *self {
            Prior::Gamma { shape, rate } => GammaDist::new(shape, 1.0 / rate)
                .expect("valid gamma parameters")
                .sample(prng),
        }
    }

    pub fn cdf(&self, theta: f64) -> f64 {
        match *self {
            Prior::Gamma { shape, rate } => {
                if theta <= 0.0 {
                    0.0
                } else if shape == 1.0 {
                    1.0 - (-rate * theta).exp()
                } else {
                    // series/continued-fraction regularized lower incomplete gamma
                    lower_incomplete_gamma_regularized(shape, rate * theta)
                }
            }
        }
    }
}

fn lower_incomplete_gamma_regularized(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series expansion
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term < sum * 1e-15 {
                break;
            }
        }
        sum * (a * x.ln() - x - libm::lgamma(a)).exp()
    } else {
        // Lentz continued fraction for the upper tail
        let mut b = x + 1.0 - a;
        let mut c = 1e300;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < 1e-300 {
                d = 1e-300;
            }
            c = b + an / c;
            if c.abs() < 1e-300 {
                c = 1e-300;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-15 {
                break;
            }
        }
        1.0 - (a * x.ln() - x - libm::lgamma(a)).exp() * h
    }
}

/// Log-likelihood of a data point as a function of a scalar theta.
pub trait ThetaLikelihood: Sync {
    fn log_likelihood(&self, x: &[f64], theta: f64) -> f64;
}

/// Product of independent Beta(theta, theta) coordinate densities.
pub struct BetaProductLikelihood;

impl ThetaLikelihood for BetaProductLikelihood {
    fn log_likelihood(&self, x: &[f64], theta: f64) -> f64 {
        if theta <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let ln_beta = 2.0 * libm::lgamma(theta) - libm::lgamma(2.0 * theta);
        let s: f64 = x.iter().map(|&v| v.ln() + (1.0 - v).ln()).sum();
        (theta - 1.0) * s - x.len() as f64 * ln_beta
    }
}

/// Beta(theta, theta) product likelihood through its sufficient statistic
/// S = sum of ln x_i + ln(1 - x_i), ignoring the data argument.
///
/// For small theta the coordinates concentrate so close to {0, 1} that f64
/// values cannot carry the tail information; pair this with
/// [`beta_product_suff_stat`], which draws S in log space.
pub struct BetaSufficientLikelihood {
    pub suff_stat: f64,
    pub n_coords: usize,
}

impl ThetaLikelihood for BetaSufficientLikelihood {
    fn log_likelihood(&self, _x: &[f64], theta: f64) -> f64 {
        if theta <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let ln_beta = 2.0 * libm::lgamma(theta) - libm::lgamma(2.0 * theta);
        (theta - 1.0) * self.suff_stat - self.n_coords as f64 * ln_beta
    }
}

/// Draw S = sum over `n_coords` i.i.d. Beta(theta, theta) coordinates of
/// ln x + ln(1 - x), without ever forming x.
///
/// Uses x = G1 / (G1 + G2) with G ~ Gamma(theta) and the shape boost
/// Gamma(theta) = Gamma(theta + 1) * U^(1/theta), so every term stays finite
/// even when theta is tiny and the draws would underflow f64.
pub fn beta_product_suff_stat(theta: f64, n_coords: usize, rng: RngStream) -> f64 {
    let mut prng = rng.rng();
    let boost = GammaDist::new(theta + 1.0, 1.0).expect("valid shape");
    let ln_gamma = |prng: &mut Prng| {
        // uniform on (0, 1): bin centers keep ln finite
        let u = ((prng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        boost.sample(prng).ln() + u.ln() / theta
    };
    let mut s = 0.0;
    for _ in 0..n_coords {
        let a = ln_gamma(&mut prng);
        let b = ln_gamma(&mut prng);
        let ln_sum = logaddexp(a, b);
        s += a + b - 2.0 * ln_sum;
    }
    s
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// The misspecified constant model: L(x; theta) proportional to 1.
pub struct FlatLikelihood;

impl ThetaLikelihood for FlatLikelihood {
    fn log_likelihood(&self, _x: &[f64], _theta: f64) -> f64 {
        0.0
    }
}

/// Evaluation grid for the posterior.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    pub nodes: Vec<f64>,
}

impl PosteriorGrid {
    /// Log-spaced nodes covering almost all of a unit-scale prior's mass.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Self {
        assert!(lo > 0.0 && hi > lo && n >= 2);
        let (llo, lhi) = (lo.ln(), hi.ln());
        let nodes = (0..n)
            .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
            .collect();
        PosteriorGrid { nodes }
    }

    /// Default grid: 2000 log-spaced nodes on (0.001, 20].
    pub fn default_unit_scale() -> Self {
        Self::log_spaced(0.001, 20.0, 2000)
    }
}

/// Normalized posterior on a grid with piecewise-linear density between
/// nodes.
pub struct GridPosterior {
    nodes: Vec<f64>,
    /// Density values at the nodes, normalized so the piecewise-linear
    /// interpolant integrates to one.
    density: Vec<f64>,
    /// Cumulative mass up to each node.
    cdf: Vec<f64>,
}

/// Build the grid posterior from unnormalized log prior-times-likelihood
/// values at the grid nodes (max subtraction guards against underflow).
pub fn grid_posterior(grid: &PosteriorGrid, log_weight: &[f64]) -> Result<GridPosterior> {
    if log_weight.len() != grid.nodes.len() {
        return Err(Error::LengthMismatch {
            points: grid.nodes.len(),
            labels: log_weight.len(),
        });
    }
    let max = log_weight.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidParameter(
            "posterior vanished everywhere on the grid".into(),
        ));
    }
    let mut density: Vec<f64> = log_weight.iter().map(|&w| (w - max).exp()).collect();
    let nodes = &grid.nodes;
    let mut cdf = vec![0.0f64; nodes.len()];
    for i in 1..nodes.len() {
        let seg = 0.5 * (density[i - 1] + density[i]) * (nodes[i] - nodes[i - 1]);
        cdf[i] = cdf[i - 1] + seg;
    }
    let total = cdf[nodes.len() - 1];
    if total <= 0.0 {
        return Err(Error::InvalidParameter(
            "posterior mass underflowed on the grid".into(),
        ));
    }
    density.iter_mut().for_each(|d| *d /= total);
    cdf.iter_mut().for_each(|c| *c /= total);
    Ok(GridPosterior {
        nodes: nodes.clone(),
        density,
        cdf,
    })
}

impl GridPosterior {
    /// Posterior mass strictly below `theta`, with exact integration of the
    /// linear density inside the containing cell.
    pub fn mass_below(&self, theta: f64) -> f64 {
        let n = self.nodes.len();
        if theta <= self.nodes[0] {
            return 0.0;
        }
        if theta >= self.nodes[n - 1] {
            return 1.0;
        }
        let idx = match self
            .nodes
            .binary_search_by(|v| v.partial_cmp(&theta).unwrap())
        {
            Ok(i) => return self.cdf[i],
            Err(i) => i - 1,
        };
        let (x0, x1) = (self.nodes[idx], self.nodes[idx + 1]);
        let (d0, d1) = (self.density[idx], self.density[idx + 1]);
        let u = theta - x0;
        let slope = (d1 - d0) / (x1 - x0);
        self.cdf[idx] + d0 * u + 0.5 * slope * u * u
    }

    /// Inverse CDF by binary search plus the in-cell quadratic solve.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.nodes.len();
        let p = p.clamp(0.0, 1.0);
        let idx = match self.cdf.binary_search_by(|v| v.partial_cmp(&p).unwrap()) {
            Ok(i) => return self.nodes[i],
            Err(0) => return self.nodes[0],
            Err(i) if i >= n => return self.nodes[n - 1],
            Err(i) => i - 1,
        };
        let (x0, x1) = (self.nodes[idx], self.nodes[idx + 1]);
        let (d0, d1) = (self.density[idx], self.density[idx + 1]);
        let target = p - self.cdf[idx];
        let slope = (d1 - d0) / (x1 - x0);
        let u = if slope.abs() < 1e-300 {
            if d0 > 0.0 {
                target / d0
            } else {
                0.0
            }
        } else {
            let disc = (d0 * d0 + 2.0 * slope * target).max(0.0);
            (disc.sqrt() - d0) / slope
        };
        x0 + u.clamp(0.0, x1 - x0)
    }
}

/// Posterior quantile statistic: the posterior mass below the prior draw
/// `theta_tilde` that generated `x`. Uniform over replicates when the
/// likelihood is the data-generating one.
pub fn pq_statistic(
    x: &[f64],
    theta_tilde: f64,
    prior: &Prior,
    likelihood: &dyn ThetaLikelihood,
    grid: &PosteriorGrid,
) -> Result<f64> {
    let log_weight: Vec<f64> = grid
        .nodes
        .iter()
        .map(|&t| prior.log_pdf(t) + likelihood.log_likelihood(x, t))
        .collect();
    Ok(grid_posterior(grid, &log_weight)?.mass_below(theta_tilde))
}

/// Rank statistic: draw `ell` posterior samples by inverse CDF and count how
/// many fall below `theta_tilde`. Uniform on {0, ..., ell} under the
/// data-generating likelihood.
pub fn sbc_rank(
    x: &[f64],
    theta_tilde: f64,
    prior: &Prior,
    likelihood: &dyn ThetaLikelihood,
    ell: usize,
    grid: &PosteriorGrid,
    rng: RngStream,
) -> Result<usize> {
    let log_weight: Vec<f64> = grid
        .nodes
        .iter()
        .map(|&t| prior.log_pdf(t) + likelihood.log_likelihood(x, t))
        .collect();
    let posterior = grid_posterior(grid, &log_weight)?;
    let mut prng = rng.rng();
    let rank = (0..ell)
        .filter(|_| posterior.quantile(prng.next_f64()) < theta_tilde)
        .count();
    Ok(rank)
}

/// Approximate likelihood-ratio p-value for the point null theta = theta0.
///
/// lambda(x) = L(x; theta0) / max over the grid of L(x; theta); the null
/// distribution of lambda comes from `n_mc` draws of the model at theta0,
/// and small lambda is evidence against the null, so
/// p = (1 + #{lambda(X) <= lambda(x)}) / (n_mc + 1).
pub fn approximate_lr_pvalue(
    x: &[f64],
    model: &ApproxLikelihood,
    theta0: &[f64],
    theta_grid: &[Vec<f64>],
    n_mc: usize,
    rng: RngStream,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::InvalidParameter("n_mc must be at least 1".into()));
    }
    let mut grid: Vec<Vec<f64>> = theta_grid.to_vec();
    if !grid.iter().any(|t| t == theta0) {
        grid.push(theta0.to_vec());
    }
    let log_lambda = |point: &[f64]| -> Result<f64> {
        let at_null = model.log_density(point, theta0)?;
        let mut best = f64::NEG_INFINITY;
        for t in &grid {
            best = best.max(model.log_density(point, t)?);
        }
        Ok(at_null - best)
    };
    let observed = log_lambda(x)?;
    let hits = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| -> Result<u64> {
            let draw = model.sample_at(theta0, 1, rng.derive_substream(i))?;
            Ok(u64::from(log_lambda(&draw.points()[0])? <= observed))
        })
        .collect::<Result<Vec<u64>>>()?
        .into_iter()
        .sum::<u64>();
    Ok((1 + hits) as f64 / (n_mc + 1) as f64)
}
