//! Two-sample test statistics and uniformity statistics.
//!
//! The regression statistic is the workhorse: with origin labels Y and a
//! regression estimate m_hat of P(Y=1 | X=x), it is the mean of
//! (m_hat(X_i) - pi1_hat)^2. Distance baselines (MMD with a Gaussian kernel,
//! energy distance) and a classifier-accuracy baseline are provided for
//! comparison, plus exact Kolmogorov-Smirnov and Cramer-von Mises statistics
//! for testing a batch of values against Uniform(0, 1).

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::regress::{self, MethodSpec};
use crate::rng::RngStream;

/// Which statistic a two-sample test evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StatisticSpec {
    Regression { method: MethodSpec },
    Mmd,
    Energy,
    C2st { method: MethodSpec },
}

impl StatisticSpec {
    pub fn tag(&self) -> String {
        match self {
            StatisticSpec::Regression { method } => format!("regression_{}", method.tag()),
            StatisticSpec::Mmd => "mmd".into(),
            StatisticSpec::Energy => "energy".into(),
            StatisticSpec::C2st { method } => format!("c2st_{}", method.tag()),
        }
    }
}

/// Whether the regression statistic fits on all points (in-sample) or on a
/// seeded half with evaluation on the other half.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegressionMode {
    #[default]
    Full,
    Split,
}

/// Regression test statistic: full mode fits m_hat on all n points and
/// returns mean((m_hat(X_i) - pi1_hat)^2); split mode shuffles with the seed,
/// fits on the first half, and averages over the second half with pi1_hat
/// taken from the fitting half.
///
/// In full mode a k = 1 neighborhood is each point itself, so the statistic
/// does not depend on the labeling; permutation tests need k >= 2 there
/// (split mode has no such restriction).
pub fn regression_statistic(
    data: &LabeledDataset,
    method: &MethodSpec,
    mode: RegressionMode,
    rng: RngStream,
) -> Result<f64> {
    if !data.has_both_labels() {
        return Err(Error::SingleLabel);
    }
    if mode == RegressionMode::Split && data.n() < 4 {
        return Err(Error::InsufficientData(
            "split mode needs at least 4 points".into(),
        ));
    }
    let prepared = PreparedStatistic::new(
        &StatisticSpec::Regression {
            method: method.clone(),
        },
        mode,
        data,
    )?;
    Ok(prepared.eval(&data.labels, rng))
}

/// Biased (V-statistic) squared maximum mean discrepancy with a Gaussian
/// kernel at the median-distance bandwidth.
pub fn mmd_statistic(data: &LabeledDataset) -> Result<f64> {
    if !data.has_both_labels() {
        return Err(Error::SingleLabel);
    }
    let prepared = PreparedStatistic::new(&StatisticSpec::Mmd, RegressionMode::Full, data)?;
    Ok(prepared.eval(&data.labels, RngStream::new(0, 0)))
}

/// Energy distance with the Euclidean norm:
/// 2 mean cross-distance - mean within-0 distance - mean within-1 distance,
/// all means over full n_g^2 pair grids.
pub fn energy_statistic(data: &LabeledDataset) -> Result<f64> {
    if !data.has_both_labels() {
        return Err(Error::SingleLabel);
    }
    let prepared = PreparedStatistic::new(&StatisticSpec::Energy, RegressionMode::Full, data)?;
    Ok(prepared.eval(&data.labels, RngStream::new(0, 0)))
}

/// Classifier two-sample statistic: seeded 50/50 split, regression trained on
/// one half and thresholded at 1/2, held-out accuracy returned.
pub fn c2st_statistic(
    data: &LabeledDataset,
    method: &MethodSpec,
    rng: RngStream,
) -> Result<f64> {
    if !data.has_both_labels() {
        return Err(Error::SingleLabel);
    }
    if data.n() < 4 {
        return Err(Error::InsufficientData("c2st needs at least 4 points".into()));
    }
    let prepared = PreparedStatistic::new(
        &StatisticSpec::C2st {
            method: method.clone(),
        },
        RegressionMode::Full,
        data,
    )?;
    Ok(prepared.eval(&data.labels, rng))
}

// ---------------------------------------------------------------------------
// Prepared statistics: label-independent work is done once so permutation
// tests only redo what a relabeling actually changes.
// ---------------------------------------------------------------------------

pub(crate) struct PreparedStatistic<'a> {
    data: &'a LabeledDataset,
    mode: RegressionMode,
    kind: PreparedKind,
}

enum PreparedKind {
    Constant,
    /// Neighborhoods depend only on the points, so each relabeling is an
    /// O(n k) averaging pass.
    Knn {
        neighbors: Vec<Vec<u32>>,
        k: usize,
    },
    Forest {
        method: MethodSpec,
    },
    /// Full kernel matrix; a relabeling is one O(n^2) accumulation pass.
    Mmd {
        kernel: Vec<f64>,
    },
    Energy {
        dist: Vec<f64>,
    },
    C2st {
        method: MethodSpec,
    },
}

impl<'a> PreparedStatistic<'a> {
    pub fn new(
        spec: &StatisticSpec,
        mode: RegressionMode,
        data: &'a LabeledDataset,
    ) -> Result<Self> {
        let kind = match spec {
            StatisticSpec::Regression { method } => match method {
                MethodSpec::Constant => PreparedKind::Constant,
                MethodSpec::Knn { k } => {
                    if *k == 0 || *k > data.n() {
                        return Err(Error::InvalidParameter(format!(
                            "k must be in [1, {}], got {k}",
                            data.n()
                        )));
                    }
                    // in split mode neighborhoods change with the half, so
                    // precomputing over all points only serves full mode
                    if mode == RegressionMode::Full {
                        let neighbors = (0..data.n())
                            .map(|i| {
                                regress::k_nearest(&data.points, &data.points[i], *k)
                                    .into_iter()
                                    .map(|j| j as u32)
                                    .collect()
                            })
                            .collect();
                        PreparedKind::Knn { neighbors, k: *k }
                    } else {
                        PreparedKind::Forest {
                            method: method.clone(),
                        }
                    }
                }
                MethodSpec::RandomForest(_) => PreparedKind::Forest {
                    method: method.clone(),
                },
            },
            StatisticSpec::Mmd => {
                let dist = distance_matrix(&data.points);
                let h = median_positive(&dist, data.n());
                let kernel = dist
                    .iter()
                    .map(|&d| (-(d * d) / (2.0 * h * h)).exp())
                    .collect();
                PreparedKind::Mmd { kernel }
            }
            StatisticSpec::Energy => PreparedKind::Energy {
                dist: distance_matrix(&data.points),
            },
            StatisticSpec::C2st { method } => PreparedKind::C2st {
                method: method.clone(),
            },
        };
        Ok(PreparedStatistic { data, mode, kind })
    }

    /// Evaluate the statistic for an arbitrary labeling of the pooled points.
    pub fn eval(&self, labels: &[u8], rng: RngStream) -> f64 {
        match &self.kind {
            PreparedKind::Constant => 0.0,
            PreparedKind::Knn { neighbors, k } => {
                let pi1 = mean_labels(labels);
                let mut acc = 0.0;
                for nb in neighbors {
                    let pred =
                        nb.iter().map(|&j| labels[j as usize] as f64).sum::<f64>() / *k as f64;
                    acc += (pred - pi1) * (pred - pi1);
                }
                acc / labels.len() as f64
            }
            PreparedKind::Forest { method } => self.eval_refit(method, labels, rng),
            PreparedKind::Mmd { kernel } => {
                let (acc, n0, n1) = pair_sums(kernel, labels);
                acc[0] / (n0 * n0) + acc[2] / (n1 * n1) - acc[1] / (n0 * n1)
            }
            PreparedKind::Energy { dist } => {
                let (acc, n0, n1) = pair_sums(dist, labels);
                acc[1] / (n0 * n1) - acc[0] / (n0 * n0) - acc[2] / (n1 * n1)
            }
            PreparedKind::C2st { method } => {
                let n = self.data.n();
                let mut order: Vec<usize> = (0..n).collect();
                rng.derive_substream(0).rng().shuffle(&mut order);
                let half = n / 2;
                let train = make_subset(self.data, labels, &order[..half]);
                let model = match regress::fit(method, &train, rng.derive_substream(1)) {
                    Ok(m) => m,
                    Err(_) => return 0.5,
                };
                let held: Vec<Vec<f64>> = order[half..]
                    .iter()
                    .map(|&i| self.data.points[i].clone())
                    .collect();
                let preds = model.predict_batch(&held).expect("training dimension");
                let hits: usize = preds
                    .iter()
                    .zip(&order[half..])
                    .map(|(&pred, &i)| usize::from(u8::from(pred > 0.5) == labels[i]))
                    .sum();
                hits as f64 / (n - half) as f64
            }
        }
    }

    fn eval_refit(&self, method: &MethodSpec, labels: &[u8], rng: RngStream) -> f64 {
        match self.mode {
            RegressionMode::Full => {
                let data = LabeledDataset::new(self.data.points.clone(), labels.to_vec())
                    .expect("points and labels come from a valid dataset");
                let pi1 = mean_labels(labels);
                let model = regress::fit(method, &data, rng.derive_substream(1))
                    .expect("fit on full data");
                let preds = model.predict_batch(&data.points).expect("training dimension");
                preds.iter().map(|m| (m - pi1) * (m - pi1)).sum::<f64>() / data.n() as f64
            }
            RegressionMode::Split => {
                let n = self.data.n();
                let mut order: Vec<usize> = (0..n).collect();
                rng.derive_substream(0).rng().shuffle(&mut order);
                let half = n / 2;
                let train = make_subset(self.data, labels, &order[..half]);
                let pi1 = train.pi1();
                let model = match regress::fit(method, &train, rng.derive_substream(1)) {
                    Ok(m) => m,
                    // single-label fitting half: constant fallback
                    Err(_) => regress::fit_constant(&train),
                };
                let held: Vec<Vec<f64>> = order[half..]
                    .iter()
                    .map(|&i| self.data.points[i].clone())
                    .collect();
                let preds = model.predict_batch(&held).expect("training dimension");
                preds.iter().map(|m| (m - pi1) * (m - pi1)).sum::<f64>() / (n - half) as f64
            }
        }
    }
}

fn make_subset(data: &LabeledDataset, labels: &[u8], idx: &[usize]) -> LabeledDataset {
    LabeledDataset::new(
        idx.iter().map(|&i| data.points[i].clone()).collect(),
        idx.iter().map(|&i| labels[i]).collect(),
    )
    .expect("subset of a valid dataset")
}

fn mean_labels(labels: &[u8]) -> f64 {
    labels.iter().map(|&l| l as u64).sum::<u64>() as f64 / labels.len() as f64
}

/// Block sums of a symmetric pair matrix by label pair: acc[0] over (0,0)
/// pairs, acc[2] over (1,1) pairs, acc[1] over cross pairs counted twice.
fn pair_sums(matrix: &[f64], labels: &[u8]) -> ([f64; 3], f64, f64) {
    let n = labels.len();
    let mut acc = [0.0f64; 3];
    let mut cnt1 = 0usize;
    for i in 0..n {
        cnt1 += labels[i] as usize;
        let row = &matrix[i * n..(i + 1) * n];
        let li = labels[i] as usize;
        for (j, &v) in row.iter().enumerate() {
            acc[li + labels[j] as usize] += v;
        }
    }
    (acc, (n - cnt1) as f64, cnt1 as f64)
}

/// Dense n x n Euclidean distance matrix, row major.
fn distance_matrix(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = regress::sq_dist(&points[i], &points[j]).sqrt();
            m[i * n + j] = d;
            m[j * n + i] = d;
        }
    }
    m
}

/// Median of the positive pairwise distances; 1.0 when all distances are zero.
fn median_positive(dist: &[f64], n: usize) -> f64 {
    let mut pos: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist[i * n + j];
            if d > 0.0 {
                pos.push(d);
            }
        }
    }
    if pos.is_empty() {
        return 1.0;
    }
    pos.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = pos.len() / 2;
    if pos.len() % 2 == 1 {
        pos[mid]
    } else {
        0.5 * (pos[mid - 1] + pos[mid])
    }
}

// ---------------------------------------------------------------------------
// Uniformity statistics
// ---------------------------------------------------------------------------

fn check_unit_interval(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidParameter(format!(
                "uniformity statistics need values in [0,1], got {v}"
            )));
        }
    }
    Ok(())
}

/// Kolmogorov-Smirnov distance of the empirical CDF from Uniform(0, 1):
/// sup over z of |F_hat(z) - z|, computed exactly from order statistics.
pub fn ks_uniformity(values: &[f64]) -> Result<f64> {
    check_unit_interval(values)?;
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let b = v.len() as f64;
    let mut sup = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        let hi = (i + 1) as f64 / b - x;
        let lo = x - i as f64 / b;
        sup = sup.max(hi).max(lo);
    }
    Ok(sup)
}

/// Cramer-von Mises discrepancy from Uniform(0, 1): the integral over [0, 1]
/// of (F_hat(z) - z)^2, in closed form piecewise between sorted values.
pub fn cvm_uniformity(values: &[f64]) -> Result<f64> {
    check_unit_interval(values)?;
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let b = v.len();
    // integral of (c - z)^2 from lo to hi = [(c - lo)^3 - (c - hi)^3] / 3
    let seg = |c: f64, lo: f64, hi: f64| ((c - lo).powi(3) - (c - hi).powi(3)) / 3.0;
    let mut total = seg(0.0, 0.0, v[0]);
    for i in 0..b {
        let hi = if i + 1 < b { v[i + 1] } else { 1.0 };
        total += seg((i + 1) as f64 / b as f64, v[i], hi);
    }
    Ok(total)
}
