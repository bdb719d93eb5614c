//! Binary-regression engines estimating m(x) = P(Y=1 | X=x).
//!
//! Three plug-in methods are provided: k-nearest-neighbor averaging, a
//! from-scratch random forest of regression trees, and the constant
//! predictor. A K-fold cross-validated squared error ranks the methods:
//! since E[(Y - m_hat(X))^2] is irreducible noise plus the integrated
//! squared error of m_hat, its ordering across methods matches the
//! integrated-error ordering that governs test power.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{Prng, RngStream};

/// Regression method selector used throughout the test statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MethodSpec {
    Constant,
    Knn { k: usize },
    RandomForest(ForestParams),
}

impl MethodSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            MethodSpec::Constant => "constant",
            MethodSpec::Knn { .. } => "knn",
            MethodSpec::RandomForest(_) => "random_forest",
        }
    }
}

/// Random forest hyperparameters. `mtry = None` means ceil(sqrt(D)) at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            mtry: None,
            min_leaf: 5,
            bootstrap: true,
        }
    }
}

/// A fitted regression model. Predictions always lie in [0, 1].
#[derive(Debug, Clone)]
pub enum RegressionModel {
    Constant {
        pi1: f64,
        dim: usize,
    },
    Knn {
        points: Vec<Vec<f64>>,
        labels: Vec<u8>,
        k: usize,
    },
    Forest {
        trees: Vec<Tree>,
        dim: usize,
    },
}

impl RegressionModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let dim = self.dim();
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        Ok(match self {
            RegressionModel::Constant { pi1, .. } => *pi1,
            RegressionModel::Knn { points, labels, k } => {
                let neighbors = k_nearest(points, x, *k);
                neighbors.iter().map(|&i| labels[i] as f64).sum::<f64>() / *k as f64
            }
            RegressionModel::Forest { trees, .. } => forest_predict(trees, x),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            RegressionModel::Constant { dim, .. } => *dim,
            RegressionModel::Knn { points, .. } => points[0].len(),
            RegressionModel::Forest { dim, .. } => *dim,
        }
    }

    /// Predictions for many points; identical values to calling
    /// [`RegressionModel::predict`] per point, but forests traverse
    /// tree-major so each tree stays cache-hot.
    pub fn predict_batch(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        if let RegressionModel::Forest { trees, dim } = self {
            for p in points {
                if p.len() != *dim {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        got: p.len(),
                    });
                }
            }
            let n = points.len();
            let mut keys = vec![0u64; n * trees.len()];
            for (t, tree) in trees.iter().enumerate() {
                for (i, p) in points.iter().enumerate() {
                    keys[i * trees.len() + t] = f64_key(tree.predict(p));
                }
            }
            return Ok((0..n)
                .map(|i| {
                    let row = &mut keys[i * trees.len()..(i + 1) * trees.len()];
                    row.sort_unstable();
                    row.iter().map(|&k| key_f64(k)).sum::<f64>() / trees.len() as f64
                })
                .collect());
        }
        points.iter().map(|p| self.predict(p)).collect()
    }

    #[cfg(test)]
    pub(crate) fn permute_trees(&mut self, order: &[usize]) {
        if let RegressionModel::Forest { trees, .. } = self {
            let old = trees.clone();
            for (dst, &src) in order.iter().enumerate() {
                trees[dst] = old[src].clone();
            }
        }
    }
}

/// Fit the constant predictor pi1_hat.
pub fn fit_constant(data: &LabeledDataset) -> RegressionModel {
    RegressionModel::Constant {
        pi1: data.pi1(),
        dim: data.dim(),
    }
}

/// Fit k-nearest-neighbor label averaging. Distance ties break toward the
/// lowest training index.
pub fn fit_knn(data: &LabeledDataset, k: usize) -> Result<RegressionModel> {
    if k == 0 || k > data.n() {
        return Err(Error::InvalidParameter(format!(
            "k must be in [1, {}], got {k}",
            data.n()
        )));
    }
    Ok(RegressionModel::Knn {
        points: data.points.clone(),
        labels: data.labels.clone(),
        k,
    })
}

/// Fit a random forest of regression trees on bootstrap resamples. Splits are
/// an exact scan over midpoints of sorted unique feature values among `mtry`
/// random features, minimizing the within-child variance of the labels.
pub fn fit_random_forest(
    data: &LabeledDataset,
    params: &ForestParams,
    rng: RngStream,
) -> Result<RegressionModel> {
    if data.n() < 2 {
        return Err(Error::InsufficientData(
            "random forest needs at least 2 points".into(),
        ));
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(Error::InvalidParameter(
            "n_trees and min_leaf must be at least 1".into(),
        ));
    }
    let dim = data.dim();
    let mtry = params.mtry.unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize);
    if mtry == 0 || mtry > dim {
        return Err(Error::InvalidParameter(format!(
            "mtry must be in [1, {dim}], got {mtry}"
        )));
    }
    // when few features exist, presorting each once and maintaining order
    // through partitions beats re-sorting at every node; both builders grow
    // identical trees
    let presorted = dim <= (2 * mtry).max(8);
    let trees: Vec<Tree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut prng = rng.derive_substream(t as u64).rng();
            grow_tree(data, mtry, params.min_leaf, params.bootstrap, presorted, &mut prng)
        })
        .collect();
    Ok(RegressionModel::Forest { trees, dim })
}

/// Fit whichever method the spec names.
pub fn fit(method: &MethodSpec, data: &LabeledDataset, rng: RngStream) -> Result<RegressionModel> {
    match method {
        MethodSpec::Constant => Ok(fit_constant(data)),
        MethodSpec::Knn { k } => fit_knn(data, *k),
        MethodSpec::RandomForest(params) => fit_random_forest(data, params, rng),
    }
}

/// K-fold cross-validated mean squared error E[(Y - m_hat(X))^2].
///
/// The partition comes from a seeded shuffle; the result depends only on the
/// partition, not on fold order, because per-point errors are accumulated at
/// their original indices.
pub fn estimate_cv_error(
    method: &MethodSpec,
    data: &LabeledDataset,
    folds: usize,
    rng: RngStream,
) -> Result<f64> {
    let n = data.n();
    if folds < 2 || folds > n {
        return Err(Error::InvalidParameter(format!(
            "folds must be in [2, {n}], got {folds}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.derive_substream(0).rng().shuffle(&mut order);

    let bounds: Vec<usize> = (0..=folds).map(|f| f * n / folds).collect();
    let fold_errors: Vec<Vec<(usize, f64)>> = (0..folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<(usize, f64)>> {
            let held: &[usize] = &order[bounds[f]..bounds[f + 1]];
            let train_idx: Vec<usize> = order[..bounds[f]]
                .iter()
                .chain(order[bounds[f + 1]..].iter())
                .copied()
                .collect();
            let train = LabeledDataset::new(
                train_idx.iter().map(|&i| data.points[i].clone()).collect(),
                train_idx.iter().map(|&i| data.labels[i]).collect(),
            )?;
            let model = fit(method, &train, rng.derive_substream(1 + f as u64))?;
            let held_points: Vec<Vec<f64>> =
                held.iter().map(|&i| data.points[i].clone()).collect();
            let preds = model.predict_batch(&held_points)?;
            Ok(held
                .iter()
                .zip(preds)
                .map(|(&i, pred)| (i, (data.labels[i] as f64 - pred).powi(2)))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut per_point = vec![0.0f64; n];
    for fold in fold_errors {
        for (i, e) in fold {
            per_point[i] = e;
        }
    }
    Ok(per_point.iter().sum::<f64>() / n as f64)
}

/// Indices of the k nearest training points to `x`, ordered by
/// (squared distance, index).
pub(crate) fn k_nearest(points: &[Vec<f64>], x: &[f64], k: usize) -> Vec<usize> {
    let mut dist: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (sq_dist(p, x), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
    };
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
    }
    dist.sort_unstable_by(cmp);
    dist.into_iter().map(|(_, i)| i).collect()
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// Regression trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x[*feature] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

/// Average tree predictions in sorted order so the result is exactly
/// invariant to the order of trees in the ensemble.
fn forest_predict(trees: &[Tree], x: &[f64]) -> f64 {
    let mut keys: Vec<u64> = trees.iter().map(|t| f64_key(t.predict(x))).collect();
    keys.sort_unstable();
    keys.into_iter().map(key_f64).sum::<f64>() / trees.len() as f64
}

fn grow_tree(
    data: &LabeledDataset,
    mtry: usize,
    min_leaf: usize,
    bootstrap: bool,
    presorted: bool,
    prng: &mut Prng,
) -> Tree {
    let n = data.n();
    let indices: Vec<u32> = if bootstrap {
        (0..n).map(|_| prng.uniform_range(n as u64) as u32).collect()
    } else {
        (0..n as u32).collect()
    };
    let nodes = if presorted {
        let mut builder = PresortedBuilder::new(data, mtry, min_leaf, &indices);
        builder.grow_root(prng);
        builder.nodes
    } else {
        let mut builder = TreeBuilder {
            points: &data.points,
            labels: &data.labels,
            dim: data.dim(),
            mtry,
            min_leaf,
            nodes: Vec::new(),
            features: (0..data.dim()).collect(),
            scratch: Vec::with_capacity(n),
        };
        builder.build(indices, prng);
        builder.nodes
    };
    Tree { nodes }
}

/// Test hook: force one tree-building strategy.
#[cfg(test)]
fn fit_forest_forced(
    data: &LabeledDataset,
    params: &ForestParams,
    rng: RngStream,
    presorted: bool,
) -> RegressionModel {
    let dim = data.dim();
    let mtry = params.mtry.unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize);
    let trees: Vec<Tree> = (0..params.n_trees)
        .map(|t| {
            let mut prng = rng.derive_substream(t as u64).rng();
            grow_tree(data, mtry, params.min_leaf, params.bootstrap, presorted, &mut prng)
        })
        .collect();
    RegressionModel::Forest { trees, dim }
}

/// Map f64 to u64 preserving order, so sorts run on integer keys.
#[inline]
fn f64_key(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b ^ (1 << 63)
    }
}

#[inline]
fn key_f64(k: u64) -> f64 {
    f64::from_bits(if k >> 63 == 1 { k ^ (1 << 63) } else { !k })
}

/// Best split over one feature's node slice, sorted ascending by (key, idx):
/// (lo_key, hi_key, within-child SSE, left count).
#[inline]
fn best_split_on_sorted(
    pairs: &[(u64, u32)],
    labels: &[u8],
    sum_ones: u32,
    min_leaf: usize,
) -> Option<(u64, u64, f64, usize)> {
    let n = pairs.len();
    let sum = sum_ones as f64;
    let mut best: Option<(u64, u64, f64, usize)> = None;
    let mut ones_left = 0u32;
    for pos in 1..n {
        ones_left += labels[pairs[pos - 1].1 as usize] as u32;
        if pos < min_leaf || n - pos < min_leaf {
            continue;
        }
        let (lo_key, hi_key) = (pairs[pos - 1].0, pairs[pos].0);
        if lo_key == hi_key {
            continue;
        }
        // SSE for 0/1 labels: sum(y^2) = sum(y)
        let nl = pos as f64;
        let nr = (n - pos) as f64;
        let left_sum = ones_left as f64;
        let right_sum = sum - left_sum;
        let child_sse =
            (left_sum - left_sum * left_sum / nl) + (right_sum - right_sum * right_sum / nr);
        if best.is_none_or(|b| child_sse < b.2) {
            best = Some((lo_key, hi_key, child_sse, pos));
        }
    }
    best
}

fn node_stats(n: usize, sum_ones: u32) -> (f64, f64) {
    let sum = sum_ones as f64;
    let mean = sum / n as f64;
    (mean, sum - sum * sum / n as f64)
}

/// Per-node sorting builder; cheap when only a few of many features are
/// scanned at each node.
struct TreeBuilder<'a> {
    points: &'a [Vec<f64>],
    labels: &'a [u8],
    dim: usize,
    mtry: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
    features: Vec<usize>,
    scratch: Vec<(u64, u32)>,
}

impl<'a> TreeBuilder<'a> {
    fn build(&mut self, indices: Vec<u32>, prng: &mut Prng) {
        self.grow_node(indices, prng);
    }

    /// Returns the index of the created node.
    fn grow_node(&mut self, indices: Vec<u32>, prng: &mut Prng) -> u32 {
        let n = indices.len();
        let sum_ones: u32 = indices.iter().map(|&i| self.labels[i as usize] as u32).sum();
        let (mean, parent_sse) = node_stats(n, sum_ones);

        if n < 2 * self.min_leaf || parent_sse <= 1e-12 {
            self.nodes.push(Node::Leaf { value: mean });
            return (self.nodes.len() - 1) as u32;
        }

        // sample mtry distinct candidate features
        for i in 0..self.mtry.min(self.dim) {
            let j = i + prng.uniform_range((self.dim - i) as u64) as usize;
            self.features.swap(i, j);
        }

        let mut best: Option<(usize, u64, u64, f64)> = None;
        for fi in 0..self.mtry {
            let feature = self.features[fi];
            self.scratch.clear();
            self.scratch.extend(
                indices
                    .iter()
                    .map(|&i| (f64_key(self.points[i as usize][feature]), i)),
            );
            self.scratch.sort_unstable();
            if let Some((lo, hi, sse, _)) =
                best_split_on_sorted(&self.scratch, self.labels, sum_ones, self.min_leaf)
            {
                if best.is_none_or(|b| sse < b.3) {
                    best = Some((feature, lo, hi, sse));
                }
            }
        }

        let (feature, lo_key, hi_key) = match best {
            Some((f, lo, hi, sse)) if sse < parent_sse - 1e-12 => (f, lo, hi),
            // degenerate split: no variance reduction possible
            _ => {
                self.nodes.push(Node::Leaf { value: mean });
                return (self.nodes.len() - 1) as u32;
            }
        };

        let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = indices
            .into_iter()
            .partition(|&i| f64_key(self.points[i as usize][feature]) <= lo_key);

        let node_pos = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean }); // placeholder
        let left = self.grow_node(left_idx, prng);
        let right = self.grow_node(right_idx, prng);
        self.nodes[node_pos] = Node::Split {
            feature,
            threshold: 0.5 * (key_f64(lo_key) + key_f64(hi_key)),
            left,
            right,
        };
        node_pos as u32
    }
}

/// Low-dimension builder: every feature's order is sorted once at the root
/// and maintained by stable partitions, so nodes never re-sort.
struct PresortedBuilder<'a> {
    labels: &'a [u8],
    dim: usize,
    mtry: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
    features: Vec<usize>,
    /// Per feature: (sortable value key, point index), node slices contiguous.
    order: Vec<Vec<(u64, u32)>>,
    /// Left-membership by point index for the current split.
    side: Vec<bool>,
    tmp: Vec<(u64, u32)>,
}

impl<'a> PresortedBuilder<'a> {
    fn new(data: &'a LabeledDataset, mtry: usize, min_leaf: usize, indices: &[u32]) -> Self {
        let dim = data.dim();
        let order = (0..dim)
            .map(|f| {
                let mut pairs: Vec<(u64, u32)> = indices
                    .iter()
                    .map(|&i| (f64_key(data.points[i as usize][f]), i))
                    .collect();
                pairs.sort_unstable();
                pairs
            })
            .collect();
        PresortedBuilder {
            labels: &data.labels,
            dim,
            mtry,
            min_leaf,
            nodes: Vec::new(),
            features: (0..dim).collect(),
            order,
            side: vec![false; data.n()],
            tmp: Vec::with_capacity(indices.len()),
        }
    }

    fn grow_root(&mut self, prng: &mut Prng) {
        let end = self.order[0].len();
        self.grow_node(0, end, prng);
    }

    fn grow_node(&mut self, start: usize, end: usize, prng: &mut Prng) -> u32 {
        let n = end - start;
        let sum_ones: u32 = self.order[0][start..end]
            .iter()
            .map(|&(_, i)| self.labels[i as usize] as u32)
            .sum();
        let (mean, parent_sse) = node_stats(n, sum_ones);

        if n < 2 * self.min_leaf || parent_sse <= 1e-12 {
            self.nodes.push(Node::Leaf { value: mean });
            return (self.nodes.len() - 1) as u32;
        }

        for i in 0..self.mtry.min(self.dim) {
            let j = i + prng.uniform_range((self.dim - i) as u64) as usize;
            self.features.swap(i, j);
        }

        let mut best: Option<(usize, u64, u64, f64, usize)> = None;
        for fi in 0..self.mtry {
            let feature = self.features[fi];
            if let Some((lo, hi, sse, nl)) = best_split_on_sorted(
                &self.order[feature][start..end],
                self.labels,
                sum_ones,
                self.min_leaf,
            ) {
                if best.is_none_or(|b| sse < b.3) {
                    best = Some((feature, lo, hi, sse, nl));
                }
            }
        }

        let (feature, lo_key, hi_key, n_left) = match best {
            Some((f, lo, hi, sse, nl)) if sse < parent_sse - 1e-12 => (f, lo, hi, nl),
            _ => {
                self.nodes.push(Node::Leaf { value: mean });
                return (self.nodes.len() - 1) as u32;
            }
        };

        for &(key, idx) in &self.order[feature][start..end] {
            self.side[idx as usize] = key <= lo_key;
        }
        // stable partition of every feature slice keeps each side sorted
        for f in 0..self.dim {
            let slice = &mut self.order[f][start..end];
            self.tmp.clear();
            let mut write = 0usize;
            for read in 0..n {
                let pair = slice[read];
                if self.side[pair.1 as usize] {
                    slice[write] = pair;
                    write += 1;
                } else {
                    self.tmp.push(pair);
                }
            }
            slice[write..].copy_from_slice(&self.tmp);
            debug_assert_eq!(write, n_left);
        }

        let node_pos = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean }); // placeholder
        let left = self.grow_node(start, start + n_left, prng);
        let right = self.grow_node(start + n_left, end, prng);
        self.nodes[node_pos] = Node::Split {
            feature,
            threshold: 0.5 * (key_f64(lo_key) + key_f64(hi_key)),
            left,
            right,
        };
        node_pos as u32
    }
}
