//! Pointwise feature-space diagnostics.
//!
//! For each test point x the deviation (m_hat(x) - pi1_hat)^2 measures how
//! far the local class balance sits from the global one; a permutation null
//! with a shared permutation schedule gives per-point p-values, and a
//! Benjamini-Hochberg step-up controls the false discovery rate across
//! points. Partial dependence curves summarize the marginal effect of one
//! coordinate on the fitted regression.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::regress::{self, MethodSpec, RegressionModel};
use crate::rng::RngStream;

/// Diagnosis of one test point.
#[derive(Debug, Clone, Serialize)]
pub struct PointDiagnosis {
    pub point: Vec<f64>,
    /// (m_hat(x) - pi1_hat)^2 under the observed labels.
    pub deviation: f64,
    /// Sign of m_hat(x) - pi1_hat: +1 over-represented in the label-1 sample.
    pub direction: i8,
    pub p_value: f64,
    pub flagged: bool,
}

/// Pointwise significance of |m_hat(x) - pi1_hat| at every test point.
///
/// Fits once on the training data, then refits under `m` label permutations;
/// the same permutation schedule serves every test point so the p-values are
/// comparable. Flags come from [`benjamini_hochberg`] at level `alpha`.
pub fn feature_space_test(
    train: &LabeledDataset,
    test_points: &Sample,
    method: &MethodSpec,
    m: usize,
    alpha: f64,
    rng: RngStream,
) -> Result<Vec<PointDiagnosis>> {
    if !train.has_both_labels() {
        return Err(Error::SingleLabel);
    }
    if m == 0 {
        return Err(Error::InvalidParameter("need at least 1 permutation".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter("alpha must be in (0,1)".into()));
    }
    if test_points.dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            got: test_points.dim(),
        });
    }

    // label permutations preserve label counts, so pi1 is computed once
    let pi1 = train.pi1();
    let model = regress::fit(method, train, rng.derive_substream(0))?;
    let observed: Vec<(f64, i8)> = model
        .predict_batch(test_points.points())?
        .into_iter()
        .map(|pred| {
            let diff = pred - pi1;
            (diff * diff, sign(diff))
        })
        .collect();

    let exceed_counts: Vec<usize> = (1..=m as u64)
        .into_par_iter()
        .map(|k| -> Result<Vec<usize>> {
            let stream = rng.derive_substream(k);
            let mut labels = train.labels.clone();
            stream.derive_substream(0).rng().shuffle(&mut labels);
            let permuted = LabeledDataset::new(train.points.clone(), labels)?;
            let refit = regress::fit(method, &permuted, stream.derive_substream(1))?;
            Ok(refit
                .predict_batch(test_points.points())?
                .into_iter()
                .zip(&observed)
                .map(|(pred, &(dev, _))| {
                    let diff = pred - pi1;
                    usize::from(diff * diff > dev)
                })
                .collect())
        })
        .try_reduce(
            || vec![0usize; test_points.len()],
            |mut acc, counts| {
                for (a, c) in acc.iter_mut().zip(counts) {
                    *a += c;
                }
                Ok(acc)
            },
        )?;

    let p_values: Vec<f64> = exceed_counts
        .iter()
        .map(|&c| (1 + c) as f64 / (m + 1) as f64)
        .collect();
    let flags = benjamini_hochberg(&p_values, alpha);

    Ok(test_points
        .points()
        .iter()
        .zip(observed)
        .zip(p_values)
        .zip(flags)
        .map(|(((x, (deviation, direction)), p_value), flagged)| PointDiagnosis {
            point: x.clone(),
            deviation,
            direction,
            p_value,
            flagged,
        })
        .collect())
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Seeded split of pooled data into a training set (labels kept) and
/// held-out test points (labels dropped); `test_frac` defaults to 0.35 in
/// the command-line front end.
pub fn split_train_test(
    data: &LabeledDataset,
    test_frac: f64,
    rng: RngStream,
) -> Result<(LabeledDataset, Sample)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::InvalidParameter("test fraction must be in (0,1)".into()));
    }
    let n = data.n();
    let n_test = ((n as f64 * test_frac).round() as usize).clamp(1, n - 2);
    let mut order: Vec<usize> = (0..n).collect();
    rng.rng().shuffle(&mut order);
    let (test_idx, train_idx) = order.split_at(n_test);
    let train = LabeledDataset::new(
        train_idx.iter().map(|&i| data.points[i].clone()).collect(),
        train_idx.iter().map(|&i| data.labels[i]).collect(),
    )?;
    let test = Sample::new(test_idx.iter().map(|&i| data.points[i].clone()).collect())?;
    Ok((train, test))
}

/// Benjamini-Hochberg step-up: sort p-values ascending, find the largest rank
/// r with p_(r) <= r * alpha / m, and flag everything at or below p_(r).
pub fn benjamini_hochberg(pvals: &[f64], alpha: f64) -> Vec<bool> {
    let m = pvals.len();
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_unstable_by(|&a, &b| pvals[a].partial_cmp(&pvals[b]).unwrap());
    let mut threshold: Option<f64> = None;
    for (rank, &idx) in order.iter().enumerate().rev() {
        if pvals[idx] <= (rank + 1) as f64 * alpha / m as f64 {
            threshold = Some(pvals[idx]);
            break;
        }
    }
    match threshold {
        Some(t) => pvals.iter().map(|&p| p <= t).collect(),
        None => vec![false; m],
    }
}

/// Marginal effect of coordinate `feature` on the fitted regression: for each
/// grid value v, the average prediction over the data with that coordinate
/// overwritten by v.
pub fn partial_dependence(
    model: &RegressionModel,
    data: &Sample,
    feature: usize,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty grid".into()));
    }
    if feature >= data.dim() {
        return Err(Error::InvalidParameter(format!(
            "feature index {feature} out of range for dimension {}",
            data.dim()
        )));
    }
    grid.iter()
        .map(|&v| {
            let mut acc = 0.0;
            let mut row = vec![0.0; data.dim()];
            for p in data.points() {
                row.copy_from_slice(p);
                row[feature] = v;
                acc += model.predict(&row)?;
            }
            Ok((v, acc / data.len() as f64))
        })
        .collect()
}

/// CSV emission: one row per test point with coordinates, deviation,
/// direction, p-value, and flag.
pub fn write_diagnoses_csv(path: &Path, points: &[PointDiagnosis]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = points.first().map_or(0, |p| p.point.len());
    let header: Vec<String> = (0..dim)
        .map(|d| format!("x_{d}"))
        .chain(
            ["deviation", "direction", "p_value", "flagged"]
                .iter()
                .map(|s| s.to_string()),
        )
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for p in points {
        let mut row: Vec<String> = p.point.iter().map(|v| v.to_string()).collect();
        row.push(p.deviation.to_string());
        row.push(p.direction.to_string());
        row.push(p.p_value.to_string());
        row.push(p.flagged.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pool_and_label;
    use proptest::prelude::*;

    fn seed(i: u64) -> RngStream {
        RngStream::new(99, i)
    }

    #[test]
    fn bh_hand_example() {
        let flags = benjamini_hochberg(&[0.01, 0.02, 0.5], 0.05);
        assert_eq!(flags, vec![true, true, false]);
    }

    #[test]
    fn bh_no_flags_when_all_one() {
        assert_eq!(benjamini_hochberg(&[1.0; 5], 0.05), vec![false; 5]);
    }

    #[test]
    fn bh_single_small_p_flagged() {
        assert_eq!(benjamini_hochberg(&[0.025], 0.05), vec![true]);
    }

    #[test]
    fn bh_step_up_rescues_smaller_ranks() {
        // rank-3 threshold passes, so all three smallest are flagged even
        // though rank 1 alone would fail
        let flags = benjamini_hochberg(&[0.029, 0.028, 0.03, 0.9], 0.04);
        assert_eq!(flags, vec![true, true, true, false]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Flag sets grow monotonically with alpha.
        #[test]
        fn bh_monotone_in_alpha(
            pvals in proptest::collection::vec(0.0f64..=1.0, 1..30),
            a1 in 0.01f64..0.5,
            a2 in 0.01f64..0.5,
        ) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let small = benjamini_hochberg(&pvals, lo);
            let large = benjamini_hochberg(&pvals, hi);
            for (s, l) in small.iter().zip(&large) {
                prop_assert!(!s || *l);
            }
        }
    }

    fn separated_train(n_per: usize) -> (LabeledDataset, Sample) {
        let mut prng = seed(1).rng();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..n_per {
            a.push(vec![-2.0 + prng.next_f64(), prng.next_f64()]);
            b.push(vec![2.0 + prng.next_f64(), prng.next_f64()]);
        }
        let train = pool_and_label(
            &Sample::new(a).unwrap(),
            &Sample::new(b).unwrap(),
        )
        .unwrap();
        let centers = Sample::new(vec![vec![-1.5, 0.5], vec![2.5, 0.5]]).unwrap();
        (train, centers)
    }

    #[test]
    fn cluster_centers_flagged_with_opposite_signs() {
        let (train, centers) = separated_train(100);
        let diag = feature_space_test(
            &train,
            &centers,
            &MethodSpec::Knn { k: 3 },
            99,
            0.05,
            seed(2),
        )
        .unwrap();
        assert!(diag[0].flagged && diag[1].flagged);
        assert_eq!(diag[0].direction, -1);
        assert_eq!(diag[1].direction, 1);
        assert!(diag.iter().all(|d| d.deviation > 0.0));
    }

    #[test]
    fn shared_schedule_means_identical_flags_per_seed() {
        let (train, centers) = separated_train(30);
        let a = feature_space_test(&train, &centers, &MethodSpec::Knn { k: 5 }, 49, 0.1, seed(3))
            .unwrap();
        let b = feature_space_test(&train, &centers, &MethodSpec::Knn { k: 5 }, 49, 0.1, seed(3))
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.p_value, y.p_value);
            assert_eq!(x.flagged, y.flagged);
        }
    }

    #[test]
    fn p_values_obey_the_permutation_formula() {
        // p = (1 + #exceed) / (M + 1): every p maps back to an integer
        // exceedance count in [0, M], and points whose deviation no
        // permutation tops sit at the floor 1/(M+1)
        let (train, centers) = separated_train(40);
        let m = 9usize;
        let diag = feature_space_test(&train, &centers, &MethodSpec::Knn { k: 3 }, m, 0.05, seed(4))
            .unwrap();
        for d in &diag {
            let exceed = d.p_value * (m + 1) as f64 - 1.0;
            assert!((exceed - exceed.round()).abs() < 1e-9);
            assert!((0.0..=m as f64).contains(&exceed));
        }
        // perfectly separated centers: no permutation exceeds the observed
        assert_eq!(diag[0].p_value, 1.0 / (m + 1) as f64);
    }

    #[test]
    fn single_label_train_rejected() {
        let train = LabeledDataset::new(vec![vec![0.0], vec![1.0]], vec![1, 1]).unwrap();
        let pts = Sample::new(vec![vec![0.0]]).unwrap();
        assert!(matches!(
            feature_space_test(&train, &pts, &MethodSpec::Knn { k: 1 }, 9, 0.05, seed(5)),
            Err(Error::SingleLabel)
        ));
    }

    #[test]
    fn partial_dependence_flat_for_constant_model() {
        let data = Sample::new(vec![vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let model = RegressionModel::Constant { pi1: 0.3, dim: 2 };
        let curve = partial_dependence(&model, &data, 0, &[-1.0, 0.0, 5.0]).unwrap();
        assert_eq!(curve.len(), 3);
        for (_, y) in curve {
            assert_eq!(y, 0.3);
        }
    }

    #[test]
    fn partial_dependence_flat_when_feature_unused() {
        // training feature 1 is constant, so knn ordering ignores the
        // overwritten coordinate entirely
        let train = LabeledDataset::new(
            vec![vec![0.0, 7.0], vec![1.0, 7.0], vec![2.0, 7.0], vec![3.0, 7.0]],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let model = regress::fit_knn(&train, 1).unwrap();
        let data = Sample::new(train.points.clone()).unwrap();
        let curve = partial_dependence(&model, &data, 1, &[-10.0, 0.0, 10.0]).unwrap();
        let first = curve[0].1;
        assert!(curve.iter().all(|&(_, y)| y == first));
    }

    #[test]
    fn partial_dependence_bad_feature_index() {
        let data = Sample::new(vec![vec![0.0]]).unwrap();
        let model = RegressionModel::Constant { pi1: 0.5, dim: 1 };
        assert!(partial_dependence(&model, &data, 1, &[0.0]).is_err());
        assert!(partial_dependence(&model, &data, 0, &[]).is_err());
    }

    #[test]
    fn csv_has_one_row_per_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let points = vec![
            PointDiagnosis {
                point: vec![1.0, 2.0],
                deviation: 0.04,
                direction: 1,
                p_value: 0.01,
                flagged: true,
            },
            PointDiagnosis {
                point: vec![-1.0, 0.0],
                deviation: 0.0,
                direction: 0,
                p_value: 1.0,
                flagged: false,
            },
        ];
        write_diagnoses_csv(&path, &points).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "x_0,x_1,deviation,direction,p_value,flagged");
        assert!(lines[1].ends_with("true"));
    }
}
