//! Evaluation metrics and the statistical primitives behind them.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest p-value returned by [`welch_t_test`]; keeps `-ln p` finite.
pub const P_VALUE_FLOOR: f64 = 1e-300;

/// Significance level used to scale `-ln p` in HTFD.
pub const HTFD_SIGNIFICANCE: f64 = 0.05;

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function, evaluated with the
/// modified Lentz algorithm.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability `Pr(|T| >= |t|)` of Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t_stat: f64,
    pub dof: f64,
    pub p_value: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance two-sample t-test (two-sided).
pub fn welch_t_test(sample_a: &[f64], sample_b: &[f64]) -> Result<TTestResult> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(Error::InvalidArgument("each sample needs at least two values".into()));
    }
    let (na, nb) = (sample_a.len() as f64, sample_b.len() as f64);
    let (ma, va) = mean_var(sample_a);
    let (mb, vb) = mean_var(sample_b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let dof = na + nb - 2.0;
        return Ok(if ma == mb {
            TTestResult {
                t_stat: 0.0,
                dof,
                p_value: 1.0,
            }
        } else {
            TTestResult {
                t_stat: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                dof,
                p_value: P_VALUE_FLOOR,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = student_t_two_sided(t, dof).clamp(P_VALUE_FLOOR, 1.0);
    Ok(TTestResult {
        t_stat: t,
        dof,
        p_value: p,
    })
}

/// Per-cluster HTFD scores and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Htfd {
    pub per_cluster: Vec<f64>,
    pub mean: f64,
}

/// Hypothesis-testing feature discrimination.
///
/// For cluster `i` and feature `f`, Welch's test compares the cluster's values
/// with those of all other clusters; the score is the feature average of
/// `-ln(p) * 0.05`.
pub fn htfd(features: ArrayView2<f64>, assignments: &[usize], k: usize) -> Result<Htfd> {
    if k < 2 {
        return Err(Error::Undefined("HTFD is not defined for a single cluster".into()));
    }
    if assignments.len() != features.nrows() {
        return Err(Error::Shape("one assignment per row is required".into()));
    }
    if assignments.iter().any(|&a| a >= k) {
        return Err(Error::InvalidArgument("assignment outside [0, k)".into()));
    }
    let d = features.ncols();
    let mut per_cluster = Vec::with_capacity(k);
    for c in 0..k {
        let size = assignments.iter().filter(|&&a| a == c).count();
        if size == 0 {
            return Err(Error::InvalidArgument(format!("cluster {c} is empty")));
        }
        let mut total = 0.0;
        for f in 0..d {
            let col = features.column(f);
            let mut inside = Vec::with_capacity(size);
            let mut outside = Vec::with_capacity(assignments.len() - size);
            for (&v, &a) in col.iter().zip(assignments) {
                if a == c {
                    inside.push(v);
                } else {
                    outside.push(v);
                }
            }
            let p = welch_t_test(&inside, &outside)?.p_value;
            total += -p.ln() * HTFD_SIGNIFICANCE;
        }
        per_cluster.push(total / d as f64);
    }
    let mean = per_cluster.iter().sum::<f64>() / k as f64;
    Ok(Htfd { per_cluster, mean })
}

/// Mean silhouette coefficient over all points.
///
/// Points in singleton clusters score 0. Requires at least two nonempty clusters.
pub fn silhouette(z: ArrayView2<f64>, assignments: &[usize]) -> Result<f64> {
    let n = z.nrows();
    if assignments.len() != n {
        return Err(Error::Shape("one assignment per row is required".into()));
    }
    if n < 2 {
        return Err(Error::Undefined("silhouette needs at least two points".into()));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Undefined("silhouette needs at least two nonempty clusters".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                let d: f64 = z
                    .row(i)
                    .iter()
                    .zip(z.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                sums[assignments[j]] += d;
            }
        }
        let own = assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Binary ROC AUC via the Mann-Whitney statistic; `positives[i]` marks class 1.
pub fn auc_binary(positives: &[bool], scores: &[f64]) -> Result<f64> {
    if positives.len() != scores.len() {
        return Err(Error::Shape("labels and scores differ in length".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes present".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positives).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC from class labels and a probability matrix.
///
/// Two columns: binary AUC of column 1. More: unweighted mean of one-vs-rest
/// AUCs over the classes present in `labels`.
pub fn auc(labels: &[usize], probs: ArrayView2<f64>) -> Result<f64> {
    if labels.len() != probs.nrows() {
        return Err(Error::Shape("labels and score rows differ in length".into()));
    }
    let classes = probs.ncols();
    if classes == 2 {
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return auc_binary(&pos, &probs.column(1).to_vec());
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Undefined("AUC needs at least two classes present".into()));
    }
    let mut total = 0.0;
    for &c in &present {
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        total += auc_binary(&pos, &probs.column(c).to_vec())?;
    }
    Ok(total / present.len() as f64)
}

fn f1_for_class(labels: &[usize], predictions: &[usize], class: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y == class, p == class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// F1 of class 1 when `class_count == 2`, macro-averaged F1 otherwise.
pub fn f1(labels: &[usize], predictions: &[usize], class_count: usize) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(Error::Shape("labels and predictions differ in length".into()));
    }
    if class_count <= 2 {
        return Ok(f1_for_class(labels, predictions, 1));
    }
    Ok((0..class_count).map(|c| f1_for_class(labels, predictions, c)).sum::<f64>() / class_count as f64)
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape("labelings differ in length".into()));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = Array2::<f64>::zeros((ka, kb));
    for (&x, &y) in a.iter().zip(b) {
        table[[x, y]] += 1.0;
    }
    let pairs = |v: f64| v * (v - 1.0) / 2.0;
    let index: f64 = table.iter().map(|&v| pairs(v)).sum();
    let rows: f64 = table.rows().into_iter().map(|r| pairs(r.sum())).sum();
    let cols: f64 = table.columns().into_iter().map(|c| pairs(c.sum())).sum();
    let total = pairs(a.len() as f64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Predicted class per row (argmax, lowest index on ties).
pub fn predicted_classes(probs: ArrayView2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r: ArrayView1<f64>| crate::clustering::argmax(r.iter().copied()))
        .collect()
}

/// Classification and clustering quality of a model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub f1: f64,
    /// Absent for a single cluster or when undefined on the split.
    pub silhouette: Option<f64>,
    pub htfd_per_cluster: Option<Vec<f64>>,
    pub htfd_mean: Option<f64>,
}

/// Marker written in place of undefined metrics.
pub const UNDEFINED: &str = "NA";

impl MetricsReport {
    /// Computes every metric. `features` are the inputs used for HTFD, `z`
    /// the embeddings used for the silhouette, `assignments` hard clusters.
    pub fn compute(
        labels: &[usize],
        probs: ArrayView2<f64>,
        features: ArrayView2<f64>,
        z: ArrayView2<f64>,
        assignments: &[usize],
        k: usize,
    ) -> Result<Self> {
        let auc = auc(labels, probs)?;
        let f1 = f1(labels, &predicted_classes(probs), probs.ncols())?;
        let (silhouette, htfd_per_cluster, htfd_mean) = if k < 2 {
            (None, None, None)
        } else {
            let sil = silhouette(z, assignments).ok();
            match htfd(features, assignments, k) {
                Ok(h) => (sil, Some(h.per_cluster), Some(h.mean)),
                Err(e) => {
                    log::warn!("HTFD undefined on this split: {e}");
                    (sil, None, None)
                }
            }
        };
        Ok(MetricsReport {
            auc,
            f1,
            silhouette,
            htfd_per_cluster,
            htfd_mean,
        })
    }

    pub fn csv_header() -> &'static str {
        "auc,f1,silhouette,htfd_mean,htfd_per_cluster"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x}"));
        let per = self.htfd_per_cluster.as_ref().map_or_else(
            || UNDEFINED.to_string(),
            |v| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";"),
        );
        format!("{},{},{},{},{}", self.auc, self.f1, opt(self.silhouette), opt(self.htfd_mean), per)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn ln_gamma_known_values() {
        assert_abs_diff_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(ln_gamma(5.0), 24f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), epsilon = 1e-13);
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x ; I_x(a, 1) = x^a
        assert_abs_diff_eq!(regularized_incomplete_beta(1.0, 1.0, 0.3), 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(regularized_incomplete_beta(3.0, 1.0, 0.4), 0.064, epsilon = 1e-14);
        // t with 1 dof is Cauchy: Pr(|T| >= 1) = 0.5
        assert_abs_diff_eq!(student_t_two_sided(1.0, 1.0), 0.5, epsilon = 1e-13);
    }

    #[test]
    fn identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!(r.t_stat, 0.0);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_equal_samples_give_unit_p() {
        let r = welch_t_test(&[2.0; 5], &[2.0; 7]).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn separated_samples_give_tiny_p() {
        let a = vec![0.0; 30];
        let b: Vec<f64> = (0..30).map(|i| 10.0 + 1e-3 * ((i as f64) * 0.7).sin()).collect();
        let r = welch_t_test(&a, &b).unwrap();
        assert!(r.p_value < 1e-10);
        assert!(r.p_value >= P_VALUE_FLOOR);
    }

    #[test]
    fn welch_rejects_small_samples() {
        assert!(matches!(welch_t_test(&[1.0], &[1.0, 2.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn htfd_zero_for_identical_features() {
        let x = Array2::from_elem((6, 2), 3.0);
        let h = htfd(x.view(), &[0, 0, 1, 1, 2, 2], 3).unwrap();
        assert_eq!(h.mean, 0.0);
        assert!(h.per_cluster.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn htfd_single_feature_matches_t_test() {
        let mut col = vec![0.0; 10];
        col.extend((0..10).map(|i| 10.0 + 0.01 * i as f64));
        let x = Array2::from_shape_vec((20, 1), col.clone()).unwrap();
        let assign: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let h = htfd(x.view(), &assign, 2).unwrap();
        let p = welch_t_test(&col[..10], &col[10..]).unwrap().p_value;
        assert_abs_diff_eq!(h.per_cluster[0], -p.ln() * 0.05, epsilon = 1e-12);
    }

    #[test]
    fn htfd_domain_errors() {
        let x = Array2::from_elem((4, 1), 1.0);
        assert!(matches!(htfd(x.view(), &[0, 0, 0, 0], 1), Err(Error::Undefined(_))));
        assert!(matches!(htfd(x.view(), &[0, 0, 0, 0], 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn silhouette_perfect_split() {
        let z = array![[0.0, 0.0], [0.0, 0.0], [10.0, 10.0], [10.0, 10.0]];
        assert_eq!(silhouette(z.view(), &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(matches!(silhouette(z.view(), &[0, 0, 0, 0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn auc_examples() {
        let labels = [0, 0, 1, 1];
        let probs = |s: [f64; 4]| Array2::from_shape_fn((4, 2), |(i, j)| if j == 1 { s[i] } else { 1.0 - s[i] });
        assert_eq!(auc(&labels, probs([0.1, 0.2, 0.8, 0.9]).view()).unwrap(), 1.0);
        assert_eq!(auc(&labels, probs([0.9, 0.8, 0.2, 0.1]).view()).unwrap(), 0.0);
        assert_eq!(auc(&labels, probs([0.5; 4]).view()).unwrap(), 0.5);
        assert!(matches!(auc(&[1, 1], probs([0.5; 4]).slice(ndarray::s![..2, ..])), Err(Error::Undefined(_))));
    }

    #[test]
    fn multiclass_auc_is_mean_of_one_vs_rest() {
        let labels = [0, 1, 2, 0, 1, 2];
        let probs = array![
            [0.8, 0.1, 0.1],
            [0.2, 0.7, 0.1],
            [0.1, 0.2, 0.7],
            [0.6, 0.3, 0.1],
            [0.3, 0.4, 0.3],
            [0.3, 0.3, 0.4]
        ];
        assert_eq!(auc(&labels, probs.view()).unwrap(), 1.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1], 2).unwrap(), 1.0);
        assert_abs_diff_eq!(f1(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(f1(&[1, 1, 0], &[0, 0, 0], 2).unwrap(), 0.0);
        assert_eq!(f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
    }

    #[test]
    fn ari_identical_and_relabelled() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(v < 0.0);
    }

    #[test]
    fn report_k1_uses_markers() {
        let labels = [0, 1];
        let probs = array![[0.7, 0.3], [0.2, 0.8]];
        let z = array![[0.0], [1.0]];
        let r = MetricsReport::compute(&labels, probs.view(), z.view(), z.view(), &[0, 0], 1).unwrap();
        assert!(r.silhouette.is_none() && r.htfd_mean.is_none());
        assert!(r.csv_row().ends_with("NA,NA,NA"));
    }
}
