//! Margin losses and generalization-bound calculators for partitioned classifiers.
//!
//! The calculators are pure arithmetic over supplied norm caps and per-cluster
//! empirics. Nothing here estimates a Rademacher complexity from data; the
//! only complexity quantity computed is the norm-based upper bound for deep
//! networks with 1-Lipschitz, positively homogeneous activations.

use serde::{Deserialize, Serialize};

use crate::clustering::{hard_assignments, soft_assign};
use crate::data::Dataset;
use crate::trainer::TrainedModel;
use crate::{Error, Result};

/// Ramp applied to a margin value: 0 above `rho`, 1 at or below 0, linear between.
pub fn ramp(margin: f64, rho: f64) -> f64 {
    if margin >= rho {
        0.0
    } else if margin <= 0.0 {
        1.0
    } else {
        1.0 - margin / rho
    }
}

/// Binary margin loss of a real score `fx` for a label `y` in {-1, +1}.
pub fn margin_loss_binary(fx: f64, y: f64, rho: f64) -> f64 {
    ramp(fx * y, rho)
}

/// Multiclass margin `f(x)_y - max_{y' != y} f(x)_{y'}`.
pub fn multiclass_margin(fx: &[f64], y: usize) -> f64 {
    let others = fx
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    fx[y] - others
}

pub fn margin_loss_multiclass(fx: &[f64], y: usize, rho: f64) -> f64 {
    ramp(multiclass_margin(fx, y), rho)
}

/// `1{fx * y <= 0}`.
pub fn zero_one_loss_binary(fx: f64, y: f64) -> f64 {
    if fx * y <= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `1{y != argmax fx}` with ties resolved to the lowest index.
pub fn zero_one_loss_multiclass(fx: &[f64], y: usize) -> f64 {
    if crate::clustering::argmax(fx.iter().copied()) == y {
        0.0
    } else {
        1.0
    }
}

/// Norm-based bound on the empirical Rademacher complexity of one cluster's
/// composed network (shared encoder of depth `Q` followed by an expert of depth `L`),
/// evaluated on `N/k` samples:
///
/// `B_j sqrt(k) (sqrt(2 ln2 (L+Q)) + 1) prod(M^j) prod(M^0) / sqrt(N)`
pub fn rademacher_term(
    input_bound: f64,
    k: usize,
    expert_caps: &[f64],
    shared_caps: &[f64],
    n: usize,
) -> f64 {
    let depth = (expert_caps.len() + shared_caps.len()) as f64;
    let expert: f64 = expert_caps.iter().product();
    let shared: f64 = shared_caps.iter().product();
    input_bound * (k as f64).sqrt() * ((2.0 * std::f64::consts::LN_2 * depth).sqrt() + 1.0) * expert * shared
        / (n as f64).sqrt()
}

/// Inputs of the norm-based bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub rho: f64,
    /// Frobenius-norm caps of the shared encoder layers; its length is the shared depth.
    pub shared_norm_caps: Vec<f64>,
    /// One row per cluster; each row's length is the expert depth.
    pub expert_norm_caps: Vec<Vec<f64>>,
    /// Per-cluster input norm bounds.
    pub input_bounds: Vec<f64>,
    pub n: usize,
    pub delta: f64,
}

impl BoundParams {
    pub fn k(&self) -> usize {
        self.input_bounds.len()
    }

    pub fn expert_depth(&self) -> usize {
        self.expert_norm_caps.first().map_or(0, |r| r.len())
    }

    pub fn shared_depth(&self) -> usize {
        self.shared_norm_caps.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument("rho must be positive".into()));
        }
        check_delta(self.delta)?;
        if self.n == 0 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        if self.input_bounds.is_empty() {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.expert_norm_caps.len() != self.k() {
            return Err(Error::InvalidArgument("one expert cap row per cluster is required".into()));
        }
        let depth = self.expert_depth();
        if self.expert_norm_caps.iter().any(|r| r.len() != depth) {
            return Err(Error::InvalidArgument("experts must share one depth".into()));
        }
        let all = self
            .shared_norm_caps
            .iter()
            .chain(self.expert_norm_caps.iter().flatten())
            .chain(&self.input_bounds);
        for &v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument("norm caps and input bounds must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub complexity: f64,
    pub confidence: f64,
    pub total: f64,
}

/// `zeta_1 = 2/rho (sqrt(2 ln2 (L+Q)) + 1) prod(M^0)`.
pub fn zeta1(params: &BoundParams) -> f64 {
    let depth = (params.expert_depth() + params.shared_depth()) as f64;
    let shared: f64 = params.shared_norm_caps.iter().product();
    2.0 / params.rho * ((2.0 * std::f64::consts::LN_2 * depth).sqrt() + 1.0) * shared
}

/// Gap between expected 0-1 loss and empirical margin loss for uniform clusters:
///
/// `zeta_1 sum_j B_j prod(M^j) / sqrt(kN) + 3 sqrt(k ln(2k/delta) / 2N)`
pub fn bound_theorem5(params: &BoundParams) -> Result<BoundTerms> {
    params.validate()?;
    let k = params.k() as f64;
    let n = params.n as f64;
    let weighted: f64 = params
        .input_bounds
        .iter()
        .zip(&params.expert_norm_caps)
        .map(|(b, caps)| b * caps.iter().product::<f64>())
        .sum();
    let complexity = zeta1(params) * weighted / (k * n).sqrt();
    let confidence = 3.0 * (k * (2.0 * k / params.delta).ln() / (2.0 * n)).sqrt();
    Ok(BoundTerms {
        complexity,
        confidence,
        total: complexity + confidence,
    })
}

/// Per-cluster quantities entering the general partitioned bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEmpirics {
    pub empirical_losses: Vec<f64>,
    pub rademacher: Vec<f64>,
    pub loss_caps: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ClusterEmpirics {
    pub fn k(&self) -> usize {
        self.probabilities.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::InvalidArgument("at least one cluster is required".into()));
        }
        if [self.empirical_losses.len(), self.rademacher.len(), self.loss_caps.len(), self.counts.len()]
            .iter()
            .any(|&l| l != k)
        {
            return Err(Error::InvalidArgument("per-cluster vectors differ in length".into()));
        }
        if self.counts.contains(&0) {
            return Err(Error::InvalidArgument("every cluster needs at least one sample".into()));
        }
        if self.probabilities.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArgument("cluster probabilities must be nonnegative".into()));
        }
        let s: f64 = self.probabilities.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("cluster probabilities sum to {s}")));
        }
        Ok(())
    }

    fn weighted<F: Fn(usize) -> f64>(&self, per_cluster: F) -> f64 {
        (0..self.k()).map(|j| self.probabilities[j] * per_cluster(j)).sum()
    }
}

/// Bounded-loss partitioned bound:
/// `sum_j Pr_j (emp_j + 2 R_j + 3 lambda_j sqrt(ln(k/delta) / 2N_j))`.
pub fn bound_theorem1(emp: &ClusterEmpirics, delta: f64) -> Result<f64> {
    emp.validate()?;
    check_delta(delta)?;
    let k = emp.k() as f64;
    Ok(emp.weighted(|j| {
        emp.empirical_losses[j]
            + 2.0 * emp.rademacher[j]
            + 3.0 * emp.loss_caps[j] * ((k / delta).ln() / (2.0 * emp.counts[j] as f64)).sqrt()
    }))
}

/// Multiclass margin bound:
/// `sum_j Pr_j (emp_j + (2B^2/rho) R_j + (1 + 2B^2/rho) sqrt(ln(2k/delta) / 2N_j))`.
pub fn bound_theorem2(emp: &ClusterEmpirics, delta: f64, rho: f64, class_count: usize) -> Result<f64> {
    emp.validate()?;
    check_delta(delta)?;
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument("rho must be positive".into()));
    }
    if class_count < 2 {
        return Err(Error::InvalidArgument("class count must be at least 2".into()));
    }
    let k = emp.k() as f64;
    let coef = 2.0 * (class_count * class_count) as f64 / rho;
    Ok(emp.weighted(|j| {
        emp.empirical_losses[j]
            + coef * emp.rademacher[j]
            + (1.0 + coef) * ((2.0 * k / delta).ln() / (2.0 * emp.counts[j] as f64)).sqrt()
    }))
}

/// Binary margin bound:
/// `sum_j Pr_j (emp_j + (2/rho) R_j + 3 sqrt(ln(2/delta) / 2N_j))`.
pub fn bound_theorem4(emp: &ClusterEmpirics, delta: f64, rho: f64) -> Result<f64> {
    emp.validate()?;
    check_delta(delta)?;
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument("rho must be positive".into()));
    }
    Ok(emp.weighted(|j| {
        emp.empirical_losses[j]
            + 2.0 / rho * emp.rademacher[j]
            + 3.0 * ((2.0 / delta).ln() / (2.0 * emp.counts[j] as f64)).sqrt()
    }))
}

/// Theorem-5 parameters read off a trained model.
///
/// Shared caps are the encoder's per-layer Frobenius norms, expert caps the
/// experts' norms, and `B_j` the largest input norm among the points of `data`
/// hard-assigned to cluster j. Bias terms are not part of the norm product.
pub fn bound_from_model(model: &TrainedModel, rho: f64, delta: f64, data: &Dataset) -> Result<(BoundParams, BoundTerms)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("bound estimation needs data".into()));
    }
    let q = soft_assign(model.embed(data.features.view())?.view(), model.centroids.view())?;
    let assignments = hard_assignments(q.view());
    let mut input_bounds = vec![0.0_f64; model.k()];
    let mut seen = vec![false; model.k()];
    for (row, &j) in data.features.rows().into_iter().zip(&assignments) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        input_bounds[j] = input_bounds[j].max(norm);
        seen[j] = true;
    }
    for (j, s) in seen.iter().enumerate() {
        if !s {
            log::warn!("cluster {j} received no points; its input bound is 0");
        }
    }
    let params = BoundParams {
        rho,
        shared_norm_caps: model.encoder.frobenius_norms().norms,
        expert_norm_caps: model.experts.experts().iter().map(|e| e.frobenius_norms().norms).collect(),
        input_bounds,
        n: data.len(),
        delta,
    };
    let terms = bound_theorem5(&params)?;
    Ok((params, terms))
}

/// One row of a bound sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub terms: BoundTerms,
}

/// Evaluates the uniform-cluster bound for each k, holding the per-layer caps fixed
/// and splitting the total input bound `sum_j B_j` of `base` evenly across clusters.
///
/// Partitioning the domain into more clusters shrinks each cluster's region, so
/// the per-cluster input bounds shrink with it.
pub fn sweep_k(base: &BoundParams, ks: &[usize]) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let total: f64 = base.input_bounds.iter().sum();
    let caps = base.expert_norm_caps[0].clone();
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Err(Error::InvalidArgument("k must be at least 1".into()));
            }
            let params = BoundParams {
                expert_norm_caps: vec![caps.clone(); k],
                input_bounds: vec![total / k as f64; k],
                ..base.clone()
            };
            Ok(SweepRow {
                value: k as f64,
                terms: bound_theorem5(&params)?,
            })
        })
        .collect()
}

/// Evaluates the uniform-cluster bound of `base` for each sample size.
pub fn sweep_n(base: &BoundParams, ns: &[usize]) -> Result<Vec<SweepRow>> {
    ns.iter()
        .map(|&n| {
            let params = BoundParams { n, ..base.clone() };
            Ok(SweepRow {
                value: n as f64,
                terms: bound_theorem5(&params)?,
            })
        })
        .collect()
}
