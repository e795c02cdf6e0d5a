//! Cluster-local expert classifiers.
//!
//! Each of the `k` experts maps a latent embedding to a softmax distribution
//! over the classes. During training every point is routed to one expert per
//! sub-iteration by sampling its cluster from its row of `Q` (stochastic
//! cohort sampling); the loss for a routed point is its cross-entropy under
//! that expert weighted by `q_ij`. At prediction time expert outputs are mixed
//! by `Q`, or the point is sent to its most likely cluster only.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::clustering::argmax;
use crate::nn::{Gradients, HiddenActivation, Mlp, OutputActivation};
use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// Probability floor applied before taking logarithms in the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEnsemble {
    experts: Vec<Mlp>,
    class_count: usize,
}

impl ExpertEnsemble {
    /// Builds `k` softmax experts `latent_dim -> hidden... -> class_count`.
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        latent_dim: usize,
        hidden: &[usize],
        class_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("an ensemble needs at least one expert".into()));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument("experts need at least two classes".into()));
        }
        let mut dims = vec![latent_dim];
        dims.extend_from_slice(hidden);
        dims.push(class_count);
        let experts = (0..k)
            .map(|_| Mlp::new(&dims, HiddenActivation::Relu, OutputActivation::Softmax, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpertEnsemble { experts, class_count })
    }

    pub fn from_experts(experts: Vec<Mlp>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::InvalidArgument("an ensemble needs at least one expert".into()))?;
        let (input, output) = (first.input_dim(), first.output_dim());
        for e in &experts {
            if e.input_dim() != input || e.output_dim() != output {
                return Err(Error::Shape("experts disagree on input or output dimension".into()));
            }
            if e.output_activation() != OutputActivation::Softmax {
                return Err(Error::InvalidArgument("experts must end in a softmax".into()));
            }
        }
        Ok(ExpertEnsemble {
            experts,
            class_count: output,
        })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn latent_dim(&self) -> usize {
        self.experts[0].input_dim()
    }

    pub fn experts(&self) -> &[Mlp] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [Mlp] {
        &mut self.experts
    }

    /// Class distributions of every expert for every row of `z`.
    pub fn predict_all(&self, z: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.experts.iter().map(|e| e.predict(z)).collect()
    }
}

/// One draw of a cluster id per point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortRealization {
    assignment: Vec<usize>,
    k: usize,
}

impl CohortRealization {
    pub fn new(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if assignment.iter().any(|&s| s >= k) {
            return Err(Error::InvalidArgument("cohort id out of range".into()));
        }
        Ok(CohortRealization { assignment, k })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Index sets `C_m = { i : s_i = m }`, in increasing index order.
    pub fn cohorts(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &s) in self.assignment.iter().enumerate() {
            out[s].push(i);
        }
        out
    }

    /// Routing weights `w_ij = q_ij * 1{s_i = j}`.
    pub fn weights(&self, q: ArrayView2<f64>) -> Array2<f64> {
        let mut w = Array2::zeros(q.raw_dim());
        for (i, &s) in self.assignment.iter().enumerate() {
            w[[i, s]] = q[[i, s]];
        }
        w
    }
}

/// Draws `s_i ~ q_i.` independently per row.
pub fn sample_cohorts(q: ArrayView2<f64>, seed: u64) -> CohortRealization {
    let mut rng = rng_from_seed(seed);
    sample_cohorts_with(q, &mut rng)
}

pub fn sample_cohorts_with<R: Rng + ?Sized>(q: ArrayView2<f64>, rng: &mut R) -> CohortRealization {
    let k = q.ncols();
    let assignment = q
        .rows()
        .into_iter()
        .map(|row| {
            let u: f64 = rng.random::<f64>() * row.sum();
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if p > 0.0 && u < acc {
                    return j;
                }
            }
            // rounding left u at the top of the last interval
            row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        })
        .collect();
    CohortRealization { assignment, k }
}

/// Deterministic routing to `argmax_j q_ij` (sampling switched off).
pub fn argmax_cohorts(q: ArrayView2<f64>) -> CohortRealization {
    CohortRealization {
        assignment: q.rows().into_iter().map(|r| argmax(r.iter().copied())).collect(),
        k: q.ncols(),
    }
}

/// Weighted cross-entropy and its gradients.
#[derive(Debug, Clone)]
pub struct SupervisedLoss {
    pub loss: f64,
    /// dL / d probs, one matrix per expert.
    pub prob_grads: Vec<Array2<f64>>,
    /// dL / d w_ij.
    pub weight_grads: Array2<f64>,
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// `L = (1/N) sum_j sum_i w_ij * (-ln prob_j[i, y_i])`.
///
/// `weights` is usually `q` itself or a cohort-masked copy of it. The true-class
/// probability is floored at [`PROB_FLOOR`] before the logarithm.
pub fn supervised_loss(
    weights: ArrayView2<f64>,
    labels: &[usize],
    expert_probs: &[Array2<f64>],
) -> Result<SupervisedLoss> {
    let (n, k) = weights.dim();
    if expert_probs.len() != k {
        return Err(Error::Shape(format!("{} experts for {k} weight columns", expert_probs.len())));
    }
    let classes = expert_probs.first().map(|p| p.ncols()).unwrap_or(0);
    for p in expert_probs {
        if p.dim() != (n, classes) {
            return Err(Error::Shape("expert probability matrices disagree in shape".into()));
        }
    }
    check_labels(labels, n, classes)?;
    let scale = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut prob_grads: Vec<Array2<f64>> = expert_probs.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
    let mut weight_grads = Array2::zeros((n, k));
    for j in 0..k {
        for i in 0..n {
            let p = expert_probs[j][[i, labels[i]]];
            let ce = -p.max(PROB_FLOOR).ln();
            let w = weights[[i, j]];
            loss += w * ce * scale;
            weight_grads[[i, j]] = ce * scale;
            if w != 0.0 && p > PROB_FLOOR {
                prob_grads[j][[i, labels[i]]] = -w * scale / p;
            }
        }
    }
    Ok(SupervisedLoss {
        loss,
        prob_grads,
        weight_grads,
    })
}

/// Result of one cohort-routed pass of the experts over a batch.
#[derive(Debug, Clone)]
pub struct CohortPass {
    pub loss: f64,
    /// Parameter gradients per expert; `None` when the expert's cohort is empty.
    pub expert_grads: Vec<Option<Gradients>>,
    /// dL / dz for the batch rows (through the expert inputs only).
    pub dz: Array2<f64>,
    /// dL / dq for the batch rows (through the routing weights).
    pub dq: Array2<f64>,
}

/// Weighted cross-entropy restricted to each expert's cohort, with gradients.
///
/// Equivalent to [`supervised_loss`] with `weights = cohort.weights(q)`, but
/// each expert only runs on its own cohort. `norm` is the batch size used for
/// averaging.
pub fn cohort_pass(
    ensemble: &ExpertEnsemble,
    z: ArrayView2<f64>,
    labels: &[usize],
    q: ArrayView2<f64>,
    cohort: &CohortRealization,
    norm: usize,
) -> Result<CohortPass> {
    let (n, k) = q.dim();
    if k != ensemble.k() || cohort.k() != k || cohort.assignment().len() != n || z.nrows() != n {
        return Err(Error::Shape("cohort pass inputs disagree on N or k".into()));
    }
    check_labels(labels, n, ensemble.class_count())?;
    let scale = 1.0 / norm.max(1) as f64;
    let mut loss = 0.0;
    let mut expert_grads = Vec::with_capacity(k);
    let mut dz = Array2::zeros(z.raw_dim());
    let mut dq = Array2::zeros((n, k));
    for (j, members) in cohort.cohorts().into_iter().enumerate() {
        if members.is_empty() {
            expert_grads.push(None);
            continue;
        }
        let sub = z.select(Axis(0), &members);
        let expert = &ensemble.experts()[j];
        let (probs, tape) = expert.forward(sub.view())?;
        let mut grad = Array2::zeros(probs.raw_dim());
        for (r, &i) in members.iter().enumerate() {
            let y = labels[i];
            let p = probs[[r, y]];
            let ce = -p.max(PROB_FLOOR).ln();
            let w = q[[i, j]];
            loss += w * ce * scale;
            dq[[i, j]] = ce * scale;
            if w != 0.0 && p > PROB_FLOOR {
                grad[[r, y]] = -w * scale / p;
            }
        }
        let (dsub, g) = expert.backward(&tape, grad.view())?;
        for (r, &i) in members.iter().enumerate() {
            dz.row_mut(i).assign(&dsub.row(r));
        }
        expert_grads.push(Some(g));
    }
    Ok(CohortPass {
        loss,
        expert_grads,
        dz,
        dq,
    })
}

/// Mixture prediction `sum_j q_j h_j`.
pub fn predict(q_row: ArrayView1<f64>, expert_probs_row: &[ArrayView1<f64>]) -> Array1<f64> {
    let classes = expert_probs_row.first().map(|p| p.len()).unwrap_or(0);
    let mut out = Array1::zeros(classes);
    for (&w, p) in q_row.iter().zip(expert_probs_row) {
        out.scaled_add(w, p);
    }
    out
}

/// Routes to the single expert `argmax_j q_j` (lowest index on ties).
pub fn hard_predict_mode(q_row: ArrayView1<f64>, expert_probs_row: &[ArrayView1<f64>]) -> Array1<f64> {
    expert_probs_row[argmax(q_row.iter().copied())].to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Q-weighted mixture of all experts.
    Weighted,
    /// Most likely cluster's expert only.
    Hard,
}

/// Batch version of [`predict`] / [`hard_predict_mode`].
pub fn combine(q: ArrayView2<f64>, expert_probs: &[Array2<f64>], mode: PredictMode) -> Array2<f64> {
    let classes = expert_probs.first().map(|p| p.ncols()).unwrap_or(0);
    let mut out = Array2::zeros((q.nrows(), classes));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let rows: Vec<ArrayView1<f64>> = expert_probs.iter().map(|p| p.row(i)).collect();
        let v = match mode {
            PredictMode::Weighted => predict(q.row(i), &rows),
            PredictMode::Hard => hard_predict_mode(q.row(i), &rows),
        };
        row.assign(&v);
    }
    out
}
