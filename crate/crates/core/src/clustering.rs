//! Latent-space clustering machinery.
//!
//! Soft assignments use a Student-t kernel with one degree of freedom,
//! `q_ij ∝ (1 + ||z_i - mu_j||^2)^-1`, normalized per row. The self-training
//! target sharpens `q` by squaring and dividing by the soft cluster
//! frequencies. The clustering loss is `KL(P || Q)` with `P` held fixed.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// Clamp applied to soft cluster sizes before taking square roots.
pub const SIZE_FLOOR: f64 = 1e-12;

/// Centroids together with the current soft assignment and target.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub centroids: Array2<f64>,
    pub q: Array2<f64>,
    pub p_target: Array2<f64>,
}

impl ClusterState {
    /// Computes `q` and the target distribution for `z` under `centroids`.
    pub fn from_embeddings(z: ArrayView2<f64>, centroids: Array2<f64>) -> Result<Self> {
        let q = soft_assign(z, centroids.view())?;
        let p_target = target_distribution(q.view())?;
        Ok(ClusterState { centroids, q, p_target })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }
}

fn check_dims(z: &ArrayView2<f64>, centroids: &ArrayView2<f64>) -> Result<()> {
    if centroids.nrows() == 0 {
        return Err(Error::InvalidArgument("at least one centroid is required".into()));
    }
    if z.ncols() != centroids.ncols() {
        return Err(Error::Shape(format!(
            "embedding dim {} differs from centroid dim {}",
            z.ncols(),
            centroids.ncols()
        )));
    }
    Ok(())
}

/// Unnormalized kernel values `(1 + ||z_i - mu_j||^2)^-1`.
pub fn kernel_matrix(z: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = (z.nrows(), centroids.nrows());
    Array2::from_shape_fn((n, k), |(i, j)| {
        let d2: f64 = z
            .row(i)
            .iter()
            .zip(centroids.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        1.0 / (1.0 + d2)
    })
}

/// Student-t soft assignment of each embedding to each centroid.
pub fn soft_assign(z: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_dims(&z, &centroids)?;
    let mut q = kernel_matrix(z, centroids);
    for mut row in q.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(q)
}

/// Self-training target: `p_ij = (q_ij^2 / f_j) / sum_j' (q_ij'^2 / f_j')` with `f_j = sum_i q_ij`.
pub fn target_distribution(q: ArrayView2<f64>) -> Result<Array2<f64>> {
    let freq = q.sum_axis(Axis(0));
    if freq.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(Error::Numeric("a cluster has zero total soft assignment".into()));
    }
    // with one row f_j = q_j and the target reduces to q itself
    if q.nrows() == 1 {
        return Ok(q.to_owned());
    }
    let mut p = q.to_owned();
    for mut row in p.rows_mut() {
        row.zip_mut_with(&freq, |v, &f| *v = *v * *v / f);
        let s = row.sum();
        if !(s > 0.0) {
            return Err(Error::Numeric("target row has zero mass".into()));
        }
        row.mapv_inplace(|v| v / s);
    }
    Ok(p)
}

/// `KL(P || Q) = sum_ij p_ij ln(p_ij / q_ij)`, with `0 ln 0 = 0`.
pub fn kl_loss(p_target: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    if p_target.dim() != q.dim() {
        return Err(Error::Shape("target and assignment shapes differ".into()));
    }
    let mut total = 0.0;
    for (&p, &q) in p_target.iter().zip(q.iter()) {
        if p > 0.0 {
            if !(q > 0.0) {
                return Err(Error::Numeric("target mass on a zero-probability assignment".into()));
            }
            total += p * (p / q).ln();
        }
    }
    Ok(total)
}

/// Gradients of `KL(P || Q)` (P fixed) with respect to the embeddings and centroids.
pub fn kl_gradients(
    z: ArrayView2<f64>,
    centroids: ArrayView2<f64>,
    p_target: ArrayView2<f64>,
    q: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_dims(&z, &centroids)?;
    let (n, k) = (z.nrows(), centroids.nrows());
    if p_target.dim() != (n, k) || q.dim() != (n, k) {
        return Err(Error::Shape("assignment matrices do not match (N, k)".into()));
    }
    let kernel = kernel_matrix(z, centroids);
    let mut dz = Array2::zeros(z.raw_dim());
    let mut dmu = Array2::zeros(centroids.raw_dim());
    for i in 0..n {
        for j in 0..k {
            let coef = 2.0 * kernel[[i, j]] * (p_target[[i, j]] - q[[i, j]]);
            if coef == 0.0 {
                continue;
            }
            for d in 0..z.ncols() {
                let diff = z[[i, d]] - centroids[[j, d]];
                dz[[i, d]] += coef * diff;
                dmu[[j, d]] -= coef * diff;
            }
        }
    }
    Ok((dz, dmu))
}

/// Chains `dL/dq` through the normalized kernel into `dL/dz` and `dL/dmu`.
pub fn soft_assign_backward(
    z: ArrayView2<f64>,
    centroids: ArrayView2<f64>,
    dq: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_dims(&z, &centroids)?;
    let (n, k) = (z.nrows(), centroids.nrows());
    if dq.dim() != (n, k) {
        return Err(Error::Shape("dq does not match (N, k)".into()));
    }
    let kernel = kernel_matrix(z, centroids);
    let mut dz = Array2::zeros(z.raw_dim());
    let mut dmu = Array2::zeros(centroids.raw_dim());
    for i in 0..n {
        let row_sum: f64 = kernel.row(i).sum();
        // q_ij = K_ij / s_i  =>  dL/dK_il = (dq_il - sum_j dq_ij q_ij) / s_i
        let weighted: f64 = (0..k).map(|j| dq[[i, j]] * kernel[[i, j]] / row_sum).sum();
        for l in 0..k {
            let d_kernel = (dq[[i, l]] - weighted) / row_sum;
            // dK/dz_i = -2 K^2 (z_i - mu_l)
            let coef = -2.0 * kernel[[i, l]] * kernel[[i, l]] * d_kernel;
            if coef == 0.0 {
                continue;
            }
            for d in 0..z.ncols() {
                let diff = z[[i, d]] - centroids[[l, d]];
                dz[[i, d]] += coef * diff;
                dmu[[l, d]] -= coef * diff;
            }
        }
    }
    Ok((dz, dmu))
}

/// Normalized soft cluster sizes `S_j = (1/N) sum_i q_ij`.
pub fn soft_sizes(q: ArrayView2<f64>) -> Array1<f64> {
    let n = q.nrows().max(1) as f64;
    q.sum_axis(Axis(0)) / n
}

/// Hellinger-style balance loss `0.5 * || sqrt(S) - sqrt(U_k) ||_2`.
pub fn balance_loss(q: ArrayView2<f64>) -> f64 {
    balance_loss_from_sizes(soft_sizes(q).view())
}

pub fn balance_loss_from_sizes(sizes: ndarray::ArrayView1<f64>) -> f64 {
    let uniform = (1.0 / sizes.len() as f64).sqrt();
    let sq: f64 = sizes
        .iter()
        .map(|&s| {
            let d = s.max(0.0).sqrt() - uniform;
            d * d
        })
        .sum();
    0.5 * sq.sqrt()
}

/// Gradient of [`balance_loss_from_sizes`] with respect to the sizes.
///
/// Zero at exact balance, where the norm is not differentiable.
pub fn balance_gradient_wrt_sizes(sizes: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let uniform = (1.0 / sizes.len() as f64).sqrt();
    let roots = sizes.mapv(|s| s.max(SIZE_FLOOR).sqrt());
    let diff = roots.mapv(|r| r - uniform);
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Array1::zeros(sizes.len());
    }
    Array1::from_shape_fn(sizes.len(), |j| 0.5 * diff[j] / norm * 0.5 / roots[j])
}

/// Gradient of [`balance_loss`] with respect to every entry of `q`.
pub fn balance_gradient(q: ArrayView2<f64>) -> Array2<f64> {
    let n = q.nrows().max(1) as f64;
    let ds = balance_gradient_wrt_sizes(soft_sizes(q).view());
    let mut dq = Array2::zeros(q.raw_dim());
    for mut row in dq.rows_mut() {
        row.assign(&(&ds / n));
    }
    dq
}

/// Hard assignment: index of the largest entry per row, ties to the lowest index.
pub fn hard_assignments(q: ArrayView2<f64>) -> Vec<usize> {
    q.rows().into_iter().map(|row| argmax(row.iter().copied())).collect()
}

pub(crate) fn argmax<I: IntoIterator<Item = f64>>(values: I) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding.
fn kmeans_plus_plus<R: Rng>(z: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = z.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // all remaining points coincide with a chosen centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    let mut centroids = Array2::zeros((k, z.ncols()));
    for (j, &i) in chosen.iter().enumerate() {
        centroids.row_mut(j).assign(&z.row(i));
    }
    centroids
}

fn assign(z: ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(z.nrows());
    let mut dists = Vec::with_capacity(z.nrows());
    for row in z.rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(row, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        labels.push(best);
        dists.push(best_d);
    }
    (labels, dists)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// A cluster that empties during the update step is reseeded at the point
/// farthest from its own centroid.
pub fn kmeans(z: ArrayView2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let n = z.nrows();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = rng_from_seed(seed);
    let mut centroids = kmeans_plus_plus(z, k, &mut rng);
    let (mut labels, mut dists) = assign(z, &centroids);
    let mut inertia_history = vec![dists.iter().sum()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &z.row(i));
            counts[l] += 1;
        }
        let mut taken = Vec::new();
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = sums.row(j).mapv(|v| v / count as f64);
                centroids.row_mut(j).assign(&mean);
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                taken.push(far);
                centroids.row_mut(j).assign(&z.row(far));
            }
        }
        let (new_labels, new_dists) = assign(z, &centroids);
        inertia_history.push(new_dists.iter().sum());
        let unchanged = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if unchanged {
            converged = true;
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments: labels,
        inertia_history,
        iterations,
        converged,
    })
}
