//! Shared fixtures for the integration tests: finite-difference oracles and
//! random small instances of the joint objective.
#![allow(dead_code)]

use expertnet::clustering::{soft_assign, target_distribution};
use expertnet::experts::{sample_cohorts, CohortRealization, ExpertEnsemble};
use expertnet::nn::{Gradients, HiddenActivation, Mlp, OutputActivation};
use expertnet::trainer::{joint_objective, LossComponents, LossWeights};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Entries smaller than this in both analytic and numeric form are compared absolutely.
pub const TINY: f64 = 1e-8;
/// Pre-activations closer than this to a ReLU kink make an instance unusable.
pub const KINK_MARGIN: f64 = 1e-3;

/// Relative error with absolute comparison for tiny entries.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < TINY {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest entry-wise error between two gradient collections.
pub fn max_error<'a>(analytic: impl IntoIterator<Item = &'a f64>, numeric: impl IntoIterator<Item = &'a f64>) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(&a, &n)| grad_error(a, n))
        .fold(0.0, f64::max)
}

pub fn gradients_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let w = analytic
        .weights
        .iter()
        .zip(&numeric.weights)
        .map(|(a, n)| max_error(a.iter(), n.iter()));
    let b = analytic
        .biases
        .iter()
        .zip(&numeric.biases)
        .map(|(a, n)| max_error(a.iter(), n.iter()));
    w.chain(b).fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every entry of `m`.
pub fn fd_matrix(m: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    let mut probe = m.clone();
    for idx in ndarray::indices(m.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + FD_STEP;
        let up = f(&probe);
        probe[idx] = orig - FD_STEP;
        let down = f(&probe);
        probe[idx] = orig;
        out[idx] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

/// Central differences of `f` with respect to every parameter of `net`.
pub fn fd_network(net: &Mlp, f: impl Fn(&Mlp) -> f64) -> Gradients {
    let mut grads = Gradients::zeros_like(net);
    let mut probe = net.clone();
    for l in 0..net.depth() {
        for idx in ndarray::indices(net.weights()[l].raw_dim()) {
            let orig = probe.weights()[l][idx];
            probe.weights_mut()[l][idx] = orig + FD_STEP;
            let up = f(&probe);
            probe.weights_mut()[l][idx] = orig - FD_STEP;
            let down = f(&probe);
            probe.weights_mut()[l][idx] = orig;
            grads.weights[l][idx] = (up - down) / (2.0 * FD_STEP);
        }
        for i in 0..net.biases()[l].len() {
            let orig = probe.biases()[l][i];
            probe.biases_mut()[l][i] = orig + FD_STEP;
            let up = f(&probe);
            probe.biases_mut()[l][i] = orig - FD_STEP;
            let down = f(&probe);
            probe.biases_mut()[l][i] = orig;
            grads.biases[l][i] = (up - down) / (2.0 * FD_STEP);
        }
    }
    grads
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Glorot network with small random biases.
pub fn random_net(rng: &mut ChaCha8Rng, dims: &[usize], output: OutputActivation) -> Mlp {
    let mut net = Mlp::new(dims, HiddenActivation::Relu, output, rng).unwrap();
    for b in net.biases_mut() {
        for v in b.iter_mut() {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    net
}

/// True when every hidden pre-activation is at least `KINK_MARGIN` away from 0.
pub fn clear_of_kinks(net: &Mlp, x: ArrayView2<f64>) -> bool {
    let (_, tape) = net.forward(x).unwrap();
    let pre = tape.pre_activations();
    pre[..pre.len() - 1].iter().all(|a| a.iter().all(|v| v.abs() > KINK_MARGIN))
}

/// A small random instance of the joint objective. `p_target` and `cohort` are
/// fixed at the base point, as they are within one training step.
#[derive(Debug, Clone)]
pub struct Instance {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub experts: ExpertEnsemble,
    pub centroids: Array2<f64>,
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub p_target: Array2<f64>,
    pub cohort: CohortRealization,
}

fn hidden_dims(rng: &mut ChaCha8Rng, max_layers: usize) -> Vec<usize> {
    let layers = rng.random_range(0..max_layers);
    (0..layers).map(|_| rng.random_range(2..=8)).collect()
}

/// Networks of at most three layers with widths at most 8.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let d = rng.random_range(2..=8);
        let latent = rng.random_range(2..=6);
        let k = rng.random_range(1..=3);
        let classes = rng.random_range(2..=4);
        let m = rng.random_range(3..=8);

        let mut enc_dims = vec![d];
        enc_dims.extend(hidden_dims(rng, 3));
        enc_dims.push(latent);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let encoder = random_net(rng, &enc_dims, OutputActivation::Identity);
        let decoder = random_net(rng, &dec_dims, OutputActivation::Identity);
        let experts: Vec<Mlp> = (0..k)
            .map(|_| {
                let mut dims = vec![latent];
                dims.extend(hidden_dims(rng, 3));
                dims.push(classes);
                random_net(rng, &dims, OutputActivation::Softmax)
            })
            .collect();
        let experts = ExpertEnsemble::from_experts(experts).unwrap();
        let x = normal_matrix(rng, m, d, 1.0);
        let z = encoder.predict(x.view()).unwrap();
        let centroids = normal_matrix(rng, k, latent, 1.0);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        let q = soft_assign(z.view(), centroids.view()).unwrap();
        let p_target = target_distribution(q.view()).unwrap();
        let cohort = sample_cohorts(q.view(), rng.random());

        let usable = clear_of_kinks(&encoder, x.view())
            && clear_of_kinks(&decoder, z.view())
            && experts.experts().iter().all(|e| clear_of_kinks(e, z.view()));
        if usable {
            return Instance {
                encoder,
                decoder,
                experts,
                centroids,
                x,
                labels,
                p_target,
                cohort,
            };
        }
    }
}

impl Instance {
    pub fn components(&self, encoder: &Mlp, decoder: &Mlp, experts: &ExpertEnsemble, centroids: &Array2<f64>) -> LossComponents {
        joint_objective(
            encoder,
            decoder,
            experts,
            centroids.view(),
            self.x.view(),
            &self.labels,
            self.p_target.view(),
            &self.cohort,
            WEIGHTS_ALL,
        )
        .unwrap()
        .0
    }
}

pub const WEIGHTS_ALL: LossWeights = LossWeights {
    recon: 1.0,
    beta: 1.0,
    gamma: 1.0,
    delta: 1.0,
};

/// Weights that switch on a single loss term.
pub fn single_term(name: &str) -> LossWeights {
    let mut w = LossWeights {
        recon: 0.0,
        beta: 0.0,
        gamma: 0.0,
        delta: 0.0,
    };
    match name {
        "L_r" => w.recon = 1.0,
        "L_c" => w.beta = 1.0,
        "L_s" => w.gamma = 1.0,
        "L_bal" => w.delta = 1.0,
        _ => panic!("unknown term {name}"),
    }
    w
}

/// Worst finite-difference error of the joint objective's analytic gradients
/// for one loss term on one instance. Centroids are checked only for `L_c`,
/// the one term that updates them.
pub fn term_gradient_error(inst: &Instance, term: &str) -> f64 {
    let weights = single_term(term);
    let (_, grads) = joint_objective(
        &inst.encoder,
        &inst.decoder,
        &inst.experts,
        inst.centroids.view(),
        inst.x.view(),
        &inst.labels,
        inst.p_target.view(),
        &inst.cohort,
        weights,
    )
    .unwrap();
    let value = |c: LossComponents| c.total(&weights);

    let mut worst = 0.0_f64;
    let num_enc = fd_network(&inst.encoder, |e| {
        value(inst.components(e, &inst.decoder, &inst.experts, &inst.centroids))
    });
    worst = worst.max(gradients_error(&grads.encoder, &num_enc));
    let num_dec = fd_network(&inst.decoder, |d| {
        value(inst.components(&inst.encoder, d, &inst.experts, &inst.centroids))
    });
    worst = worst.max(gradients_error(&grads.decoder, &num_dec));
    for j in 0..inst.experts.k() {
        let num = fd_network(&inst.experts.experts()[j], |e| {
            let mut ens = inst.experts.clone();
            ens.experts_mut()[j] = e.clone();
            value(inst.components(&inst.encoder, &inst.decoder, &ens, &inst.centroids))
        });
        let analytic = grads.experts[j]
            .clone()
            .unwrap_or_else(|| Gradients::zeros_like(&inst.experts.experts()[j]));
        worst = worst.max(gradients_error(&analytic, &num));
    }
    if term == "L_c" {
        let num = fd_matrix(&inst.centroids, |mu| {
            value(inst.components(&inst.encoder, &inst.decoder, &inst.experts, mu))
        });
        worst = worst.max(max_error(grads.centroids.iter(), num.iter()));
    }
    worst
}
