//! Analytic gradients against central finite differences.

mod common;

use common::*;
use expertnet::clustering::{
    balance_gradient, balance_loss, kl_gradients, kl_loss, soft_assign, soft_assign_backward, target_distribution,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 100;

fn check_term(term: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..INSTANCES {
        let inst = random_instance(&mut rng);
        worst = worst.max(term_gradient_error(&inst, term));
    }
    assert!(worst <= REL_TOL, "{term}: worst relative error {worst:e}");
}

#[test]
fn reconstruction_term_matches_finite_differences() {
    check_term("L_r", 11);
}

#[test]
fn clustering_term_matches_finite_differences() {
    check_term("L_c", 12);
}

#[test]
fn supervised_term_matches_finite_differences() {
    check_term("L_s", 13);
}

#[test]
fn balance_term_matches_finite_differences() {
    check_term("L_bal", 14);
}

#[test]
fn full_objective_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let inst = random_instance(&mut rng);
        let (_, grads) = expertnet::trainer::joint_objective(
            &inst.encoder,
            &inst.decoder,
            &inst.experts,
            inst.centroids.view(),
            inst.x.view(),
            &inst.labels,
            inst.p_target.view(),
            &inst.cohort,
            WEIGHTS_ALL,
        )
        .unwrap();
        let num = fd_network(&inst.encoder, |e| {
            inst.components(e, &inst.decoder, &inst.experts, &inst.centroids).total(&WEIGHTS_ALL)
        });
        let err = gradients_error(&grads.encoder, &num);
        assert!(err <= REL_TOL, "encoder error {err:e}");
    }
}

fn random_points(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    use rand::Rng;
    let n = rng.random_range(1..=6);
    let k = rng.random_range(1..=4);
    let d = rng.random_range(1..=4);
    (normal_matrix(rng, n, d, 1.0), normal_matrix(rng, k, d, 1.0))
}

#[test]
fn kl_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..INSTANCES {
        let (z, mu) = random_points(&mut rng);
        let q = soft_assign(z.view(), mu.view()).unwrap();
        let p = target_distribution(q.view()).unwrap();
        let loss = |z: &Array2<f64>, mu: &Array2<f64>| {
            kl_loss(p.view(), soft_assign(z.view(), mu.view()).unwrap().view()).unwrap()
        };
        let (dz, dmu) = kl_gradients(z.view(), mu.view(), p.view(), q.view()).unwrap();
        let num_z = fd_matrix(&z, |z| loss(z, &mu));
        let num_mu = fd_matrix(&mu, |mu| loss(&z, mu));
        assert!(max_error(dz.iter(), num_z.iter()) <= REL_TOL);
        assert!(max_error(dmu.iter(), num_mu.iter()) <= REL_TOL);
    }
}

#[test]
fn balance_gradient_chains_through_soft_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..INSTANCES {
        let (z, mu) = random_points(&mut rng);
        let q = soft_assign(z.view(), mu.view()).unwrap();
        let dq = balance_gradient(q.view());
        let (dz, dmu) = soft_assign_backward(z.view(), mu.view(), dq.view()).unwrap();
        let loss = |z: &Array2<f64>, mu: &Array2<f64>| balance_loss(soft_assign(z.view(), mu.view()).unwrap().view());
        let num_z = fd_matrix(&z, |z| loss(z, &mu));
        let num_mu = fd_matrix(&mu, |mu| loss(&z, mu));
        assert!(max_error(dz.iter(), num_z.iter()) <= REL_TOL);
        assert!(max_error(dmu.iter(), num_mu.iter()) <= REL_TOL);
    }
}

#[test]
fn balance_gradient_wrt_q_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..INSTANCES {
        let (z, mu) = random_points(&mut rng);
        // at k = 1 the sizes sit exactly on uniform, the norm's kink
        if mu.nrows() < 2 {
            continue;
        }
        let q = soft_assign(z.view(), mu.view()).unwrap();
        let analytic = balance_gradient(q.view());
        let num = fd_matrix(&q, |q| balance_loss(q.view()));
        assert!(max_error(analytic.iter(), num.iter()) <= REL_TOL, "{q:?}\n{analytic:?}\n{num:?}");
    }
}
