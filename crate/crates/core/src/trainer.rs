//! Pretraining, the joint clustering/expert loop, and expert fine-tuning.
//!
//! The joint objective for a mini-batch of `m` points is
//!
//! ```text
//! L = L_r + beta * L_c + gamma * L_s + delta * L_bal
//! ```
//!
//! with every term averaged over the batch. Within one batch step the
//! experts first take `T - 1` expert-only updates on freshly sampled cohorts;
//! the `T`-th pass backpropagates the whole objective into the centroids
//! (KL term only), encoder, decoder and experts. The target distribution is
//! refreshed from the full training set once per epoch.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    balance_gradient, balance_loss, hard_assignments, kl_gradients, kl_loss, kmeans, soft_assign,
    soft_assign_backward, target_distribution,
};
use crate::data::{Dataset, Standardizer};
use crate::experts::{argmax_cohorts, cohort_pass, combine, sample_cohorts, CohortRealization, ExpertEnsemble, PredictMode};
use crate::metrics::{auc, f1, predicted_classes, MetricsReport};
use crate::nn::{Gradients, HiddenActivation, Mlp, OutputActivation};
use crate::rng::{
    derive_seed, rng_for, TAG_COHORT, TAG_FINETUNE, TAG_INIT, TAG_KMEANS, TAG_SHUFFLE_PRETRAIN, TAG_SHUFFLE_TRAIN,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of clusters and experts.
    pub k: usize,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub max_epochs: usize,
    /// Initial learning rate.
    pub base_rate: f64,
    /// Per-epoch decay of the learning rate.
    pub decay: f64,
    pub sub_iter_start: usize,
    /// Epochs between sub-iteration increments.
    pub sub_iter_growth_period: usize,
    pub sub_iter_max: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Sample cohorts from Q (true) or route to argmax Q (false).
    pub sampling_at_train: bool,
    /// Mix experts by Q at prediction (true) or use the argmax expert (false).
    pub weighting_at_predict: bool,
    /// Draw a fresh cohort in every sub-iteration instead of once per batch.
    pub resample_each_subiteration: bool,
    pub finetune_epochs: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub expert_hidden: Vec<usize>,
    pub kmeans_max_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2,
            beta: 0.5,
            gamma: 1.5,
            delta: 1.0,
            batch_size: 256,
            pretrain_epochs: 100,
            max_epochs: 100,
            base_rate: 1e-3,
            decay: 1e-2,
            sub_iter_start: 1,
            sub_iter_growth_period: 5,
            sub_iter_max: 10,
            patience: 5,
            seed: 0,
            sampling_at_train: true,
            weighting_at_predict: true,
            resample_each_subiteration: true,
            finetune_epochs: 10,
            encoder_hidden: vec![128, 64, 32],
            latent_dim: 20,
            expert_hidden: vec![64, 32, 16, 8],
            kmeans_max_iters: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return bad("base_rate must be positive");
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad("decay must be >= 0");
        }
        if self.sub_iter_start == 0 || self.sub_iter_max < self.sub_iter_start {
            return bad("need 1 <= sub_iter_start <= sub_iter_max");
        }
        if self.sub_iter_growth_period == 0 {
            return bad("sub_iter_growth_period must be at least 1");
        }
        if self.latent_dim == 0 || self.encoder_hidden.contains(&0) || self.expert_hidden.contains(&0) {
            return bad("layer sizes must be positive");
        }
        Ok(())
    }

    pub fn predict_mode(&self) -> PredictMode {
        if self.weighting_at_predict {
            PredictMode::Weighted
        } else {
            PredictMode::Hard
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            recon: 1.0,
            beta: self.beta,
            gamma: self.gamma,
            delta: self.delta,
        }
    }

    /// Sub-iterations per batch in `epoch` (0-based).
    pub fn sub_iterations(&self, epoch: usize) -> usize {
        (self.sub_iter_start + epoch / self.sub_iter_growth_period).min(self.sub_iter_max)
    }
}

/// Diminishing learning rate `tau_0 / (1 + decay * epoch)`.
pub fn learning_rate(epoch: usize, config: &TrainConfig) -> f64 {
    config.base_rate / (1.0 + config.decay * epoch as f64)
}

/// Coefficients of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

/// Batch-averaged loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub recon: f64,
    pub cluster: f64,
    pub supervised: f64,
    pub balance: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.recon * self.recon + w.beta * self.cluster + w.gamma * self.supervised + w.delta * self.balance
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.cluster, self.supervised, self.balance].iter().all(|v| v.is_finite())
    }
}

/// Gradients of the joint objective for one batch.
#[derive(Debug, Clone)]
pub struct ObjectiveGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
    /// `None` for experts whose cohort was empty.
    pub experts: Vec<Option<Gradients>>,
    /// `beta * dL_c / d mu`; the centroids follow the clustering loss only.
    pub centroids: Array2<f64>,
}

/// Loss terms and gradients of the joint objective on one batch.
///
/// `p_target` holds the batch rows of the (fixed) target distribution and
/// `cohort` the routing used for the supervised term.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective(
    encoder: &Mlp,
    decoder: &Mlp,
    experts: &ExpertEnsemble,
    centroids: ArrayView2<f64>,
    x: ArrayView2<f64>,
    labels: &[usize],
    p_target: ArrayView2<f64>,
    cohort: &CohortRealization,
    weights: LossWeights,
) -> Result<(LossComponents, ObjectiveGradients)> {
    let m = x.nrows();
    if m == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv_m = 1.0 / m as f64;
    let (z, enc_tape) = encoder.forward(x)?;

    let (recon_out, dec_tape) = decoder.forward(z.view())?;
    let diff = &recon_out - &x;
    let recon = diff.iter().map(|v| v * v).sum::<f64>() * inv_m;
    let d_recon = diff.mapv(|v| 2.0 * v * inv_m * weights.recon);
    let (dz_recon, dec_grads) = decoder.backward(&dec_tape, d_recon.view())?;

    let q = soft_assign(z.view(), centroids)?;
    let cluster = kl_loss(p_target, q.view())? * inv_m;
    let (mut dz_cluster, mut dmu) = kl_gradients(z.view(), centroids, p_target, q.view())?;
    dz_cluster.mapv_inplace(|v| v * inv_m * weights.beta);
    dmu.mapv_inplace(|v| v * inv_m * weights.beta);

    let balance = balance_loss(q.view());
    let pass = cohort_pass(experts, z.view(), labels, q.view(), cohort, m)?;

    // both L_s (through its q-weights) and L_bal reach z through q
    let mut dq = balance_gradient(q.view());
    dq.mapv_inplace(|v| v * weights.delta);
    dq.scaled_add(weights.gamma, &pass.dq);
    let (dz_q, _) = soft_assign_backward(z.view(), centroids, dq.view())?;

    let mut dz = dz_recon;
    dz += &dz_cluster;
    dz.scaled_add(weights.gamma, &pass.dz);
    dz += &dz_q;
    let (_, enc_grads) = encoder.backward(&enc_tape, dz.view())?;

    let expert_grads = pass
        .expert_grads
        .into_iter()
        .map(|g| {
            g.map(|mut g| {
                g.scale(weights.gamma);
                g
            })
        })
        .collect();
    let components = LossComponents {
        recon,
        cluster,
        supervised: pass.loss,
        balance,
    };
    Ok((
        components,
        ObjectiveGradients {
            encoder: enc_grads,
            decoder: dec_grads,
            experts: expert_grads,
            centroids: dmu,
        },
    ))
}

/// Mean per-sample reconstruction error `||x - g(f(x))||^2` and its gradients.
pub fn reconstruction_gradients(
    encoder: &Mlp,
    decoder: &Mlp,
    x: ArrayView2<f64>,
) -> Result<(f64, Gradients, Gradients)> {
    let inv_m = 1.0 / x.nrows().max(1) as f64;
    let (z, enc_tape) = encoder.forward(x)?;
    let (out, dec_tape) = decoder.forward(z.view())?;
    let diff = &out - &x;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() * inv_m;
    let d_out = diff.mapv(|v| 2.0 * v * inv_m);
    let (dz, dec_grads) = decoder.backward(&dec_tape, d_out.view())?;
    let (_, enc_grads) = encoder.backward(&enc_tape, dz.view())?;
    Ok((loss, enc_grads, dec_grads))
}

/// Mean squared reconstruction error per entry.
pub fn reconstruction_mse(encoder: &Mlp, decoder: &Mlp, x: ArrayView2<f64>) -> Result<f64> {
    let out = decoder.predict(encoder.predict(x)?.view())?;
    Ok((&out - &x).iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64)
}

fn batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::rng::rng_from_seed(seed));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_loss(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} became non-finite")))
    }
}

/// One pass of reconstruction-only SGD; returns the epoch's mean per-sample loss.
pub fn pretrain_epoch(
    encoder: &mut Mlp,
    decoder: &mut Mlp,
    x: ArrayView2<f64>,
    batch_size: usize,
    rate: f64,
    shuffle_seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches(x.nrows(), batch_size, shuffle_seed) {
        let xb = x.select(Axis(0), &batch);
        let (loss, ge, gd) = reconstruction_gradients(encoder, decoder, xb.view())?;
        check_loss(loss, "reconstruction loss")?;
        total += loss * batch.len() as f64;
        encoder.sgd_step(&ge, rate)?;
        decoder.sgd_step(&gd, rate)?;
    }
    Ok(total / x.nrows() as f64)
}

/// Builds encoder and decoder for `input_dim` with the configured sizes.
pub fn build_autoencoder(input_dim: usize, config: &TrainConfig) -> Result<(Mlp, Mlp)> {
    let mut rng = rng_for(config.seed, TAG_INIT, 0, 0, 0);
    let mut enc_dims = vec![input_dim];
    enc_dims.extend(&config.encoder_hidden);
    enc_dims.push(config.latent_dim);
    let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
    let encoder = Mlp::new(&enc_dims, HiddenActivation::Relu, OutputActivation::Identity, &mut rng)?;
    let decoder = Mlp::new(&dec_dims, HiddenActivation::Relu, OutputActivation::Identity, &mut rng)?;
    Ok((encoder, decoder))
}

pub fn build_experts(class_count: usize, config: &TrainConfig) -> Result<ExpertEnsemble> {
    let mut rng = rng_for(config.seed, TAG_INIT, 1, 0, 0);
    ExpertEnsemble::new(config.k, config.latent_dim, &config.expert_hidden, class_count, &mut rng)
}

/// Result of reconstruction pretraining.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// Mean per-sample reconstruction loss of each epoch.
    pub losses: Vec<f64>,
}

/// Trains encoder and decoder on the reconstruction loss alone.
pub fn pretrain(dataset: &Dataset, config: &TrainConfig) -> Result<Pretrained> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot pretrain on an empty dataset".into()));
    }
    let (mut encoder, mut decoder) = build_autoencoder(dataset.dim(), config)?;
    let mut losses = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        let seed = derive_seed(config.seed, TAG_SHUFFLE_PRETRAIN, epoch as u64, 0, 0);
        let loss = pretrain_epoch(
            &mut encoder,
            &mut decoder,
            dataset.features.view(),
            config.batch_size,
            learning_rate(epoch, config),
            seed,
        )?;
        losses.push(loss);
    }
    Ok(Pretrained {
        encoder,
        decoder,
        losses,
    })
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossComponents,
    pub total: f64,
    pub val_auc: f64,
    pub val_f1: f64,
    pub sub_iters: usize,
    pub rate: f64,
}

pub const HISTORY_HEADER: &str = "epoch,L_r,L_c,L_s,L_bal,total,val_auc,val_f1,sub_iters,rate";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{:?}",
            self.epoch,
            self.losses.recon,
            self.losses.cluster,
            self.losses.supervised,
            self.losses.balance,
            self.total,
            self.val_auc,
            self.val_f1,
            self.sub_iters,
            self.rate
        )
    }
}

/// Renders a training history as CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Everything needed to embed, cluster and classify new points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub experts: ExpertEnsemble,
    pub centroids: Array2<f64>,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best validation AUC).
    pub best_epoch: Option<usize>,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
    /// Input standardization fitted on the training split, when used.
    pub standardizer: Option<Standardizer>,
}

impl TrainedModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.experts.class_count()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "model expects {} features, data has {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn embed(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        self.encoder.predict(x)
    }

    pub fn soft_assignments(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        soft_assign(self.embed(x)?.view(), self.centroids.view())
    }

    /// Class probabilities for each row of `x` (already standardized).
    pub fn predict_proba(&self, x: ArrayView2<f64>, mode: PredictMode) -> Result<Array2<f64>> {
        let z = self.embed(x)?;
        let q = soft_assign(z.view(), self.centroids.view())?;
        let probs = self.experts.predict_all(z.view())?;
        Ok(combine(q.view(), &probs, mode))
    }

    /// AUC, F1, silhouette and HTFD on `dataset` (already standardized).
    pub fn evaluate(&self, dataset: &Dataset, mode: PredictMode) -> Result<MetricsReport> {
        if dataset.class_count() > self.class_count() {
            return Err(Error::Shape("dataset has more classes than the model".into()));
        }
        let z = self.embed(dataset.features.view())?;
        let q = soft_assign(z.view(), self.centroids.view())?;
        let probs = combine(q.view(), &self.experts.predict_all(z.view())?, mode);
        let assignments = hard_assignments(q.view());
        MetricsReport::compute(
            &dataset.labels,
            probs.view(),
            dataset.features.view(),
            z.view(),
            &assignments,
            self.k(),
        )
    }

    /// Maps raw inputs through the stored standardizer, if any.
    pub fn prepare(&self, dataset: &Dataset) -> Result<Dataset> {
        match &self.standardizer {
            Some(s) => s.apply(dataset),
            None => Ok(dataset.clone()),
        }
    }
}

fn validation_scores(model: &TrainedModel, val: &Dataset) -> Result<(f64, f64)> {
    let probs = model.predict_proba(val.features.view(), model.config.predict_mode())?;
    let a = auc(&val.labels, probs.view())?;
    let f = f1(&val.labels, &predicted_classes(probs.view()), model.class_count())?;
    Ok((a, f))
}

fn draw_cohort(config: &TrainConfig, q: ArrayView2<f64>, epoch: usize, batch: usize, sub: usize) -> CohortRealization {
    if !config.sampling_at_train {
        return argmax_cohorts(q);
    }
    let sub = if config.resample_each_subiteration { sub } else { 0 };
    sample_cohorts(q, derive_seed(config.seed, TAG_COHORT, epoch as u64, batch as u64, sub as u64))
}

fn update_experts(experts: &mut ExpertEnsemble, grads: &[Option<Gradients>], rate: f64) -> Result<()> {
    for (e, g) in experts.experts_mut().iter_mut().zip(grads) {
        if let Some(g) = g {
            e.sgd_step(g, rate)?;
        }
    }
    Ok(())
}

/// Observer of the joint loop, used by tests to inspect intermediate state.
pub trait TrainObserver {
    /// Called before every batch step with the current target distribution.
    fn before_batch(&mut self, _epoch: usize, _batch: usize, _p_target: &Array2<f64>) {}
    /// Called after every cohort draw with the batch assignments and their cohort.
    fn cohort(&mut self, _epoch: usize, _batch: usize, _sub: usize, _q: &Array2<f64>, _cohort: &CohortRealization) {}
}

struct NoObserver;
impl TrainObserver for NoObserver {}

/// Full training: pretraining, k-means initialization, the joint loop with
/// early stopping on validation AUC, and expert fine-tuning.
pub fn train(train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    train_observed(train_set, val_set, config, &mut NoObserver)
}

pub fn train_observed(
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedModel> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if config.k > train_set.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds the {} training points",
            config.k,
            train_set.len()
        )));
    }
    if val_set.dim() != train_set.dim() || val_set.label_names != train_set.label_names {
        return Err(Error::Data("training and validation sets differ in features or classes".into()));
    }
    if train_set.class_count() < 2 {
        return Err(Error::Data("training needs at least two classes".into()));
    }
    let pre = pretrain(train_set, config)?;
    let model = init_model(train_set, config, pre.encoder, pre.decoder)?;
    let model = joint_training(model, train_set, val_set, observer)?;
    finetune_experts(model, train_set, config.finetune_epochs)
}

/// Builds an untrained-experts model on top of a pretrained autoencoder,
/// with centroids from k-means on the training embeddings.
pub fn init_model(train_set: &Dataset, config: &TrainConfig, encoder: Mlp, decoder: Mlp) -> Result<TrainedModel> {
    // centroids come from unconditional k-means; labels play no part here
    let z = encoder.predict(train_set.features.view())?;
    let km = kmeans(
        z.view(),
        config.k,
        derive_seed(config.seed, TAG_KMEANS, 0, 0, 0),
        config.kmeans_max_iters,
    )?;
    Ok(TrainedModel {
        encoder,
        decoder,
        experts: build_experts(train_set.class_count(), config)?,
        centroids: km.centroids,
        config: config.clone(),
        history: Vec::new(),
        best_epoch: None,
        feature_names: train_set.feature_names.clone(),
        label_names: train_set.label_names.clone(),
        standardizer: None,
    })
}

/// The joint loop. Returns the snapshot with the best validation AUC.
pub fn joint_training(
    mut model: TrainedModel,
    train_set: &Dataset,
    val_set: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedModel> {
    let config = model.config.clone();
    let weights = config.loss_weights();
    let x_all = train_set.features.view();
    let n = train_set.len();

    let z = model.encoder.predict(x_all)?;
    let mut p_full = target_distribution(soft_assign(z.view(), model.centroids.view())?.view())?;

    let mut history = Vec::new();
    let mut best: Option<(f64, TrainedModel)> = None;
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let rate = learning_rate(epoch, &config);
        let subs = config.sub_iterations(epoch);
        let mut sums = LossComponents::default();
        let order = batches(
            n,
            config.batch_size,
            derive_seed(config.seed, TAG_SHUFFLE_TRAIN, epoch as u64, 0, 0),
        );
        for (b, idx) in order.iter().enumerate() {
            observer.before_batch(epoch, b, &p_full);
            let xb = x_all.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let pb = p_full.select(Axis(0), idx);

            let zb = model.encoder.predict(xb.view())?;
            let qb = soft_assign(zb.view(), model.centroids.view())?;
            for sub in 0..subs - 1 {
                let cohort = draw_cohort(&config, qb.view(), epoch, b, sub);
                observer.cohort(epoch, b, sub, &qb, &cohort);
                let pass = cohort_pass(&model.experts, zb.view(), &yb, qb.view(), &cohort, idx.len())?;
                check_loss(pass.loss, "supervised loss")?;
                update_experts(&mut model.experts, &pass.expert_grads, rate)?;
            }

            let cohort = draw_cohort(&config, qb.view(), epoch, b, subs - 1);
            observer.cohort(epoch, b, subs - 1, &qb, &cohort);
            let (comp, grads) = joint_objective(
                &model.encoder,
                &model.decoder,
                &model.experts,
                model.centroids.view(),
                xb.view(),
                &yb,
                pb.view(),
                &cohort,
                weights,
            )?;
            if !comp.is_finite() {
                return Err(Error::Numeric(format!("loss became non-finite at epoch {epoch}")));
            }
            let m = idx.len() as f64;
            sums.recon += comp.recon * m;
            sums.cluster += comp.cluster * m;
            sums.supervised += comp.supervised * m;
            sums.balance += comp.balance * m;

            model.centroids.scaled_add(-rate, &grads.centroids);
            model.encoder.sgd_step(&grads.encoder, rate)?;
            model.decoder.sgd_step(&grads.decoder, rate)?;
            update_experts(&mut model.experts, &grads.experts, rate)?;
        }

        let z = model.encoder.predict(x_all)?;
        p_full = target_distribution(soft_assign(z.view(), model.centroids.view())?.view())?;

        let losses = LossComponents {
            recon: sums.recon / n as f64,
            cluster: sums.cluster / n as f64,
            supervised: sums.supervised / n as f64,
            balance: sums.balance / n as f64,
        };
        let (val_auc, val_f1) = validation_scores(&model, val_set)?;
        let record = EpochRecord {
            epoch,
            losses,
            total: losses.total(&weights),
            val_auc,
            val_f1,
            sub_iters: subs,
            rate,
        };
        log::debug!("{}", record.csv_row());
        history.push(record);

        if best.as_ref().is_none_or(|(a, _)| val_auc > *a) {
            let mut snapshot = model.clone();
            snapshot.best_epoch = Some(epoch);
            best = Some((val_auc, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let mut out = match best {
        Some((_, m)) => m,
        None => model,
    };
    out.history = history;
    Ok(out)
}

/// How fine-tuning draws cohorts across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortSchedule {
    /// New cohorts every epoch and batch.
    PerEpoch,
    /// The same cohort realization every epoch.
    Fixed,
}

/// Trains only the experts on the frozen embeddings, routing by cohort sampling.
pub fn finetune_experts(model: TrainedModel, train_set: &Dataset, epochs: usize) -> Result<TrainedModel> {
    finetune_experts_with(model, train_set, epochs, CohortSchedule::PerEpoch).map(|(m, _)| m)
}

/// Like [`finetune_experts`], also returning the mean supervised loss of each epoch
/// (measured before that epoch's updates are applied to each batch).
pub fn finetune_experts_with(
    mut model: TrainedModel,
    train_set: &Dataset,
    epochs: usize,
    schedule: CohortSchedule,
) -> Result<(TrainedModel, Vec<f64>)> {
    let config = model.config.clone();
    let z = model.embed(train_set.features.view())?;
    let q = soft_assign(z.view(), model.centroids.view())?;
    let n = train_set.len();
    let offset = model.history.len();
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let rate = learning_rate(offset + e, &config);
        let shuffle_epoch = match schedule {
            CohortSchedule::PerEpoch => e as u64,
            CohortSchedule::Fixed => 0,
        };
        let order = batches(n, config.batch_size, derive_seed(config.seed, TAG_FINETUNE, shuffle_epoch, 0, 0));
        let mut total = 0.0;
        for (b, idx) in order.iter().enumerate() {
            let zb = z.select(Axis(0), idx);
            let qb = q.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let cohort = if config.sampling_at_train {
                sample_cohorts(
                    qb.view(),
                    derive_seed(config.seed, TAG_FINETUNE, shuffle_epoch, b as u64 + 1, 0),
                )
            } else {
                argmax_cohorts(qb.view())
            };
            let pass = cohort_pass(&model.experts, zb.view(), &yb, qb.view(), &cohort, idx.len())?;
            check_loss(pass.loss, "supervised loss")?;
            total += pass.loss * idx.len() as f64;
            update_experts(&mut model.experts, &pass.expert_grads, rate)?;
        }
        losses.push(total / n as f64);
    }
    Ok((model, losses))
}
