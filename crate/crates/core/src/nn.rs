//! Dense feed-forward networks with explicit forward and backward passes.
//!
//! A network is a stack of affine layers `z = a W^T + b` working on row-major
//! batches (`N x d`). Hidden layers apply ReLU; the last layer applies the
//! configured output activation. Weights of layer `l` have shape
//! `(layer_dims[l + 1], layer_dims[l])`.
//!
//! `forward` returns a [`Tape`] holding the per-layer pre-activations and
//! activations, which `backward` consumes to produce parameter gradients and
//! the gradient with respect to the network input. The input gradient lets
//! callers chain networks (expert or decoder gradients back into an encoder).

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    /// Row-wise softmax over the output units.
    Softmax,
}

impl HiddenActivation {
    pub fn name(self) -> &'static str {
        match self {
            HiddenActivation::Relu => "relu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(HiddenActivation::Relu),
            _ => None,
        }
    }
}

impl OutputActivation {
    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Identity => "identity",
            OutputActivation::Softmax => "softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(OutputActivation::Identity),
            "softmax" => Some(OutputActivation::Softmax),
            _ => None,
        }
    }
}

/// A dense feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden: HiddenActivation,
    output: OutputActivation,
}

/// Activation record of one forward call.
#[derive(Debug, Clone)]
pub struct Tape {
    layer_dims: Vec<usize>,
    /// `activations[l]` is the input to layer `l`; the last entry is the network output.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape always holds the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.activations[0]
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

/// Parameter gradients, shape-congruent with the network that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::Shape("gradient sets have different depths".into()));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            if a.dim() != b.dim() {
                return Err(Error::Shape("gradient weight shapes differ".into()));
            }
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            if a.dim() != b.dim() {
                return Err(Error::Shape("gradient bias shapes differ".into()));
            }
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Per-layer Frobenius norms of the weight matrices and their product.
#[derive(Debug, Clone, PartialEq)]
pub struct FrobeniusReport {
    pub norms: Vec<f64>,
    pub product: f64,
}

impl Mlp {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, hidden, output)?;
        for w in &mut net.weights {
            let (fan_out, fan_in) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in w.iter_mut() {
                *v = dist.sample(rng);
            }
        }
        Ok(net)
    }

    /// Builds a network with all parameters set to zero.
    pub fn zeros(layer_dims: &[usize], hidden: HiddenActivation, output: OutputActivation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "a network needs at least an input and an output dimension".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer dimensions must be positive".into()));
        }
        let weights = layer_dims
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| Array1::zeros(d)).collect();
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden,
            output,
        })
    }

    /// Assembles a network from explicit parameters, validating shapes and finiteness.
    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        hidden: HiddenActivation,
        output: OutputActivation,
    ) -> Result<Self> {
        let template = Self::zeros(&layer_dims, hidden, output)?;
        if weights.len() != template.weights.len() || biases.len() != template.biases.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {} weights and {} biases",
                template.weights.len(),
                weights.len(),
                biases.len()
            )));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.dim() != template.weights[l].dim() || b.len() != template.biases[l].len() {
                return Err(Error::Shape(format!("layer {l} parameter shape mismatch")));
            }
            if !w.iter().chain(b.iter()).all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(Mlp {
            layer_dims,
            weights,
            biases,
            hidden,
            output,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Runs the network and records the activations needed by [`Mlp::backward`].
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&batch)?;
        let last = self.depth() - 1;
        let mut activations = Vec::with_capacity(self.depth() + 1);
        let mut pre_activations = Vec::with_capacity(self.depth());
        activations.push(batch.to_owned());
        for l in 0..self.depth() {
            let z = activations[l].dot(&self.weights[l].t()) + &self.biases[l];
            let a = if l == last {
                apply_output(self.output, &z)
            } else {
                apply_hidden(self.hidden, &z)
            };
            pre_activations.push(z);
            activations.push(a);
        }
        let output = activations.last().unwrap().clone();
        Ok((
            output,
            Tape {
                layer_dims: self.layer_dims.clone(),
                activations,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let last = self.depth() - 1;
        let mut a = batch.to_owned();
        for l in 0..self.depth() {
            let z = a.dot(&self.weights[l].t()) + &self.biases[l];
            a = if l == last {
                apply_output(self.output, &z)
            } else {
                apply_hidden(self.hidden, &z)
            };
        }
        Ok(a)
    }

    /// Backpropagates `output_grad` (dL/d output) through the recorded forward pass.
    ///
    /// Returns dL/d input and the parameter gradients. Gradients are sums over
    /// the batch rows; any averaging is the caller's responsibility.
    pub fn backward(&self, tape: &Tape, output_grad: ArrayView2<f64>) -> Result<(Array2<f64>, Gradients)> {
        if tape.layer_dims != self.layer_dims || tape.pre_activations.len() != self.depth() {
            return Err(Error::Shape("tape was recorded by a different network".into()));
        }
        let n = tape.batch_size();
        if output_grad.dim() != (n, self.output_dim()) {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, expected ({n}, {})",
                output_grad.dim(),
                self.output_dim()
            )));
        }
        let last = self.depth() - 1;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = output_backward(self.output, tape.output(), output_grad);
        for l in (0..self.depth()).rev() {
            if l != last {
                hidden_backward(self.hidden, &tape.pre_activations[l], &mut delta);
            }
            grads.weights[l] = delta.t().dot(&tape.activations[l]);
            grads.biases[l] = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.weights[l]);
        }
        Ok((delta, grads))
    }

    /// Applies `p <- p - rate * g` to every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, rate: f64) -> Result<()> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {rate}")));
        }
        if grads.weights.len() != self.depth() || grads.biases.len() != self.depth() {
            return Err(Error::Shape("gradient depth does not match network".into()));
        }
        for l in 0..self.depth() {
            if grads.weights[l].dim() != self.weights[l].dim() || grads.biases[l].dim() != self.biases[l].dim() {
                return Err(Error::Shape(format!("layer {l} gradient shape mismatch")));
            }
        }
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        for l in 0..self.depth() {
            self.weights[l].scaled_add(-rate, &grads.weights[l]);
            self.biases[l].scaled_add(-rate, &grads.biases[l]);
        }
        Ok(())
    }

    pub fn frobenius_norms(&self) -> FrobeniusReport {
        let norms: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let product = norms.iter().product();
        FrobeniusReport { norms, product }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

fn apply_hidden(act: HiddenActivation, z: &Array2<f64>) -> Array2<f64> {
    match act {
        HiddenActivation::Relu => z.mapv(|v| if v > 0.0 { v } else { 0.0 }),
    }
}

fn apply_output(act: OutputActivation, z: &Array2<f64>) -> Array2<f64> {
    match act {
        OutputActivation::Identity => z.clone(),
        OutputActivation::Softmax => softmax_rows(z.view()),
    }
}

fn hidden_backward(act: HiddenActivation, pre: &Array2<f64>, delta: &mut Array2<f64>) {
    match act {
        HiddenActivation::Relu => Zip::from(delta).and(pre).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        }),
    }
}

fn output_backward(act: OutputActivation, output: &Array2<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
    match act {
        OutputActivation::Identity => grad.to_owned(),
        OutputActivation::Softmax => {
            // dL/dz = p * (g - <g, p>) row-wise
            let mut delta = grad.to_owned();
            for (mut d, p) in delta.rows_mut().into_iter().zip(output.rows()) {
                let dot: f64 = d.iter().zip(p.iter()).map(|(g, p)| g * p).sum();
                d.zip_mut_with(&p, |g, &p| *g = p * (*g - dot));
            }
            delta
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
