//! A small fully connected classifier with hand-written backpropagation.
//!
//! Hidden layers use ReLU, the output layer is linear and produces logits.
//! Weights are stored row-major as `outputs x inputs`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::fsutil::write_atomic;
use crate::numerics::LogitVec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[outputs, inputs]`
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            shape: [outputs, inputs],
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn inputs(&self) -> usize {
        self.shape[1]
    }

    fn outputs(&self) -> usize {
        self.shape[0]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.inputs();
        self.weights
            .chunks_exact(n)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct MlpModel {
    sizes: Vec<usize>,
    seed: Option<u64>,
    layers: Vec<Layer>,
}

/// On-disk layout of a model.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    architecture: Vec<usize>,
    seed: Option<u64>,
    layers: Vec<Layer>,
}

impl TryFrom<Checkpoint> for MlpModel {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        validate_sizes(&c.architecture)?;
        if c.layers.len() + 1 != c.architecture.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layers for architecture {:?}",
                c.layers.len(),
                c.architecture
            )));
        }
        for (l, layer) in c.layers.iter().enumerate() {
            let want = [c.architecture[l + 1], c.architecture[l]];
            if layer.shape != want
                || layer.weights.len() != want[0] * want[1]
                || layer.bias.len() != want[0]
            {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: shape {:?} with {} weights and {} biases, expected {want:?}",
                    layer.shape,
                    layer.weights.len(),
                    layer.bias.len()
                )));
            }
            if layer
                .weights
                .iter()
                .chain(&layer.bias)
                .any(|v| !v.is_finite())
            {
                return Err(Error::invalid(format!(
                    "layer {l} has non-finite parameters"
                )));
            }
        }
        Ok(MlpModel {
            sizes: c.architecture,
            seed: c.seed,
            layers: c.layers,
        })
    }
}

impl From<MlpModel> for Checkpoint {
    fn from(m: MlpModel) -> Self {
        Checkpoint {
            architecture: m.sizes,
            seed: m.seed,
            layers: m.layers,
        }
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::invalid(format!(
            "architecture {sizes:?} needs input and output widths"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid(format!(
            "architecture {sizes:?} has a zero-width layer"
        )));
    }
    if *sizes.last().unwrap() < 2 {
        return Err(Error::invalid("output layer needs at least 2 classes"));
    }
    Ok(())
}

/// Activations recorded by [`MlpModel::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Input followed by each hidden layer's post-ReLU output.
    activations: Vec<Vec<f64>>,
    pub logits: LogitVec,
}

/// Parameter gradients, laid out like the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        check_dims(self.layers.len(), other.layers.len())?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch(format!(
                    "{:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

impl MlpModel {
    /// He-uniform initialization (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1]);
                for v in &mut layer.weights {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            seed: Some(seed),
            layers,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            seed: None,
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    /// Builds a model from explicit layers.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut sizes: Vec<usize> = layers.iter().take(1).map(|l| l.inputs()).collect();
        sizes.extend(layers.iter().map(|l| l.outputs()));
        Checkpoint {
            architecture: sizes,
            seed: None,
            layers,
        }
        .try_into()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters in the same order as [`Gradients::flatten`].
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        check_dims(self.parameter_count(), values.len())?;
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        check_dims(self.input_dim(), x.len())?;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let mut h = layer.apply(&current);
            for v in &mut h {
                *v = v.max(0.0);
            }
            activations.push(std::mem::replace(&mut current, h));
        }
        let out = self.layers[last].apply(&current);
        activations.push(current);
        Ok(ForwardPass {
            activations,
            logits: LogitVec::new(out)?,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<LogitVec> {
        Ok(self.forward(x)?.logits)
    }

    /// Chain rule from `dL/dlogits` back to every parameter.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &[f64]) -> Result<Gradients> {
        check_dims(self.classes(), grad_logits.len())?;
        if pass.activations.len() != self.layers.len()
            || pass
                .activations
                .iter()
                .zip(&self.layers)
                .any(|(a, l)| a.len() != l.inputs())
        {
            return Err(Error::ShapeMismatch(
                "forward pass was recorded by a different architecture".into(),
            ));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_logits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let input = &pass.activations[l];
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let n = layer.inputs();
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] = *d;
                for (gw, a) in g.weights[o * n..(o + 1) * n].iter_mut().zip(input) {
                    *gw = d * a;
                }
            }
            if l > 0 {
                let mut back = vec![0.0; n];
                for (o, d) in delta.iter().enumerate() {
                    for (b, w) in back.iter_mut().zip(&layer.weights[o * n..(o + 1) * n]) {
                        *b += d * w;
                    }
                }
                // ReLU: the recorded input is the post-activation value.
                for (b, a) in back.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok(grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// SGD with momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients,
}

impl OptimizerState {
    pub fn new(
        model: &MlpModel,
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be > 0, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Gradients::zeros_like(model),
        })
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }
}

/// `v <- momentum * v + grad + weight_decay * theta;  theta <- theta - lr * v`
pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    check_dims(model.layers.len(), grads.layers.len())?;
    check_dims(model.layers.len(), state.velocity.layers.len())?;
    for ((layer, g), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity.layers)
    {
        if layer.shape != g.shape || layer.shape != v.shape {
            return Err(Error::ShapeMismatch(format!(
                "parameters {:?}, gradients {:?}, velocity {:?}",
                layer.shape, g.shape, v.shape
            )));
        }
        let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
        let grads = g.weights.iter().chain(&g.bias);
        let vel = v.weights.iter_mut().chain(v.bias.iter_mut());
        for ((theta, grad), vel) in params.zip(grads).zip(vel) {
            *vel = state.momentum * *vel + grad + state.weight_decay * *theta;
            *theta -= state.learning_rate * *vel;
        }
    }
    Ok(())
}
