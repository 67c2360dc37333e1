//! Minimal neural-network engine: named layer chains, shape validation,
//! segment-wise forward/backward passes, and plain SGD.
//!
//! The engine deliberately stops at what the federation needs — `f64`
//! everywhere, no autograd graph, no optimizer state. A network is a list of
//! named layers whose shapes are validated once at construction; training
//! code then runs composable forward/backward passes over sub-ranges of that
//! list, which is what lets a model be split into a shared trunk and
//! duplicated classifier heads.

pub mod layer;
pub mod tensor;

pub use layer::{
    cross_entropy, cross_entropy_batch, softmax, LayerParams, LayerSpec, CE_EPSILON,
};
pub use tensor::Tensor;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub spec: LayerSpec,
}

impl NamedLayer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        NamedLayer { name: name.into(), spec }
    }
}

/// A validated layer chain: unique names, and every layer's input shape
/// matches its predecessor's output shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<NamedLayer>,
    /// Per-sample shapes along the chain; entry `i` is the input of layer
    /// `i`, entry `layers.len()` is the network output.
    shapes: Vec<Vec<usize>>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<NamedLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Structure("a network needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Structure(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.name.is_empty() {
                return Err(Error::Structure(format!("layer {i} has an empty name")));
            }
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::Structure(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let out = layer.spec.output_shape(shapes.last().unwrap()).map_err(|e| {
                let detail = match e {
                    Error::Structure(d) => d,
                    other => other.to_string(),
                };
                Error::LayerChain {
                    from: if i == 0 { "input".into() } else { layers[i - 1].name.clone() },
                    to: layer.name.clone(),
                    detail,
                }
            })?;
            shapes.push(out);
        }
        Ok(Architecture { input_shape, layers, shapes })
    }

    pub fn layers(&self) -> &[NamedLayer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Per-sample shape entering layer `i`.
    pub fn shape_before(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&NamedLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Parameterized layers in chain order.
    pub fn param_layers(&self) -> impl Iterator<Item = (usize, &NamedLayer)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.has_params())
    }

    /// `(name, parameter count)` for every parameterized layer, in chain
    /// order. This is what communication accounting is based on.
    pub fn param_counts(&self) -> Vec<(String, u64)> {
        self.param_layers()
            .map(|(_, l)| {
                let (w, b) = l.spec.param_shapes().expect("param layer has shapes");
                let count = w.iter().product::<usize>() + b.iter().product::<usize>();
                (l.name.clone(), count as u64)
            })
            .collect()
    }
}

/// Plain SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, batch_size: usize) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(SgdConfig { learning_rate, batch_size })
    }
}

/// In-place SGD update `param -= learning_rate * grad`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, learning_rate: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Structure(format!(
            "sgd_step: parameter shape {:?} does not match gradient shape {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= learning_rate * g;
    }
    Ok(())
}

/// Runs `input` through a contiguous run of layers. `params[i]` supplies the
/// parameters of `layers[i]` (None for parameterless layers). Returns all
/// activations: index 0 is the input, index `layers.len()` the output.
pub fn forward_segment(
    layers: &[NamedLayer],
    params: &[Option<&LayerParams>],
    input: &Tensor,
) -> Result<Vec<Tensor>> {
    debug_assert_eq!(layers.len(), params.len());
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input.clone());
    for (layer, p) in layers.iter().zip(params) {
        let out = layer
            .spec
            .forward(*p, acts.last().unwrap())
            .map_err(|e| e.with_context(&format!("layer `{}`", layer.name)))?;
        acts.push(out);
    }
    Ok(acts)
}

/// Backward pass through the same segment. `acts` must come from
/// `forward_segment` on the same layers/params. Returns per-layer parameter
/// gradients (aligned with `layers`) and the gradient w.r.t. the segment
/// input.
pub fn backward_segment(
    layers: &[NamedLayer],
    params: &[Option<&LayerParams>],
    acts: &[Tensor],
    grad_out: &Tensor,
) -> Result<(Vec<Option<LayerParams>>, Tensor)> {
    debug_assert_eq!(layers.len(), params.len());
    debug_assert_eq!(acts.len(), layers.len() + 1);
    let mut grads = vec![None; layers.len()];
    let mut grad = grad_out.clone();
    for (i, (layer, p)) in layers.iter().zip(params).enumerate().rev() {
        let (pg, gi) = layer
            .spec
            .backward(*p, &acts[i], &acts[i + 1], &grad)
            .map_err(|e| e.with_context(&format!("layer `{}`", layer.name)))?;
        grads[i] = pg;
        grad = gi;
    }
    Ok((grads, grad))
}

/// Initializes every parameterized layer in chain order from `rng`.
/// Chain order is what makes initialization a pure function of the stream.
pub fn init_all_params(
    arch: &Architecture,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, String, LayerParams)> {
    arch.param_layers()
        .map(|(i, l)| {
            let p = l.spec.init_params(rng).expect("param layer initializes");
            (i, l.name.clone(), p)
        })
        .collect()
}
