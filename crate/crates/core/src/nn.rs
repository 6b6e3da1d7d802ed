//! Multilayer perceptrons, fan-in-scaled initialization and the Adam
//! optimizer used by every network in the pipeline.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, AdResult, Graph, NodeId};
use crate::rng::named_rng;
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },
    #[error("gradient shape {grad:?} does not match parameter '{name}' shape {param:?}")]
    GradientShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("invalid mlp spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Activation applied after the last linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    None,
    LeakyRelu,
    Sigmoid,
}

/// Architecture of a multilayer perceptron: `widths[0]` inputs through
/// hidden layers to `widths.last()` outputs, leaky-ReLU between layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub slope: f64,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, slope: f64, final_activation: FinalActivation) -> Self {
        MlpSpec {
            widths,
            slope,
            final_activation,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.widths.len() < 2 {
            return Err(NnError::InvalidSpec(format!(
                "need at least 2 widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "zero width in {:?}",
                self.widths
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(NnError::InvalidSpec(format!(
                "slope {} outside (0, 1)",
                self.slope
            )));
        }
        Ok(())
    }
}

/// One affine layer: `weight` is `[out, in]`, `bias` a `[1, out]` row.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.dims2().expect("weight is rank-2").0
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims2().expect("weight is rank-2").1
    }
}

/// Zero-mean normal weights scaled by fan-in (std `sqrt(2 / fan_in)`),
/// zero biases. Fully determined by `(spec, seed)`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<Vec<LinearLayer>, NnError> {
    spec.validate()?;
    let mut rng = named_rng(seed, "init");
    let mut layers = Vec::with_capacity(spec.widths.len() - 1);
    for w in spec.widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_out * fan_in)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        layers.push(LinearLayer {
            weight: Tensor::matrix(fan_out, fan_in, data),
            bias: Tensor::zeros(&[1, fan_out]),
        });
    }
    Ok(layers)
}

/// Per-layer `(weight, bias)` node ids of an MLP inserted into a graph.
pub type MlpNodes = Vec<(NodeId, NodeId)>;

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub slope: f64,
    pub final_activation: FinalActivation,
}

impl Mlp {
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self, NnError> {
        Ok(Mlp {
            layers: init_params(spec, seed)?,
            slope: spec.slope,
            final_activation: spec.final_activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    /// Insert all parameters as differentiable leaves.
    pub fn insert_leaves(&self, g: &mut Graph) -> MlpNodes {
        self.layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
            .collect()
    }

    /// Insert all parameters as constants (frozen network).
    pub fn insert_constants(&self, g: &mut Graph) -> MlpNodes {
        self.layers
            .iter()
            .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
            .collect()
    }

    /// Graph forward pass over a `[batch, in]` input node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &MlpNodes,
        input: NodeId,
    ) -> AdResult<NodeId> {
        let batch = self.batch_of(g.value(input).shape())?;
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in params.iter().enumerate() {
            let lin = g.matmul(h, *w, false, true)?;
            let brow = g.broadcast_row(*b, batch)?;
            h = g.add(lin, brow)?;
            if i < last {
                h = g.leaky_relu(h, self.slope)?;
            } else {
                h = match self.final_activation {
                    FinalActivation::None => h,
                    FinalActivation::LeakyRelu => g.leaky_relu(h, self.slope)?,
                    FinalActivation::Sigmoid => sigmoid_graph(g, h)?,
                };
            }
        }
        Ok(h)
    }

    /// Value-level forward pass on the same kernels as the graph path.
    pub fn forward_values(&self, x: &Tensor) -> AdResult<Tensor> {
        let batch = self.batch_of(x.shape())?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let lin = kernels::matmul(&h, &l.weight, false, true);
            let brow = kernels::broadcast_row(&l.bias, batch);
            h = lin.zip_map(&brow, |a, b| a + b);
            if i < last {
                h = h.map(|v| kernels::leaky_relu_scalar(v, self.slope));
            } else {
                h = match self.final_activation {
                    FinalActivation::None => h,
                    FinalActivation::LeakyRelu => {
                        h.map(|v| kernels::leaky_relu_scalar(v, self.slope))
                    }
                    FinalActivation::Sigmoid => h.map(kernels::sigmoid_scalar),
                };
            }
        }
        Ok(h)
    }

    fn batch_of(&self, shape: &[usize]) -> AdResult<usize> {
        match shape {
            [b, c] if *c == self.in_dim() => Ok(*b),
            _ => Err(AdError::ShapeMismatch {
                op: "mlp-forward",
                nodes: vec![],
                shapes: vec![shape.to_vec(), vec![0, self.in_dim()]],
            }),
        }
    }

    /// Parameters in a stable order with stable names, matching
    /// [`Mlp::insert_leaves`] flattened as `w0, b0, w1, b1, ...`.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("l{i}.w"), &mut l.weight),
                    (format!("l{i}.b"), &mut l.bias),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("l{i}.w"), &l.weight), (format!("l{i}.b"), &l.bias)])
            .collect()
    }
}

/// Differentiable logistic activation assembled from primitive ops:
/// `sigmoid(u) = exp(-log(1 + exp(-u)))`.
pub fn sigmoid_graph(g: &mut Graph, u: NodeId) -> AdResult<NodeId> {
    let shape = g.value(u).shape().to_vec();
    let neg = g.scalar_mul(u, -1.0)?;
    let e = g.exp(neg)?;
    let ones = g.ones_const(&shape);
    let onep = g.add(e, ones)?;
    let l = g.log(onep)?;
    let negl = g.scalar_mul(l, -1.0)?;
    g.exp(negl)
}

/// Hyperparameters of the Adam update.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            states: BTreeMap::new(),
            config,
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// One bias-corrected update of a single parameter. Fails fast on a
    /// non-finite gradient, naming the parameter.
    pub fn step_param(
        &mut self,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
    ) -> Result<(), NnError> {
        if grad.shape() != param.shape() {
            return Err(NnError::GradientShapeMismatch {
                name: name.to_string(),
                param: param.shape().to_vec(),
                grad: grad.shape().to_vec(),
            });
        }
        if !grad.is_finite() {
            return Err(NnError::NonFiniteGradient {
                name: name.to_string(),
            });
        }
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState {
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
                step: 0,
            });
        state.step += 1;
        let t = state.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (pd, md, vd, gd) = (
            param.data_mut(),
            state.m.data_mut(),
            state.v.data_mut(),
            grad.data(),
        );
        for i in 0..pd.len() {
            md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
