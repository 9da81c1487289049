//! Dense MLP encoder/decoder and the Adam optimizer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{sigmoid, Bindings, GradientSet, Graph, NodeId};
use crate::seed::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("an MLP needs at least two layer sizes, got {0}")]
    TooFewLayers(usize),
    #[error("layer sizes must be positive")]
    ZeroWidth,
    #[error("input has {got} columns, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("parameter `{0}` is missing from the gradient set")]
    MissingGradient(String),
    #[error("shape mismatch for `{name}`: {detail}")]
    Shape { name: String, detail: String },
    #[error("non-finite gradient entry in `{name}` at flat index {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("malformed parameters: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    None,
    Sigmoid,
}

/// Weights are `out x in`; a layer computes `act(x W^T + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
}

/// Glorot-uniform weights, zero biases.
pub fn mlp_init(
    layer_sizes: &[usize],
    hidden_activation: Activation,
    output_activation: OutputActivation,
    seed: u64,
) -> Result<MlpParams> {
    if layer_sizes.len() < 2 {
        return Err(NetError::TooFewLayers(layer_sizes.len()));
    }
    if layer_sizes.contains(&0) {
        return Err(NetError::ZeroWidth);
    }
    let mut rng = rng_for(seed, "mlp-init", &[]);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
            rng.random_range(-limit..=limit)
        }));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(MlpParams {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
        hidden_activation,
        output_activation,
    })
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Check shapes and finiteness against `layer_sizes`.
    pub fn validate(&self) -> Result<()> {
        let n = self.layer_sizes.len();
        if n < 2 {
            return Err(NetError::TooFewLayers(n));
        }
        if self.weights.len() != n - 1 || self.biases.len() != n - 1 {
            return Err(NetError::Malformed(format!(
                "{} layer sizes but {} weights and {} biases",
                n,
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (i, w) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[i].dim() != (w[1], w[0]) || self.biases[i].len() != w[1] {
                return Err(NetError::Malformed(format!("layer {i} has wrong shape")));
            }
        }
        let finite = self
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err(NetError::Malformed("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Deterministic forward pass on a `batch x input_dim` matrix.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(NetError::InputWidth {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let last = self.n_layers() - 1;
        let mut h = x.to_owned();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(&w.t()) + b.view().insert_axis(Axis(0));
            if i < last {
                match self.hidden_activation {
                    Activation::Tanh => h.mapv_inplace(f64::tanh),
                    Activation::Relu => h.mapv_inplace(|v| v.max(0.0)),
                }
            } else if self.output_activation == OutputActivation::Sigmoid {
                h.mapv_inplace(sigmoid);
            }
        }
        Ok(h)
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.w{layer}")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.b{layer}")
    }

    /// Append this network to `g` as parameters named `{prefix}.w{i}` and
    /// `{prefix}.b{i}`, applied to node `x`. Returns the output node.
    pub fn build_graph(&self, g: &mut Graph, prefix: &str, x: NodeId) -> NodeId {
        let last = self.n_layers() - 1;
        let mut h = x;
        for i in 0..self.n_layers() {
            let w = g.param(&Self::weight_name(prefix, i));
            let b = g.param(&Self::bias_name(prefix, i));
            let lin = g.matmul_t(h, w);
            h = g.add_row(lin, b);
            if i < last {
                h = match self.hidden_activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Relu => g.relu(h),
                };
            } else if self.output_activation == OutputActivation::Sigmoid {
                h = g.sigmoid(h);
            }
        }
        h
    }

    /// Bind every parameter (biases as `1 x n` rows) under `prefix`.
    pub fn bind(&self, prefix: &str, bindings: &mut Bindings) {
        for i in 0..self.n_layers() {
            bindings.insert(Self::weight_name(prefix, i), self.weights[i].clone());
            bindings.insert(
                Self::bias_name(prefix, i),
                self.biases[i].clone().insert_axis(Axis(0)),
            );
        }
    }

    /// Pull this network's gradients out of a [`GradientSet`]. Parameters the
    /// loss does not depend on get zero gradients.
    pub fn grads_from(&self, prefix: &str, set: &GradientSet) -> Result<MlpGrads> {
        let mut weights = Vec::with_capacity(self.n_layers());
        let mut biases = Vec::with_capacity(self.n_layers());
        for i in 0..self.n_layers() {
            let wn = Self::weight_name(prefix, i);
            let bn = Self::bias_name(prefix, i);
            let w = set
                .get(&wn)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(self.weights[i].dim()));
            let b = set
                .get(&bn)
                .map(|b| b.row(0).to_owned())
                .unwrap_or_else(|| Array1::zeros(self.biases[i].len()));
            if w.dim() != self.weights[i].dim() {
                return Err(NetError::Shape {
                    name: wn,
                    detail: format!("{:?} vs {:?}", w.dim(), self.weights[i].dim()),
                });
            }
            if b.len() != self.biases[i].len() {
                return Err(NetError::Shape {
                    name: bn,
                    detail: format!("{} vs {}", b.len(), self.biases[i].len()),
                });
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(MlpGrads { weights, biases })
    }

    fn slots_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn slot_sizes(&self) -> Vec<usize> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.len(), b.len()])
            .collect()
    }
}

/// Gradients shaped like an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    fn slots(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| {
                [
                    w.as_slice().expect("standard layout"),
                    b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

/// Bias-corrected Adam over a fixed list of flat parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, slot_sizes: &[usize]) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_mlp(params: &MlpParams, lr: f64) -> Self {
        Self::new(lr, &params.slot_sizes())
    }

    /// One update. `names` label slots in errors. Nothing is modified when a
    /// gradient is non-finite or a shape disagrees.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[String]) -> Result<()> {
        let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("slot{i}"));
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NetError::Shape {
                name: "adam".into(),
                detail: format!(
                    "{} slots in state, {} params, {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(NetError::Shape {
                    name: label(i),
                    detail: format!("param {} grad {} state {}", p.len(), g.len(), self.first[i].len()),
                });
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteGradient { name: label(i), index });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Apply one Adam step to an MLP.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
    let names: Vec<String> = (0..params.n_layers())
        .flat_map(|i| [format!("w{i}"), format!("b{i}")])
        .collect();
    let g = grads.slots();
    let mut p = params.slots_mut();
    state.update(&mut p, &g, &names)
}

/// On-disk representation: row-major flat arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpRecord {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&MlpParams> for MlpRecord {
    fn from(p: &MlpParams) -> Self {
        Self {
            layer_sizes: p.layer_sizes.clone(),
            hidden_activation: p.hidden_activation,
            output_activation: p.output_activation,
            weights: p.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: p.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpRecord> for MlpParams {
    type Error = NetError;

    fn try_from(r: MlpRecord) -> Result<Self> {
        if r.layer_sizes.len() < 2 {
            return Err(NetError::TooFewLayers(r.layer_sizes.len()));
        }
        let n = r.layer_sizes.len() - 1;
        if r.weights.len() != n || r.biases.len() != n {
            return Err(NetError::Malformed("layer count mismatch".into()));
        }
        let mut weights = Vec::with_capacity(n);
        for (i, (w, sz)) in r.weights.into_iter().zip(r.layer_sizes.windows(2)).enumerate() {
            let arr = Array2::from_shape_vec((sz[1], sz[0]), w)
                .map_err(|e| NetError::Malformed(format!("weight {i}: {e}")))?;
            weights.push(arr);
        }
        let p = MlpParams {
            layer_sizes: r.layer_sizes,
            weights,
            biases: r.biases.into_iter().map(Array1::from).collect(),
            hidden_activation: r.hidden_activation,
            output_activation: r.output_activation,
        };
        p.validate()?;
        Ok(p)
    }
}
