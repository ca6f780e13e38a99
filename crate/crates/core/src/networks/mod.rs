//! Learnable function approximators: MLPs and KANs mapping the state
//! variables to one output.

mod kan;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::jet::{self, Jet, JetBasis, JetFunc};
use crate::autodiff::{input_jets, BatchedValue, Graph};
use crate::codec;

pub use kan::BSplineBasis;

/// Format tag written into every serialized network.
pub const NETWORK_FORMAT: &str = "macronet-network/1";

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("expected {expected} input columns, got {found}")]
    InputMismatch { expected: usize, found: usize },
    #[error("tensor {index} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("corrupt network payload: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    #[default]
    Mlp,
    Kan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Relu,
    Silu,
}

impl Activation {
    fn jet_func(self) -> JetFunc {
        match self {
            Activation::Tanh => JetFunc::Tanh,
            Activation::Sigmoid => JetFunc::Sigmoid,
            Activation::Relu => JetFunc::Relu,
            Activation::Silu => JetFunc::Silu,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::autodiff::sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * crate::autodiff::sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputTransform {
    #[default]
    None,
    Softplus,
    Exp,
}

fn default_hidden() -> Vec<usize> {
    vec![30, 30, 30, 30]
}

fn default_grid_size() -> usize {
    5
}

fn default_spline_order() -> usize {
    3
}

fn default_grid_range() -> [f64; 2] {
    [-1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default)]
    pub kind: NetworkKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_names: Vec<String>,
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
    /// Hidden activation of MLPs; KAN edges always use SiLU for the base term.
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub output_transform: OutputTransform,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_spline_order")]
    pub spline_order: usize,
    #[serde(default = "default_grid_range")]
    pub grid_range: [f64; 2],
}

impl NetworkSpec {
    pub fn mlp(input_names: &[&str], hidden_sizes: &[usize], activation: Activation) -> Self {
        Self {
            kind: NetworkKind::Mlp,
            input_names: input_names.iter().map(|s| s.to_string()).collect(),
            hidden_sizes: hidden_sizes.to_vec(),
            activation,
            output_transform: OutputTransform::None,
            grid_size: default_grid_size(),
            spline_order: default_spline_order(),
            grid_range: default_grid_range(),
        }
    }

    pub fn kan(input_names: &[&str], hidden_sizes: &[usize]) -> Self {
        Self {
            kind: NetworkKind::Kan,
            ..Self::mlp(input_names, hidden_sizes, Activation::Silu)
        }
    }

    pub fn with_transform(mut self, t: OutputTransform) -> Self {
        self.output_transform = t;
        self
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::InvalidSpec(m.to_string()));
        if self.input_names.is_empty() {
            return bad("at least one input is required");
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be a non-empty list of positive sizes");
        }
        if self.kind == NetworkKind::Kan {
            if self.grid_size == 0 || self.spline_order == 0 {
                return bad("grid_size and spline_order must be positive");
            }
            if !(self.grid_range[0] < self.grid_range[1]) {
                return bad("grid_range must be an increasing interval");
            }
        }
        Ok(())
    }

    /// Layer widths including input and the single output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_names.len()];
        w.extend(&self.hidden_sizes);
        w.push(1);
        w
    }

    fn spline(&self) -> BSplineBasis {
        BSplineBasis::new(self.grid_size, self.spline_order, self.grid_range[0], self.grid_range[1])
    }

    /// Tensor shapes in storage order.
    ///
    /// MLP: `W_l (out, in)`, `b_l (out, 1)` per layer. KAN: spline
    /// coefficients `(out, in * (G + k))`, base weights `(out, in)`, bias
    /// `(out, 1)` per layer.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let w = self.widths();
        let m = self.grid_size + self.spline_order;
        w.windows(2)
            .flat_map(|p| {
                let (i, o) = (p[0], p[1]);
                match self.kind {
                    NetworkKind::Mlp => vec![(o, i), (o, 1)],
                    NetworkKind::Kan => vec![(o, i * m), (o, i), (o, 1)],
                }
            })
            .collect()
    }
}

/// Number of trainable scalars.
pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.tensor_shapes().iter().map(|(r, c)| r * c).sum()
}

/// Trainable parameters, one array per tensor of [`NetworkSpec::tensor_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub tensors: Vec<Array2<f64>>,
}

impl NetworkState {
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major concatenation of all tensors.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten); returns the number of values consumed.
    pub fn assign_flat(&mut self, flat: &[f64]) -> usize {
        let mut k = 0;
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        k
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Spec plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub state: NetworkState,
}

/// Spline coefficients start uniform in `±KAN_COEF_SCALE`.
const KAN_COEF_SCALE: f64 = 0.1;

impl Network {
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self, NetworkError> {
        Self::init_with_rng(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Xavier-uniform weights and zero biases; KAN spline coefficients small uniform.
    pub fn init_with_rng(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self, NetworkError> {
        spec.validate()?;
        let widths = spec.widths();
        let m = spec.grid_size + spec.spline_order;
        let mut tensors = Vec::new();
        for p in widths.windows(2) {
            let (i, o) = (p[0], p[1]);
            match spec.kind {
                NetworkKind::Mlp => {
                    tensors.push(xavier(rng, o, i, i, o));
                    tensors.push(Array2::zeros((o, 1)));
                }
                NetworkKind::Kan => {
                    tensors.push(Array2::from_shape_fn((o, i * m), |_| {
                        rng.gen_range(-KAN_COEF_SCALE..KAN_COEF_SCALE)
                    }));
                    tensors.push(xavier(rng, o, i, i, o));
                    tensors.push(Array2::zeros((o, 1)));
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            state: NetworkState { tensors },
        })
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.spec)
    }

    /// Records the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<BatchedValue> {
        self.state.tensors.iter().map(|t| g.parameter(t.clone())).collect()
    }

    /// Records the parameters as constants (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<BatchedValue> {
        self.state.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Forward pass on input jets (one per input name, values shaped `(1, B)`).
    pub fn forward(&self, g: &mut Graph, params: &[BatchedValue], inputs: &[Jet]) -> Result<Jet, NetworkError> {
        let d = self.spec.input_names.len();
        if inputs.len() != d {
            return Err(NetworkError::InputMismatch {
                expected: d,
                found: inputs.len(),
            });
        }
        let out = match self.spec.kind {
            NetworkKind::Mlp => self.forward_mlp(g, params, inputs),
            NetworkKind::Kan => self.forward_kan(g, params, inputs),
        };
        Ok(match self.spec.output_transform {
            OutputTransform::None => out,
            OutputTransform::Softplus => jet::apply(g, JetFunc::Softplus, &out),
            OutputTransform::Exp => jet::apply(g, JetFunc::Exp, &out),
        })
    }

    fn forward_mlp(&self, g: &mut Graph, params: &[BatchedValue], inputs: &[Jet]) -> Jet {
        let layers = params.len() / 2;
        // first layer column by column so input jets keep their compact shape
        let (w0, b0) = (params[0], params[1]);
        let mut h: Option<Jet> = None;
        for (i, x) in inputs.iter().enumerate() {
            let col = g.select_col(w0, i);
            let term = x.map_linear(|c| g.mul(col, c));
            h = Some(match h {
                None => term,
                Some(a) => jet::add(g, &a, &term),
            });
        }
        let mut h = h.expect("at least one input");
        h.coeffs[0] = Some(g.add(h.value(), b0));
        for l in 1..layers {
            h = jet::apply(g, self.spec.activation.jet_func(), &h);
            h = jet::linear(g, params[2 * l], Some(params[2 * l + 1]), &h);
        }
        h
    }

    fn forward_kan(&self, g: &mut Graph, params: &[BatchedValue], inputs: &[Jet]) -> Jet {
        let spline = self.spec.spline();
        let mut rows: Vec<Jet> = inputs.to_vec();
        let layers = params.len() / 3;
        let mut out = None;
        for l in 0..layers {
            let p = [params[3 * l], params[3 * l + 1], params[3 * l + 2]];
            let h = kan::layer(g, &spline, p, &rows);
            if l + 1 < layers {
                let n = g.shape(h.value()).0;
                rows = (0..n)
                    .map(|r| {
                        let coeffs = h
                            .coeffs
                            .iter()
                            .map(|c| c.map(|c| if g.shape(c).0 == 1 { c } else { g.select_row(c, r) }))
                            .collect();
                        Jet {
                            basis: h.basis.clone(),
                            coeffs,
                        }
                    })
                    .collect();
            } else {
                out = Some(h);
            }
        }
        out.expect("at least one layer")
    }

    /// Plain evaluation at points given as input columns.
    pub fn evaluate(&self, columns: &[Vec<f64>]) -> Result<Vec<f64>, NetworkError> {
        let mut g = Graph::new();
        let params = self.bind_frozen(&mut g);
        let basis = JetBasis::new(columns.len(), 0);
        let cols: Vec<BatchedValue> = columns.iter().map(|c| g.row(c.clone())).collect();
        let inputs = input_jets(&mut g, &basis, &cols);
        let out = self.forward(&mut g, &params, &inputs)?;
        Ok(g.data(out.value()))
    }

    /// Self-describing text form with base64 row-major `f64` tensors.
    pub fn serialize(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("network serializes")
    }

    pub fn deserialize(text: &str) -> Result<Self, NetworkError> {
        let record: NetworkRecord = serde_json::from_str(text).map_err(|e| NetworkError::Corrupt(e.to_string()))?;
        Self::from_record(record)
    }

    pub fn to_record(&self) -> NetworkRecord {
        NetworkRecord {
            format: NETWORK_FORMAT.to_string(),
            spec: self.spec.clone(),
            tensors: self.state.tensors.iter().map(TensorRecord::from).collect(),
        }
    }

    pub fn from_record(record: NetworkRecord) -> Result<Self, NetworkError> {
        if record.format != NETWORK_FORMAT {
            return Err(NetworkError::Corrupt(format!("unknown format tag `{}`", record.format)));
        }
        record.spec.validate()?;
        let shapes = record.spec.tensor_shapes();
        if shapes.len() != record.tensors.len() {
            return Err(NetworkError::Corrupt(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                record.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for (index, (t, &expected)) in record.tensors.iter().zip(&shapes).enumerate() {
            let found = (t.shape[0], t.shape[1]);
            if found != expected {
                return Err(NetworkError::ShapeMismatch { index, expected, found });
            }
            tensors.push(t.to_array()?);
        }
        Ok(Self {
            spec: record.spec,
            state: NetworkState { tensors },
        })
    }
}

/// Serialized network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    pub format: String,
    pub spec: NetworkSpec,
    pub tensors: Vec<TensorRecord>,
}

/// A row-major `f64` array as little-endian bytes in base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: String,
}

impl From<&Array2<f64>> for TensorRecord {
    fn from(a: &Array2<f64>) -> Self {
        let values: Vec<f64> = a.iter().copied().collect();
        Self {
            shape: [a.nrows(), a.ncols()],
            data: codec::encode(&values),
        }
    }
}

impl TensorRecord {
    pub fn to_array(&self) -> Result<Array2<f64>, NetworkError> {
        let values = codec::decode(&self.data).map_err(NetworkError::Corrupt)?;
        let n = self.shape[0] * self.shape[1];
        if values.len() != n {
            return Err(NetworkError::Corrupt(format!(
                "tensor of shape {:?} needs {n} values, found {}",
                self.shape,
                values.len()
            )));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), values).map_err(|e| NetworkError::Corrupt(e.to_string()))
    }
}
