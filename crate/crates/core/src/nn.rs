//! Feedforward and gated recurrent networks built on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Graph, ParameterStore, Tensor, Var};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// Layer sizes with ReLU after every hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForwardSpec {
    sizes: Vec<usize>,
    output: OutputActivation,
}

impl FeedForwardSpec {
    pub fn new(sizes: Vec<usize>, output: OutputActivation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "feedforward needs at least two positive layer sizes, got {sizes:?}"
            )));
        }
        Ok(Self { sizes, output })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn output(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn parameter_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn fingerprint(&self) -> String {
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        format!("ff({})/{:?}", sizes.join(","), self.output).to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    spec: FeedForwardSpec,
    params: ParameterStore,
}

impl FeedForward {
    fn build(spec: FeedForwardSpec, mut fill: impl FnMut(usize, usize) -> f64) -> Self {
        let mut params = ParameterStore::new();
        for (i, w) in spec.sizes.windows(2).enumerate() {
            let (fan_in, out) = (w[0], w[1]);
            let wdata = (0..fan_in * out).map(|_| fill(fan_in, out)).collect();
            let bdata = (0..out).map(|_| fill(fan_in, out)).collect();
            params
                .insert(format!("l{i}.w"), Tensor::matrix(fan_in, out, wdata).expect("sized"))
                .expect("unique");
            params.insert(format!("l{i}.b"), Tensor::vector(bdata)).expect("unique");
        }
        Self { spec, params }
    }

    pub fn zeros(spec: FeedForwardSpec) -> Self {
        Self::build(spec, |_, _| 0.0)
    }

    /// Weights and biases uniform on `±1/sqrt(fan_in)`.
    pub fn init(spec: FeedForwardSpec, rng: &mut RngStream) -> Self {
        Self::build(spec, |fan_in, _| {
            let k = 1.0 / (fan_in as f64).sqrt();
            (2.0 * rng.uniform() - 1.0) * k
        })
    }

    pub fn from_params(spec: FeedForwardSpec, params: ParameterStore) -> Result<Self> {
        let reference = Self::zeros(spec.clone());
        let shapes_match = reference.params.names() == params.names()
            && reference
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(Error::Checkpoint(format!(
                "parameters do not fit {}",
                spec.fingerprint()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &FeedForwardSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Forward pass of `x: [B, in]` using parameters already bound to `g`.
    pub fn forward(&self, g: &mut Graph, bound: &[Var], x: Var) -> Result<Var> {
        if g.value(x).cols() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} for {}",
                g.value(x).cols(),
                self.spec.fingerprint()
            )));
        }
        let layers = self.spec.sizes.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = g.linear(h, bound[2 * l], bound[2 * l + 1])?;
            if l + 1 < layers {
                h = g.relu(h);
            } else if self.spec.output == OutputActivation::Sigmoid {
                h = g.sigmoid(h);
            }
        }
        Ok(h)
    }

    /// Evaluates a batch `[B, in]` without keeping a tape.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn eval_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.eval(&t)?.into_data())
    }
}

/// Gated recurrent unit with separate input-side and hidden-side biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruSpec {
    pub input: usize,
    pub hidden: usize,
}

impl GruSpec {
    pub fn new(input: usize, hidden: usize) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("GRU dimensions must be positive".into()));
        }
        Ok(Self { input, hidden })
    }

    pub fn parameter_count(&self) -> usize {
        3 * (self.input * self.hidden + self.hidden * self.hidden + 2 * self.hidden)
    }

    pub fn fingerprint(&self) -> String {
        format!("gru({},{})", self.input, self.hidden)
    }
}

/// Parameters are stored fused with gate blocks ordered (update, reset,
/// candidate): `w_i [in, 3h]`, `w_h [h, 3h]`, `b_i [3h]`, `b_h [3h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    spec: GruSpec,
    params: ParameterStore,
}

impl Gru {
    fn build(spec: GruSpec, mut fill: impl FnMut() -> f64) -> Self {
        let (i, h) = (spec.input, spec.hidden);
        let mut gen = |n: usize| (0..n).map(|_| fill()).collect::<Vec<_>>();
        let mut params = ParameterStore::new();
        params.insert("w_i", Tensor::matrix(i, 3 * h, gen(3 * i * h)).expect("sized")).expect("unique");
        params.insert("w_h", Tensor::matrix(h, 3 * h, gen(3 * h * h)).expect("sized")).expect("unique");
        params.insert("b_i", Tensor::vector(gen(3 * h))).expect("unique");
        params.insert("b_h", Tensor::vector(gen(3 * h))).expect("unique");
        Self { spec, params }
    }

    pub fn zeros(spec: GruSpec) -> Self {
        Self::build(spec, || 0.0)
    }

    /// Every parameter uniform on `±1/sqrt(hidden)`.
    pub fn init(spec: GruSpec, rng: &mut RngStream) -> Self {
        let k = 1.0 / (spec.hidden as f64).sqrt();
        Self::build(spec, || (2.0 * rng.uniform() - 1.0) * k)
    }

    pub fn from_params(spec: GruSpec, params: ParameterStore) -> Result<Self> {
        let reference = Self::zeros(spec);
        let ok = reference.params.names() == params.names()
            && reference
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(Error::Checkpoint(format!("parameters do not fit {}", spec.fingerprint())));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> GruSpec {
        self.spec
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// One recurrent step on `x: [B, in]`, `h: [B, hidden]`.
    pub fn step(&self, g: &mut Graph, bound: &[Var], x: Var, h: Var) -> Result<Var> {
        let (xv, hv) = (g.value(x), g.value(h));
        if xv.cols() != self.spec.input || hv.cols() != self.spec.hidden || xv.rows() != hv.rows() {
            return Err(Error::Shape(format!(
                "gru step: x {:?}, h {:?} for {}",
                xv.shape(),
                hv.shape(),
                self.spec.fingerprint()
            )));
        }
        let gi = g.linear(x, bound[0], bound[2])?;
        let gh = g.linear(h, bound[1], bound[3])?;
        g.gru_cell(gi, gh, h)
    }

    pub fn step_one(&self, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let xv = g.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let hv = g.constant(Tensor::matrix(1, h.len(), h.to_vec())?);
        let out = self.step(&mut g, &bound, xv, hv)?;
        Ok(g.value(out).clone().into_data())
    }
}
