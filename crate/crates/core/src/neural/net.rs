//! Gated recurrent gain network.
//!
//! One step maps a feature vector `x` and hidden state `h` to a matrix:
//!
//! ```text
//! e  = act(W_e x + b_e)
//! z  = σ(W_z e + U_z h + b_z)
//! r  = σ(W_r e + U_r h + b_r)
//! n  = act(W_n e + U_n (r ⊙ h) + b_n)
//! h' = (1 − z) ⊙ n + z ⊙ h
//! y  = reshape(W_o h' + b_o, rows, cols)
//! ```

use serde::{Deserialize, Serialize};

use super::tape::{Adjoints, Node, Tape};
use super::tensor::Tensor2;
use crate::dataset::rng::Sampler;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainNetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_rows: usize,
    pub output_cols: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Multiplies the initial output-layer weights and bias.
    #[serde(default = "one")]
    pub output_init_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl GainNetConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, output_rows: usize, output_cols: usize) -> Self {
        GainNetConfig { input_dim, hidden_dim, output_rows, output_cols, activation: Activation::Tanh, output_init_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_rows == 0 || self.output_cols == 0 {
            return Err(Error::invalid(format!("gain network dimensions must be positive: {self:?}")));
        }
        if !self.output_init_scale.is_finite() {
            return Err(Error::invalid("output_init_scale must be finite"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.output_rows * self.output_cols
    }

    /// `(name, rows, cols, fan_in)` for every parameter, in storage order.
    fn layout(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim());
        vec![
            ("embed.w", h, i, i),
            ("embed.b", h, 1, i),
            ("gru.w_z", h, h, h),
            ("gru.u_z", h, h, h),
            ("gru.b_z", h, 1, h),
            ("gru.w_r", h, h, h),
            ("gru.u_r", h, h, h),
            ("gru.b_r", h, 1, h),
            ("gru.w_n", h, h, h),
            ("gru.u_n", h, h, h),
            ("gru.b_n", h, 1, h),
            ("out.w", o, h, h),
            ("out.b", o, 1, h),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor2,
}

const EMBED_W: usize = 0;
const EMBED_B: usize = 1;
const W_Z: usize = 2;
const U_Z: usize = 3;
const B_Z: usize = 4;
const W_R: usize = 5;
const U_R: usize = 6;
const B_R: usize = 7;
const W_N: usize = 8;
const U_N: usize = 9;
const B_N: usize = 10;
const OUT_W: usize = 11;
const OUT_B: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentGainNet {
    config: GainNetConfig,
    params: Vec<Parameter>,
    hidden: Vec<f64>,
}

impl RecurrentGainNet {
    /// Uniform `±1/√fan_in` initialization drawn from `(seed, stream)`.
    pub fn new(config: GainNetConfig, seed: u64, stream: u64) -> Result<Self> {
        config.validate()?;
        let mut s = Sampler::new(seed, stream);
        let mut params = Vec::new();
        for (idx, (name, rows, cols, fan_in)) in config.layout().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let scale = if idx >= OUT_W { config.output_init_scale } else { 1.0 };
            let value = Tensor2::from_fn(rows, cols, |_, _| scale * s.uniform_range(-bound, bound));
            params.push(Parameter { name: name.to_string(), value });
        }
        let hidden = vec![0.0; config.hidden_dim];
        Ok(RecurrentGainNet { config, params, hidden })
    }

    /// All parameters set to zero.
    pub fn zeros(config: GainNetConfig) -> Result<Self> {
        let mut net = Self::new(config, 0, 0)?;
        for p in &mut net.params {
            p.value = Tensor2::zeros(p.value.rows(), p.value.cols());
        }
        Ok(net)
    }

    /// Rebuilds a network from a flat parameter buffer in storage order.
    pub fn from_flat(config: GainNetConfig, flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        if flat.len() != net.parameter_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                net.parameter_count(),
                flat.len()
            )));
        }
        net.set_flat(flat)?;
        Ok(net)
    }

    pub fn config(&self) -> &GainNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::invalid("flat parameter length mismatch"));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let len = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    /// Clears the hidden state; done at the start of every trajectory.
    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|h| *h = 0.0);
    }

    /// One recurrent step outside any tape. Updates the hidden state.
    pub fn forward_step(&mut self, features: &[f64]) -> Result<Tensor2> {
        if features.len() != self.config.input_dim {
            return Err(Error::invalid(format!(
                "expected {} features, got {}",
                self.config.input_dim,
                features.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(Tensor2::column(features.to_vec()));
        let h = tape.constant(Tensor2::column(self.hidden.clone()));
        let (out, h_new) = bound.step(&mut tape, x, h)?;
        self.hidden = tape.value(h_new).data().to_vec();
        Ok(tape.value(out).clone())
    }

    /// Records the parameters on `tape`; `trainable` decides whether they
    /// receive adjoints.
    pub fn bind(&self, tape: &mut Tape<'_>, trainable: bool) -> BoundNet {
        let nodes = self
            .params
            .iter()
            .map(|p| if trainable { tape.variable(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        BoundNet { config: self.config.clone(), nodes }
    }

    /// Unrolls over a feature sequence on a fresh tape from a zero hidden state.
    pub fn unroll(&self, features: &[Vec<f64>]) -> Result<Unroll> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let mut h = tape.constant(Tensor2::zeros(self.config.hidden_dim, 1));
        let mut outputs = Vec::with_capacity(features.len());
        for f in features {
            if f.len() != self.config.input_dim {
                return Err(Error::invalid(format!("expected {} features, got {}", self.config.input_dim, f.len())));
            }
            let x = tape.constant(Tensor2::column(f.clone()));
            let (out, h_new) = bound.step(&mut tape, x, h)?;
            outputs.push(out);
            h = h_new;
        }
        Ok(Unroll { tape, bound, outputs })
    }

    /// Gradients of `Σ_t ⟨g_t, y_t⟩` with respect to every parameter, where
    /// `g_t` is the loss gradient for the step-`t` output.
    pub fn backward_through_time(&self, unroll: &Unroll, loss_grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        if loss_grads.len() != unroll.outputs.len() {
            return Err(Error::invalid(format!(
                "{} loss gradients for an unroll of {} steps",
                loss_grads.len(),
                unroll.outputs.len()
            )));
        }
        let seeds: Vec<(Node, Tensor2)> = unroll.outputs.iter().copied().zip(loss_grads.iter().cloned()).collect();
        let adj = unroll.tape.backward_seeded(&seeds)?;
        Ok(unroll.bound.gradients(&adj))
    }
}

/// Parameter nodes of a network recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundNet {
    config: GainNetConfig,
    nodes: Vec<Node>,
}

impl BoundNet {
    fn activate(&self, tape: &mut Tape<'_>, a: Node) -> Node {
        match self.config.activation {
            Activation::Tanh => tape.tanh(a),
            Activation::Identity => a,
        }
    }

    fn dense(&self, tape: &mut Tape<'_>, w: usize, x: Node, b: usize) -> Result<Node> {
        let wx = tape.matmul(self.nodes[w], x)?;
        tape.add(wx, self.nodes[b])
    }

    fn gate(&self, tape: &mut Tape<'_>, w: usize, e: Node, u: usize, h: Node, b: usize) -> Result<Node> {
        let we = self.dense(tape, w, e, b)?;
        let uh = tape.matmul(self.nodes[u], h)?;
        tape.add(we, uh)
    }

    /// One recurrent step. Returns the reshaped output and the new hidden state.
    pub fn step(&self, tape: &mut Tape<'_>, x: Node, h: Node) -> Result<(Node, Node)> {
        if tape.value(x).shape() != (self.config.input_dim, 1) {
            return Err(Error::invalid(format!(
                "feature node has shape {:?}, expected ({}, 1)",
                tape.value(x).shape(),
                self.config.input_dim
            )));
        }
        let pre_e = self.dense(tape, EMBED_W, x, EMBED_B)?;
        let e = self.activate(tape, pre_e);
        let pre_z = self.gate(tape, W_Z, e, U_Z, h, B_Z)?;
        let z = tape.sigmoid(pre_z);
        let pre_r = self.gate(tape, W_R, e, U_R, h, B_R)?;
        let r = tape.sigmoid(pre_r);
        let rh = tape.mul(r, h)?;
        let pre_n = self.gate(tape, W_N, e, U_N, rh, B_N)?;
        let n = self.activate(tape, pre_n);
        let keep = tape.one_minus(z);
        let fresh = tape.mul(keep, n)?;
        let carried = tape.mul(z, h)?;
        let h_new = tape.add(fresh, carried)?;
        let flat = self.dense(tape, OUT_W, h_new, OUT_B)?;
        let out = tape.reshape(flat, self.config.output_rows, self.config.output_cols)?;
        Ok((out, h_new))
    }

    /// Fresh zero hidden state node.
    pub fn initial_hidden(&self, tape: &mut Tape<'_>) -> Node {
        tape.constant(Tensor2::zeros(self.config.hidden_dim, 1))
    }

    /// Parameter adjoints in storage order (zeros where nothing flowed).
    pub fn gradients(&self, adj: &Adjoints) -> Vec<Tensor2> {
        let layout = self.config.layout();
        self.nodes
            .iter()
            .zip(layout)
            .map(|(n, (_, rows, cols, _))| adj.get_or_zeros(*n, rows, cols))
            .collect()
    }
}

/// A recorded unroll of a network over one feature sequence.
pub struct Unroll {
    tape: Tape<'static>,
    bound: BoundNet,
    outputs: Vec<Node>,
}

impl Unroll {
    pub fn outputs(&self) -> Vec<&Tensor2> {
        self.outputs.iter().map(|n| self.tape.value(*n)).collect()
    }
}
