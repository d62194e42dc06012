//! Small feed-forward and recurrent building blocks on top of the tape.

use rand::Rng;

use crate::substrate::optim::ParamSet;
use crate::substrate::tape::{Tape, V};
use crate::substrate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Linear,
    Tanh,
    Sigmoid,
}

fn apply_act(tape: &mut Tape, x: V, act: Act) -> V {
    match act {
        Act::Linear => x,
        Act::Tanh => tape.tanh(x),
        Act::Sigmoid => tape.sigmoid(x),
    }
}

/// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_linear(params: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    params.insert(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, w));
    params.insert(format!("{prefix}.b"), Tensor::row(&vec![0.0; fan_out]));
}

pub fn linear(tape: &mut Tape, params: &ParamSet, prefix: &str, x: V, train: bool) -> V {
    let w = tape.p(params, &format!("{prefix}.w"), train);
    let b = tape.p(params, &format!("{prefix}.b"), train);
    let xw = tape.matmul(x, w);
    tape.add(xw, b)
}

/// Multi-layer perceptron; hidden layers use `hidden_act`, output layer is
/// linear unless `out_act` says otherwise.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub hidden_act: Act,
    pub out_act: Act,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        Mlp {
            prefix: prefix.into(),
            dims,
            hidden_act: Act::Tanh,
            out_act: Act::Linear,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        for i in 0..self.dims.len() - 1 {
            init_linear(
                params,
                &format!("{}.l{}", self.prefix, i),
                self.dims[i],
                self.dims[i + 1],
                rng,
            );
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: V, train: bool) -> V {
        let mut h = x;
        let n = self.dims.len() - 1;
        for i in 0..n {
            h = linear(tape, params, &format!("{}.l{}", self.prefix, i), h, train);
            let act = if i + 1 == n { self.out_act } else { self.hidden_act };
            h = apply_act(tape, h, act);
        }
        h
    }
}

/// Gated recurrent unit over batched rows.
///
/// `h' = (1 - z) * n + z * h` with `z = sigmoid(W_z x + U_z h + b_z)`,
/// `r = sigmoid(W_r x + U_r h + b_r)`, `n = tanh(W_n x + U_n (r*h) + b_n)`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        Gru {
            prefix: prefix.into(),
            input_dim,
            hidden_dim,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        for gate in ["z", "r", "n"] {
            init_linear(
                params,
                &format!("{}.{gate}x", self.prefix),
                self.input_dim,
                self.hidden_dim,
                rng,
            );
            init_linear(
                params,
                &format!("{}.{gate}h", self.prefix),
                self.hidden_dim,
                self.hidden_dim,
                rng,
            );
        }
    }

    pub fn step(&self, tape: &mut Tape, params: &ParamSet, h: V, x: V, train: bool) -> V {
        assert_eq!(
            tape.value(h).cols(),
            self.hidden_dim,
            "gru hidden size mismatch"
        );
        assert_eq!(
            tape.value(x).cols(),
            self.input_dim,
            "gru input size mismatch"
        );
        let gate = |tape: &mut Tape, name: &str, hin: V| {
            let a = linear(tape, params, &format!("{}.{name}x", self.prefix), x, train);
            let b = linear(tape, params, &format!("{}.{name}h", self.prefix), hin, train);
            tape.add(a, b)
        };
        let z_pre = gate(tape, "z", h);
        let z = tape.sigmoid(z_pre);
        let r_pre = gate(tape, "r", h);
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(h, r);
        let n_pre = gate(tape, "n", rh);
        let n = tape.tanh(n_pre);
        // (1 - z) * n + z * h
        let zn = tape.mul(n, z);
        let zh = tape.mul(h, z);
        let diff = tape.sub(n, zn);
        tape.add(diff, zh)
    }
}

/// One-hot rows: `indices[i]` selects the hot column of row `i`.
pub fn one_hot(indices: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * classes];
    for (i, &k) in indices.iter().enumerate() {
        assert!(k < classes, "one_hot index {k} out of range {classes}");
        data[i * classes + k] = 1.0;
    }
    Tensor::matrix(indices.len(), classes, data)
}
