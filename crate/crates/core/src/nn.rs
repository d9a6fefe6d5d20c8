//! MLP building blocks shared by the prior and disturbance models.
//!
//! Every layer exposes two forward paths: a tape path used while training and
//! a plain [`Mat`] path used by rollouts. The two must agree exactly; see the
//! parity test below.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::Result;
use crate::linalg::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Activation between hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [1, out]
}

impl Linear {
    /// Xavier-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w: Vec<f64> = (0..d_in * d_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![d_in, d_out], w).with_grad(),
            bias: Tensor::new(vec![1, d_out], vec![0.0; d_out]).with_grad(),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let rows = tape.shape(x)[0];
        let w = tape
            .leafed(&self.weight)
            .expect("linear weight not registered on this tape");
        let b = tape
            .leafed(&self.bias)
            .expect("linear bias not registered on this tape");
        let z = tape.matmul(x, w)?;
        let bb = tape.broadcast_to(b, &[rows, self.bias.shape[1]])?;
        tape.add(z, bb)
    }

    pub fn forward_values(&self, x: &Mat) -> Mat {
        let w = Mat::from_vec(
            self.weight.shape[0],
            self.weight.shape[1],
            self.weight.values.clone(),
        );
        let mut out = x.matmul(&w);
        out.add_row_inplace(&self.bias.values);
        out
    }
}

/// Plain MLP: alternating linear layers and activations, linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` lists layer widths input-first, e.g. [5, 128, 128, 8].
    pub fn init(dims: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward_tape(&self, tape: &mut Tape, mut x: NodeId) -> Result<NodeId> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward_tape(tape, x)?;
            if i + 1 < self.layers.len() {
                x = match self.activation {
                    Activation::Tanh => tape.tanh(x)?,
                    Activation::Relu => tape.relu(x)?,
                };
            }
        }
        Ok(x)
    }

    pub fn forward_values(&self, x: &Mat) -> Mat {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward_values(&cur);
            if i + 1 < self.layers.len() {
                match self.activation {
                    Activation::Tanh => cur.tanh_inplace(),
                    Activation::Relu => {
                        for v in &mut cur.data {
                            *v = v.max(0.0);
                        }
                    }
                }
            }
        }
        cur
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape[1]
    }
}

impl Mlp {
    /// Named parameter views; order matches [`Mlp::params_mut`].
    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &l.weight));
            out.push((format!("{prefix}.{i}.b"), &l.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }
}

/// Frozen input standardization (running mean/std of the pre-training data).
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit mean/std over rows; stds are floored to keep division sane.
    pub fn fit(rows: &Mat) -> Self {
        let dim = rows.cols;
        let mut mean = vec![0.0; dim];
        let mut std = vec![1.0; dim];
        if rows.rows == 0 {
            return Normalizer { mean, std };
        }
        mean = rows.col_mean();
        let mut var = vec![0.0; dim];
        for r in 0..rows.rows {
            for (c, &x) in rows.row(r).iter().enumerate() {
                let d = x - mean[c];
                var[c] += d * d;
            }
        }
        for c in 0..dim {
            std[c] = (var[c] / rows.rows as f64).sqrt().max(1e-6);
        }
        Normalizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, rows: &Mat) -> Mat {
        assert_eq!(rows.cols, self.dim(), "normalizer dim");
        // Multiply by 1/std so the values agree bitwise with the tape path,
        // which has no division primitive.
        let inv: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let mut out = rows.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for c in 0..row.len() {
                row[c] = (row[c] - self.mean[c]) * inv[c];
            }
        }
        out
    }

    /// Tape-path standardization of a [rows, dim] node.
    pub fn apply_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let rows = tape.shape(x)[0];
        let mean = tape.constant(vec![1, self.dim()], self.mean.clone());
        let inv: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let inv = tape.constant(vec![1, self.dim()], inv);
        let mb = tape.broadcast_to(mean, &[rows, self.dim()])?;
        let ib = tape.broadcast_to(inv, &[rows, self.dim()])?;
        let centered = tape.sub(x, mb)?;
        tape.mul(centered, ib)
    }
}
