//! Affine stacks (single affine map or small ReLU perceptron) used for unary
//! energies, gating factor maps, and prior score maps. The architecture is a
//! configuration choice, not a separate code path: an empty hidden list means
//! a single affine layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// One affine layer `y = W x + b`; `weight` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    /// Weights uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-a..=a)).collect();
        Self { in_dim, out_dim, weight, bias: vec![0.0; out_dim] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = self.bias.clone();
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &self.weight[i * self.in_dim..(i + 1) * self.in_dim];
            let mut acc = *yi;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *yi = acc;
        }
        y
    }
}

/// A stack of affine layers with ReLU between them (never after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub layers: Vec<AffineLayer>,
}

impl Projection {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(in_dim);
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .map(|pair| AffineLayer::init(pair[0], pair[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            for v in cur.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            cur = layer.forward(&cur);
        }
        cur
    }
}
