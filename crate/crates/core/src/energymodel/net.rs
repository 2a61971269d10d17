use std::path::Path;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seeds;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Parameter layout: `W1, b1, W2, b2, W3, b3`, weights row-major `(out, in)`.
pub const PARAM_ORDERING_VERSION: u32 = 1;

const OUTPUTS: usize = 2;

/// Two-hidden-layer tanh network with a shared trunk and two linear output heads.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyNet<T: Real> {
    hidden: [usize; 2],
    params: Vec<T>,
}

/// Hidden activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Activations<T> {
    pub hidden1: Vec<T>,
    pub hidden2: Vec<T>,
    pub output: [T; OUTPUTS],
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

fn offsets(h1: usize, h2: usize) -> Offsets {
    let w1 = 0;
    let b1 = w1 + h1 * FEATURE_DIM;
    let w2 = b1 + h1;
    let b2 = w2 + h2 * h1;
    let w3 = b2 + h2;
    let b3 = w3 + OUTPUTS * h2;
    Offsets {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        end: b3 + OUTPUTS,
    }
}

impl<T: Real> EnergyNet<T> {
    pub fn param_count_for(hidden: [usize; 2]) -> usize {
        offsets(hidden[0], hidden[1]).end
    }

    pub fn zeros(hidden: [usize; 2]) -> Self {
        Self {
            hidden,
            params: vec![T::zero(); Self::param_count_for(hidden)],
        }
    }

    /// Weights and biases drawn from U(−0.1, 0.1).
    pub fn init(hidden: [usize; 2], seed: u64) -> Self {
        let mut rng = seeds::rng_from(seed);
        let params = (0..Self::param_count_for(hidden))
            .map(|_| T::of(rng.random_range(-0.1..0.1)))
            .collect();
        Self { hidden, params }
    }

    pub fn from_params(hidden: [usize; 2], params: Vec<T>) -> Result<Self> {
        let expected = Self::param_count_for(hidden);
        if params.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(Self { hidden, params })
    }

    pub fn hidden(&self) -> [usize; 2] {
        self.hidden
    }

    pub fn layer_sizes(&self) -> [usize; 4] {
        [FEATURE_DIM, self.hidden[0], self.hidden[1], OUTPUTS]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<T> {
        self.params
    }

    /// Bound on `|E|` and `|E′|`: hidden activations lie in (−1, 1).
    pub fn output_bound(&self) -> [T; OUTPUTS] {
        let o = offsets(self.hidden[0], self.hidden[1]);
        let h2 = self.hidden[1];
        let mut bound = [T::zero(); OUTPUTS];
        for (k, b) in bound.iter_mut().enumerate() {
            let row = &self.params[o.w3 + k * h2..o.w3 + (k + 1) * h2];
            *b = row
                .iter()
                .fold(Float::abs(self.params[o.b3 + k]), |acc, w| {
                    acc + Float::abs(*w)
                });
        }
        bound
    }

    pub fn forward(&self, x: &[T; FEATURE_DIM]) -> (T, T) {
        let mut acts = Activations::default();
        self.forward_cached(x, &mut acts);
        (acts.output[0], acts.output[1])
    }

    pub fn forward_cached(&self, x: &[T; FEATURE_DIM], acts: &mut Activations<T>) {
        let [h1, h2] = self.hidden;
        let o = offsets(h1, h2);
        let p = &self.params;
        acts.hidden1.clear();
        acts.hidden1.extend((0..h1).map(|j| {
            let row = &p[o.w1 + j * FEATURE_DIM..o.w1 + (j + 1) * FEATURE_DIM];
            let z = row
                .iter()
                .zip(x)
                .fold(p[o.b1 + j], |acc, (w, v)| acc + *w * *v);
            Float::tanh(z)
        }));
        acts.hidden2.clear();
        for j in 0..h2 {
            let row = &p[o.w2 + j * h1..o.w2 + (j + 1) * h1];
            let z = row
                .iter()
                .zip(&acts.hidden1)
                .fold(p[o.b2 + j], |acc, (w, v)| acc + *w * *v);
            acts.hidden2.push(Float::tanh(z));
        }
        for k in 0..OUTPUTS {
            let row = &p[o.w3 + k * h2..o.w3 + (k + 1) * h2];
            acts.output[k] = row
                .iter()
                .zip(&acts.hidden2)
                .fold(p[o.b3 + k], |acc, (w, v)| acc + *w * *v);
        }
    }

    /// Gradient of `upstream · (E, E′)` with respect to every parameter, in canonical order.
    pub fn backward(&self, x: &[T; FEATURE_DIM], upstream: (T, T)) -> Vec<T> {
        let mut grad = vec![T::zero(); self.params.len()];
        let mut acts = Activations::default();
        self.forward_cached(x, &mut acts);
        self.backward_accumulate(x, &acts, upstream, &mut grad);
        grad
    }

    /// Adds the gradient of `upstream · (E, E′)` into `grad`, reusing cached activations.
    pub fn backward_accumulate(
        &self,
        x: &[T; FEATURE_DIM],
        acts: &Activations<T>,
        upstream: (T, T),
        grad: &mut [T],
    ) {
        let [h1, h2] = self.hidden;
        let o = offsets(h1, h2);
        let p = &self.params;
        assert_eq!(grad.len(), p.len(), "gradient buffer has wrong length");
        let g_out = [upstream.0, upstream.1];

        let mut g_z2 = vec![T::zero(); h2];
        for k in 0..OUTPUTS {
            if g_out[k] == T::zero() {
                continue;
            }
            grad[o.b3 + k] += g_out[k];
            for j in 0..h2 {
                grad[o.w3 + k * h2 + j] += g_out[k] * acts.hidden2[j];
                g_z2[j] += g_out[k] * p[o.w3 + k * h2 + j];
            }
        }
        for (j, g) in g_z2.iter_mut().enumerate() {
            let a = acts.hidden2[j];
            *g *= T::one() - a * a;
        }

        let mut g_z1 = vec![T::zero(); h1];
        for j in 0..h2 {
            let g = g_z2[j];
            grad[o.b2 + j] += g;
            for i in 0..h1 {
                grad[o.w2 + j * h1 + i] += g * acts.hidden1[i];
                g_z1[i] += g * p[o.w2 + j * h1 + i];
            }
        }
        for (i, g) in g_z1.iter_mut().enumerate() {
            let a = acts.hidden1[i];
            *g *= T::one() - a * a;
        }

        for i in 0..h1 {
            let g = g_z1[i];
            grad[o.b1 + i] += g;
            for (c, v) in x.iter().enumerate() {
                grad[o.w1 + i * FEATURE_DIM + c] += g * *v;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> EnergyNet<U> {
        EnergyNet {
            hidden: self.hidden,
            params: self
                .params
                .iter()
                .map(|v| U::of(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Optimizer state carried alongside a snapshot so training can resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub update_index: u64,
    pub velocity: Vec<f64>,
    /// Scene visits completed, skipped ones included, counted across epochs.
    #[serde(default)]
    pub position: u64,
}

/// On-disk model snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub ordering_version: u32,
    pub layer_sizes: [usize; 4],
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingState>,
}

impl ModelFile {
    pub fn from_net<T: Real>(net: &EnergyNet<T>, training: Option<TrainingState>) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            ordering_version: PARAM_ORDERING_VERSION,
            layer_sizes: net.layer_sizes(),
            params: net.params.iter().map(|v| v.to_f64_lossy()).collect(),
            training,
        }
    }

    pub fn to_net<T: Real>(&self) -> Result<EnergyNet<T>> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                kind: "model",
                found: self.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        if self.ordering_version != PARAM_ORDERING_VERSION {
            return Err(Error::FormatVersion {
                kind: "parameter ordering",
                found: self.ordering_version,
                expected: PARAM_ORDERING_VERSION,
            });
        }
        let [input, h1, h2, output] = self.layer_sizes;
        if input != FEATURE_DIM || output != OUTPUTS {
            return Err(Error::Config(format!(
                "unsupported layer sizes {:?}",
                self.layer_sizes
            )));
        }
        EnergyNet::from_params([h1, h2], self.params.iter().map(|v| T::of(*v)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}
