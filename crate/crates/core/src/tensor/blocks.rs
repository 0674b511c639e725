//! Parameterized building blocks over the tape: linear layers, MLPs,
//! feed-forward networks, scaled dot-product attention, and layer norm with
//! learned affine.
//!
//! Each block owns only [`ParamId`]s; the same block can be applied on many
//! tapes (and many times on one tape, sharing gradients).

use rand::Rng;

use super::{NodeId, ParamId, ParamSet, Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// x·W + b with W Xavier-initialized and b zero.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        Ok(Linear {
            weight: params.add_xavier(&format!("{name}.weight"), d_in, d_out, rng)?,
            bias: params.add_zeros(&format!("{name}.bias"), 1, d_out)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> NodeId {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let wx = tape.matmul(x, w);
        tape.add_row(wx, b)
    }
}

/// Affine chain with an activation between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    /// `dims` = [d_in, hidden..., d_out]; needs at least one layer.
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            layers.push(Linear::init(params, &format!("{name}.{i}"), pair[0], pair[1], rng)?);
        }
        Ok(Mlp { layers, activation })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, params, h);
            if i != last {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }
}

/// Two-layer feed-forward network with 4x hidden expansion and ReLU.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    lift: Linear,
    lower: Linear,
}

impl Ffn {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        Ok(Ffn {
            lift: Linear::init(params, &format!("{name}.lift"), dim, 4 * dim, rng)?,
            lower: Linear::init(params, &format!("{name}.lower"), 4 * dim, dim, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> NodeId {
        let hidden = self.lift.apply(tape, params, x);
        let active = tape.relu(hidden);
        self.lower.apply(tape, params, active)
    }
}

/// softmax(q·kᵀ/√scale_dim)·v on already-projected inputs.
pub fn attention(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId, scale_dim: usize) -> NodeId {
    assert_eq!(tape.value(q).cols(), tape.value(k).cols(), "q/k width mismatch");
    assert_eq!(tape.value(k).rows(), tape.value(v).rows(), "k/v row mismatch");
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale(scores, 1.0 / (scale_dim as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// Learned Q/K/V projections feeding scaled dot-product attention. Queries
/// and keys/values may come from different sources (cross-attention).
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    dim: usize,
}

impl AttentionBlock {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        d_query_in: usize,
        d_kv_in: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        Ok(AttentionBlock {
            query: Linear::init(params, &format!("{name}.q"), d_query_in, dim, rng)?,
            key: Linear::init(params, &format!("{name}.k"), d_kv_in, dim, rng)?,
            value: Linear::init(params, &format!("{name}.v"), d_kv_in, dim, rng)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        query_in: NodeId,
        kv_in: NodeId,
    ) -> NodeId {
        let q = self.query.apply(tape, params, query_in);
        let k = self.key.apply(tape, params, kv_in);
        let v = self.value.apply(tape, params, kv_in);
        attention(tape, q, k, v, self.dim)
    }

    /// Variant with an extra additive term on the keys (position encoding).
    pub fn apply_with_key_bias(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        query_in: NodeId,
        kv_in: NodeId,
        key_bias: NodeId,
    ) -> NodeId {
        let q = self.query.apply(tape, params, query_in);
        let k_base = self.key.apply(tape, params, kv_in);
        let k = tape.add(k_base, key_bias);
        let v = self.value.apply(tape, params, kv_in);
        attention(tape, q, k, v, self.dim)
    }
}

/// Row layer norm followed by learned gain (init 1) and bias (init 0).
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn init(params: &mut ParamSet, name: &str, dim: usize) -> Result<Self, TensorError> {
        Ok(LayerNorm {
            gain: params.add_filled(&format!("{name}.gain"), 1, dim, 1.0)?,
            bias: params.add_zeros(&format!("{name}.bias"), 1, dim)?,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> NodeId {
        let normed = tape.layer_norm_rows(x, self.eps);
        let gain = tape.param(params, self.gain);
        let bias = tape.param(params, self.bias);
        let scaled = tape.mul_row(normed, gain);
        tape.add_row(scaled, bias)
    }
}
