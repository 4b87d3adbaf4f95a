//! Spatial attention over the backbone's split-point feature map.
//!
//! Each grid cell's feature is reduced to a scalar by a pair of 1x1 convs,
//! combined with the previous LSTM hidden state through a small tanh layer,
//! and scored; a softmax over the whole grid yields the map that reweights
//! the feature columns before the backbone tail runs.

use rand_chacha::ChaCha8Rng;

use crate::nn::{scaled_uniform_init, uniform_init, LINEAR_GAIN};
use crate::tensor::{Element, Graph, Result, Tensor, TensorError};

/// `phi1`/`phi2` are 1x1 conv kernels (`[d,d,1,1]`, `[1,d,1,1]`); the rest
/// implement score(i,j) = W_a tanh(W_az m_ij + W_ah h + b_azh) + b_a with
/// attention width `k`.
#[derive(Clone, Debug)]
pub struct SpatialAttnParams<E: Element> {
    pub phi1: Tensor<E>,
    pub phi2: Tensor<E>,
    pub w_a_z: Tensor<E>,
    pub w_a_h: Tensor<E>,
    pub b_a_zh: Tensor<E>,
    pub w_a: Tensor<E>,
    pub b_a: Tensor<E>,
}

impl<E: Element> SpatialAttnParams<E> {
    pub fn attn_hidden(&self) -> usize {
        self.b_a_zh.shape()[0]
    }
}

pub fn init_spatial<E: Element>(
    d: usize,
    hidden: usize,
    attn_hidden: usize,
    rng: &mut ChaCha8Rng,
) -> SpatialAttnParams<E> {
    SpatialAttnParams {
        phi1: scaled_uniform_init(&[d, d, 1, 1], d, LINEAR_GAIN, rng),
        phi2: scaled_uniform_init(&[1, d, 1, 1], d, LINEAR_GAIN, rng),
        w_a_z: uniform_init(&[attn_hidden, 1], 1, rng),
        w_a_h: scaled_uniform_init(&[attn_hidden, hidden], hidden, LINEAR_GAIN, rng),
        b_a_zh: Tensor::zeros(&[attn_hidden]),
        w_a: scaled_uniform_init(&[1, attn_hidden], attn_hidden, LINEAR_GAIN, rng),
        b_a: Tensor::zeros(&[1]),
    }
}

/// Unnormalized attention scores, shape `[g, g]`.
pub fn spatial_scores<E: Element>(
    g: &mut Graph<E>,
    z_l: &Tensor<E>,
    h_prev: &Tensor<E>,
    p: &SpatialAttnParams<E>,
) -> Result<Tensor<E>> {
    if z_l.shape().len() != 3 || z_l.shape()[1] != z_l.shape()[2] {
        return Err(TensorError::ShapeMismatch {
            op: "spatial_scores",
            lhs: z_l.shape().to_vec(),
            rhs: vec![p.phi1.shape()[1], 0, 0],
        });
    }
    let grid = z_l.shape()[1];
    let cells = grid * grid;
    // Scalar summary per cell: m = phi2(phi1(z_l)), shape [1, g, g].
    let m1 = g.conv2d(z_l, &p.phi1, 1, 0)?;
    let m = g.conv2d(&m1, &p.phi2, 1, 0)?;
    let m_col = g.reshape(&m, &[cells, 1])?;
    // Per-cell term [cells, k] plus a shared hidden-state term [k],
    // broadcast over cells.
    let w_a_z_row = g.transpose(&p.w_a_z)?;
    let zm = g.matmul(&m_col, &w_a_z_row)?;
    let hm = g.matmul(&p.w_a_h, h_prev)?;
    let hb = g.add(&hm, &p.b_a_zh)?;
    let pre = g.add(&zm, &hb)?;
    let t = g.tanh(&pre)?;
    let w_a_col = g.transpose(&p.w_a)?;
    let scores = g.matmul(&t, &w_a_col)?;
    let scores = g.add(&scores, &p.b_a)?;
    g.reshape(&scores, &[grid, grid])
}

/// Softmax of the scores over the whole grid; entries are positive and sum
/// to one.
pub fn spatial_weights<E: Element>(g: &mut Graph<E>, scores: &Tensor<E>) -> Result<Tensor<E>> {
    let grid = scores.shape()[0];
    let flat = g.reshape(scores, &[grid * grid])?;
    let soft = g.softmax(&flat, 0)?;
    g.reshape(&soft, &[grid, grid])
}

/// Reweight every feature column by its cell's attention weight.
pub fn apply_spatial<E: Element>(
    g: &mut Graph<E>,
    z_l: &Tensor<E>,
    alpha: &Tensor<E>,
) -> Result<Tensor<E>> {
    if z_l.shape().len() != 3 || alpha.shape() != &z_l.shape()[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "apply_spatial",
            lhs: z_l.shape().to_vec(),
            rhs: alpha.shape().to_vec(),
        });
    }
    let a = g.reshape(alpha, &[1, alpha.shape()[0], alpha.shape()[1]])?;
    g.mul(z_l, &a)
}

/// The uniform map used while spatial attention is bypassed: every cell
/// weighs 1/(g*g), a valid attention map.
pub fn uniform_alpha<E: Element>(grid: usize) -> Tensor<E> {
    let cells = grid * grid;
    Tensor::full(&[grid, grid], E::from_f64(1.0 / cells as f64))
}
