use crate::numerics::kernels::{dot, softmax_in_place};
use crate::numerics::Tensor;

use super::{AttentionError, AttentionInputs};

pub const ROPE_BASE: f64 = 10_000.0;

/// `softmax(QKᵀ/√d_k)V`, one query row at a time so memory stays `O(N)`.
pub fn softmax_attention(inputs: &AttentionInputs, causal: bool) -> Result<Tensor, AttentionError> {
    let (n, dk, dv) = inputs.dims()?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; n * dv];
    let mut weights = vec![0.0; n];
    for t in 0..n {
        let valid = if causal { t + 1 } else { n };
        let qt = inputs.q.row(t);
        for (j, w) in weights[..valid].iter_mut().enumerate() {
            *w = dot(qt, inputs.k.row(j)) * scale;
        }
        softmax_in_place(&mut weights[..valid], valid);
        let ot = &mut out[t * dv..(t + 1) * dv];
        for (j, w) in weights[..valid].iter().enumerate() {
            for (o, x) in ot.iter_mut().zip(inputs.v.row(j)) {
                *o += w * x;
            }
        }
    }
    Ok(Tensor::new(vec![n, dv], out)?)
}

/// Rotary position encoding over consecutive channel pairs of every head.
/// `inverse` applies the opposite rotation (used by the backward pass).
pub fn rope_in_place(row: &mut [f64], position: usize, head_dim: usize, inverse: bool) {
    let pairs = head_dim / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for head in row.chunks_exact_mut(head_dim) {
        for i in 0..pairs {
            let theta = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = (sign * position as f64 * theta).sin_cos();
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}
