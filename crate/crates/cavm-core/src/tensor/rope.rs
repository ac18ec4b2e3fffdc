//! Rotary position embedding as a primitive op.
//!
//! Consecutive coordinate pairs (2j, 2j+1) of each head vector are rotated
//! by `pos * base^(-2j/head_dim)`. The backward pass rotates the incoming
//! gradient by the opposite angle, the exact adjoint of a rotation.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn angles(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|j| base.powf(-2.0 * j as f64 / head_dim as f64))
        .collect()
}

fn rotate<T: Scalar>(
    src: &[T],
    shape: &[usize],
    positions: &[usize],
    freqs: &[f64],
    invert: bool,
) -> Vec<T> {
    let (seq, heads, hd) = (shape[0], shape[1], shape[2]);
    let mut out = vec![T::ZERO; src.len()];
    for (s, &position) in positions.iter().enumerate().take(seq) {
        let pos = position as f64;
        for h in 0..heads {
            let base = (s * heads + h) * hd;
            for (j, &f) in freqs.iter().enumerate() {
                let theta = if invert { -pos * f } else { pos * f };
                let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
                let a = src[base + 2 * j];
                let b = src[base + 2 * j + 1];
                out[base + 2 * j] = a * cos - b * sin;
                out[base + 2 * j + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

/// Apply RoPE to a `(seq, heads, head_dim)` tensor.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        return Err(Error::shape(
            "rope",
            format!("need (seq, heads, head_dim), got {:?}", x.shape()),
        ));
    }
    let (seq, hd) = (x.shape()[0], x.shape()[2]);
    if hd % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "rope requires an even head_dim, got {hd}"
        )));
    }
    if positions.len() != seq {
        return Err(Error::shape(
            "rope",
            format!("{} positions for sequence length {}", positions.len(), seq),
        ));
    }
    let freqs = angles(hd, base);
    let data = rotate(x.data(), x.shape(), positions, &freqs, false);
    let shape = x.shape().to_vec();
    let positions = positions.to_vec();
    Tensor::op_result(
        "rope",
        shape.clone(),
        data,
        vec![x.clone()],
        Box::new(move |ctx| {
            vec![Some(rotate(ctx.grad_out, &shape, &positions, &freqs, true))]
        }),
    )
}
