//! Sum/mean reductions, full and per-axis (keepdim).

use super::{strides_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tensor<T> {
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let s: T = self.data().iter().copied().sum();
        Tensor::op_result(
            "sum",
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(|ctx| {
                let g = ctx.grad_out[0];
                vec![Some(vec![g; ctx.parents[0].numel()])]
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        if self.numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let inv = T::ONE / T::from_f64(self.numel() as f64);
        self.sum_all()?.scale(inv)
    }

    /// Sum along one axis, keeping it as extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis {axis} out of range for rank {}",
                self.ndim()
            )));
        }
        let mut out_shape = self.shape().to_vec();
        let ax_len = out_shape[axis];
        out_shape[axis] = 1;
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut data = vec![T::ZERO; outer * inner];
        let src = self.data();
        for o in 0..outer {
            for a in 0..ax_len {
                let base = (o * ax_len + a) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        Tensor::op_result(
            "sum_axis",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::ZERO; ctx.parents[0].numel()];
                for o in 0..outer {
                    let grow = &ctx.grad_out[o * inner..(o + 1) * inner];
                    for a in 0..ax_len {
                        let base = (o * ax_len + a) * inner;
                        g[base..base + inner].copy_from_slice(grow);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean along one axis, keeping it as extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let n = self.shape().get(axis).copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::InvalidArgument("mean over empty axis".into()));
        }
        self.sum_axis(axis)?.scale(T::ONE / T::from_f64(n as f64))
    }

    pub(crate) fn _strides(&self) -> Vec<usize> {
        strides_of(self.shape())
    }
}
