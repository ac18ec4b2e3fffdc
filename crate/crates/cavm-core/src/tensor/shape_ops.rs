//! Shape-manipulation ops: reshape, permute/transpose, concat, slice and
//! explicit broadcast. Backward passes route gradients to the originating
//! coordinates exactly.

use super::{numel, strides_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::elementwise::{broadcast_shape, broadcast_strides};

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        Tensor::op_result(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad_out.to_vec())]),
        )
    }

    /// Reorder axes; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument(format!(
                "permute axes {:?} invalid for rank {}",
                axes, nd
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let in_strides = strides_of(self.shape());
        let out_strides = strides_of(&out_shape);
        // out stride of input axis a = stride of out axis where a landed
        let mut gather_strides = vec![0usize; nd];
        for (out_axis, &in_axis) in axes.iter().enumerate() {
            gather_strides[out_axis] = in_strides[in_axis];
        }
        let n = self.numel();
        let mut data = vec![T::ZERO; n];
        let src = self.data();
        for (i, slot) in data.iter_mut().enumerate() {
            let mut rem = i;
            let mut isrc = 0;
            for d in 0..nd {
                let c = rem / out_strides[d];
                rem %= out_strides[d];
                isrc += c * gather_strides[d];
            }
            *slot = src[isrc];
        }
        let out_strides_cl = out_strides;
        let gather_cl = gather_strides;
        Tensor::op_result(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::ZERO; ctx.parents[0].numel()];
                for (i, &go) in ctx.grad_out.iter().enumerate() {
                    let mut rem = i;
                    let mut isrc = 0;
                    for d in 0..out_strides_cl.len() {
                        let c = rem / out_strides_cl[d];
                        rem %= out_strides_cl[d];
                        isrc += c * gather_cl[d];
                    }
                    g[isrc] += go;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut axes: Vec<usize> = (0..self.ndim()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::InvalidArgument(format!(
                "transpose axes ({a},{b}) out of range for rank {}",
                self.ndim()
            )));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let out = broadcast_shape("broadcast", self.shape(), shape)?;
        if out != shape {
            return Err(Error::shape(
                "broadcast",
                format!("{:?} does not broadcast to {:?}", self.shape(), shape),
            ));
        }
        let bstrides = broadcast_strides(shape, self.shape());
        let out_strides = strides_of(shape);
        let n = numel(shape);
        let src = self.data();
        let mut data = vec![T::ZERO; n];
        for (i, slot) in data.iter_mut().enumerate() {
            let mut rem = i;
            let mut isrc = 0;
            for d in 0..shape.len() {
                let c = rem / out_strides[d];
                rem %= out_strides[d];
                isrc += c * bstrides[d];
            }
            *slot = src[isrc];
        }
        let bstrides_cl = bstrides;
        let out_strides_cl = out_strides;
        Tensor::op_result(
            "broadcast",
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::ZERO; ctx.parents[0].numel()];
                for (i, &go) in ctx.grad_out.iter().enumerate() {
                    let mut rem = i;
                    let mut isrc = 0;
                    for d in 0..out_strides_cl.len() {
                        let c = rem / out_strides_cl[d];
                        rem %= out_strides_cl[d];
                        isrc += c * bstrides_cl[d];
                    }
                    g[isrc] += go;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let nd = parts[0].ndim();
        if axis >= nd {
            return Err(Error::InvalidArgument(format!("concat axis {axis} out of range")));
        }
        let mut out_shape = parts[0].shape().to_vec();
        for p in &parts[1..] {
            if p.ndim() != nd
                || (0..nd).any(|d| d != axis && p.shape()[d] != out_shape[d])
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {:?} and {:?}", parts[0].shape(), p.shape()),
                ));
            }
            out_shape[axis] += p.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![T::ZERO; numel(&out_shape)];
        let mut offset = 0;
        for p in parts {
            let ax = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * ax * inner;
                data[dst_base..dst_base + ax * inner]
                    .copy_from_slice(&src[src_base..src_base + ax * inner]);
            }
            offset += ax;
        }
        let part_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::op_result(
            "concat",
            out_shape,
            data,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut grads = Vec::with_capacity(ctx.parents.len());
                let mut offset = 0;
                for (p, &ax) in ctx.parents.iter().zip(&part_sizes) {
                    if !p.is_requires_grad() {
                        grads.push(None);
                        offset += ax;
                        continue;
                    }
                    let mut g = vec![T::ZERO; p.numel()];
                    for o in 0..outer {
                        let src_base = (o * total_axis + offset) * inner;
                        let dst_base = o * ax * inner;
                        g[dst_base..dst_base + ax * inner]
                            .copy_from_slice(&ctx.grad_out[src_base..src_base + ax * inner]);
                    }
                    grads.push(Some(g));
                    offset += ax;
                }
                grads
            }),
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!(
                    "slice axis {axis} [{start}..{}] out of range for {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let total_axis = self.shape()[axis];
        let mut data = vec![T::ZERO; numel(&out_shape)];
        let src = self.data();
        for o in 0..outer {
            let src_base = (o * total_axis + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        Tensor::op_result(
            "slice",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::ZERO; ctx.parents[0].numel()];
                for o in 0..outer {
                    let dst_base = (o * total_axis + start) * inner;
                    let src_base = o * len * inner;
                    g[dst_base..dst_base + len * inner]
                        .copy_from_slice(&ctx.grad_out[src_base..src_base + len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn reshape_transpose_round_trip_exact() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let back = x.transpose(0, 1).unwrap().transpose(0, 1).unwrap();
        assert_eq!(back.data(), x.data());
        let r = x.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(r.data(), x.data());
    }

    #[test]
    fn permute_3d() {
        // (2,1,3) -> (3,2,1)
        let x = Tensor::from_vec(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[3, 2, 1]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_slice_inverse() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![5.0, 6.0]).unwrap();
        let c = Tensor::concat(&[a.clone(), b], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        let a2 = c.slice(0, 0, 2).unwrap();
        assert_eq!(a2.data(), a.data());
        let b2 = c.slice(0, 2, 1).unwrap();
        assert_eq!(b2.data(), &[5.0, 6.0]);
    }

    #[test]
    fn concat_axis1() {
        let a = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![2.0, 9.0, 4.0, 9.0]).unwrap();
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
    }

    #[test]
    fn concat_slice_gradients_route_correctly() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![3.0, 4.0, 5.0]).unwrap();
        // loss touches only the slice that came from b
        let err = grad_check(
            |inp| {
                let c = Tensor::concat(&[inp[0].clone(), inp[1].clone()], 0)?;
                let s = c.slice(0, 2, 3)?;
                s.mul(&s)?.sum_all()
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn broadcast_to_grad() {
        let x = Tensor::from_vec(&[1, 2], vec![1.5, -0.5]).unwrap();
        let err = grad_check(
            |inp| {
                let b = inp[0].broadcast_to(&[3, 2])?;
                b.mul(&b)?.sum_all()
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn bad_slice_errors() {
        let x = Tensor::<f64>::zeros(&[3]);
        assert!(x.slice(0, 2, 2).is_err());
        assert!(x.slice(1, 0, 1).is_err());
    }
}
