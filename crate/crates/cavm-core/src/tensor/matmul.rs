//! Matrix multiplication over the last two axes, rank 2 or batched rank 3.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// `(m,k) x (k,n)` or `(b,m,k) x (b,k,n)`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self, other);
        let (ash, bsh) = (a.shape(), b.shape());
        if a.ndim() != b.ndim() || !(a.ndim() == 2 || a.ndim() == 3) {
            return Err(Error::shape(
                "matmul",
                format!("ranks must both be 2 or 3, got {:?} and {:?}", ash, bsh),
            ));
        }
        let batch = if a.ndim() == 3 { ash[0] } else { 1 };
        let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if ka != kb || (a.ndim() == 3 && bsh[0] != batch) {
            return Err(Error::shape(
                "matmul",
                format!("incompatible shapes {:?} and {:?}", ash, bsh),
            ));
        }
        let mut out_shape = ash.to_vec();
        let last = out_shape.len() - 1;
        out_shape[last] = n;
        let mut data = vec![T::ZERO; batch * m * n];
        for bi in 0..batch {
            mm(
                &a.data()[bi * m * ka..(bi + 1) * m * ka],
                &b.data()[bi * ka * n..(bi + 1) * ka * n],
                m,
                ka,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let k = ka;
        Tensor::op_result(
            "matmul",
            out_shape,
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |ctx| {
                let a = &ctx.parents[0];
                let b = &ctx.parents[1];
                // dA = G @ B^T, dB = A^T @ G
                let ga = if a.is_requires_grad() {
                    let mut g = vec![T::ZERO; a.numel()];
                    for bi in 0..batch {
                        let gb = &ctx.grad_out[bi * m * n..(bi + 1) * m * n];
                        let bd = &b.data()[bi * k * n..(bi + 1) * k * n];
                        let out = &mut g[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = gb[i * n + j];
                                for kk in 0..k {
                                    out[i * k + kk] += gv * bd[kk * n + j];
                                }
                            }
                        }
                    }
                    Some(g)
                } else {
                    None
                };
                let gbv = if b.is_requires_grad() {
                    let mut g = vec![T::ZERO; b.numel()];
                    for bi in 0..batch {
                        let gb = &ctx.grad_out[bi * m * n..(bi + 1) * m * n];
                        let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
                        let out = &mut g[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            for kk in 0..k {
                                let av = ad[i * k + kk];
                                let orow = &mut out[kk * n..(kk + 1) * n];
                                let grow = &gb[i * n..(i + 1) * n];
                                for (o, &gv) in orow.iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                    Some(g)
                } else {
                    None
                };
                vec![ga, gbv]
            }),
        )
    }
}
