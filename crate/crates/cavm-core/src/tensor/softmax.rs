//! Softmax along the last axis with an optional boolean permission mask.
//!
//! Masked-out positions are excluded from the computation entirely and get
//! exactly zero weight, which realizes additive -inf masking without ever
//! materializing non-finite values.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tensor<T> {
    /// Softmax over the last axis. `allowed`, when given, has shape
    /// `(rows, cols)` matching the last two axes of `self` and is broadcast
    /// over any leading axes. Rows with no allowed position are an error.
    pub fn softmax_masked(&self, allowed: Option<(&[bool], usize, usize)>) -> Result<Tensor<T>> {
        let nd = self.ndim();
        if nd == 0 {
            return Err(Error::shape("softmax", "scalar input"));
        }
        let cols = self.shape()[nd - 1];
        let (mask, rows) = match allowed {
            Some((m, r, c)) => {
                if c != cols || nd < 2 || self.shape()[nd - 2] != r {
                    return Err(Error::shape(
                        "softmax",
                        format!(
                            "mask {}x{} incompatible with input {:?}",
                            r, c, self.shape()
                        ),
                    ));
                }
                if m.len() != r * c {
                    return Err(Error::shape("softmax", "mask buffer length mismatch"));
                }
                (Some(m.to_vec()), r)
            }
            None => (None, 1),
        };
        let n_rows_total = self.numel() / cols;
        let src = self.data();
        let mut data = vec![T::ZERO; self.numel()];
        for row in 0..n_rows_total {
            let mask_row = mask.as_ref().map(|m| {
                let r = row % rows;
                &m[r * cols..(r + 1) * cols]
            });
            let x = &src[row * cols..(row + 1) * cols];
            let y = &mut data[row * cols..(row + 1) * cols];
            let mut max = T::NEG_INFINITY;
            let mut any = false;
            for (j, &v) in x.iter().enumerate() {
                if mask_row.is_none_or(|m| m[j]) {
                    any = true;
                    max = max.max(v);
                }
            }
            if !any {
                return Err(Error::InvalidArgument(
                    "softmax row has every position masked".into(),
                ));
            }
            let mut sum = T::ZERO;
            for (j, &v) in x.iter().enumerate() {
                if mask_row.is_none_or(|m| m[j]) {
                    let e = (v - max).exp();
                    y[j] = e;
                    sum += e;
                }
            }
            let inv = T::ONE / sum;
            for v in y.iter_mut() {
                *v = *v * inv;
            }
        }
        Tensor::op_result(
            "softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let y = ctx.out.data();
                let n_rows = y.len() / cols;
                let mut g = vec![T::ZERO; y.len()];
                for row in 0..n_rows {
                    let yr = &y[row * cols..(row + 1) * cols];
                    let gr = &ctx.grad_out[row * cols..(row + 1) * cols];
                    let mut dot = T::ZERO;
                    for (yv, gv) in yr.iter().zip(gr) {
                        dot += *yv * *gv;
                    }
                    let out = &mut g[row * cols..(row + 1) * cols];
                    for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = *yv * (*gv - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        self.softmax_masked(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn fully_masked_position_gets_zero() {
        // softmax([0,0], mask [allowed, masked]) -> [1, 0]
        let x = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let allowed = [true, false];
        let y = x.softmax_masked(Some((&allowed, 1, 2))).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn rows_sum_to_one() {
        let x = Tensor::from_vec(&[2, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0]).unwrap();
        let allowed = [true, true, false, true, true, true];
        let y = x.softmax_masked(Some((&allowed, 2, 3))).unwrap();
        for row in 0..2 {
            let s: f64 = y.data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn all_masked_row_errors() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let allowed = [false, false];
        assert!(x.softmax_masked(Some((&allowed, 1, 2))).is_err());
    }

    #[test]
    fn unmasked_matches_plain_softmax() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let a = x.softmax_lastdim().unwrap();
        let allowed = [true; 3];
        let b = x.softmax_masked(Some((&allowed, 1, 3))).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn masked_softmax_grad_check() {
        let x = Tensor::from_vec(&[2, 4], vec![0.3, -0.5, 1.2, 0.0, 2.0, 1.0, -1.0, 0.5]).unwrap();
        let allowed = [true, true, false, true, true, false, true, true];
        let w = Tensor::from_vec(&[2, 4], vec![0.7, -0.3, 0.2, 1.1, -0.4, 0.9, 0.6, -1.2]).unwrap();
        let err = grad_check(
            |inp| inp[0].softmax_masked(Some((&allowed, 2, 4)))?.mul(&w)?.sum_all(),
            std::slice::from_ref(&x),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn broadcast_over_heads() {
        // (2 heads, 2 rows, 2 cols) with a (2,2) mask
        let x = Tensor::from_vec(&[2, 2, 2], vec![0.0; 8]).unwrap();
        let allowed = [true, false, true, true];
        let y = x.softmax_masked(Some((&allowed, 2, 2))).unwrap();
        for h in 0..2 {
            let base = h * 4;
            assert_eq!(&y.data()[base..base + 4], &[1.0, 0.0, 0.5, 0.5]);
        }
    }
}
