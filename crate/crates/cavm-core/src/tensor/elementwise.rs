//! Elementwise ops. Binary ops broadcast with trailing-axis alignment, the
//! single broadcasting rule used across the crate.

use super::{numel, strides_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Broadcast shape of two operands under trailing-axis alignment.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(op, format!("cannot broadcast {:?} with {:?}", a, b)));
        };
    }
    Ok(out)
}

/// Per-axis strides of `shape` viewed as `out_shape`, zero on broadcast axes.
pub(crate) fn broadcast_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// Visit every output coordinate with the linear indices into both operands.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    let sa = broadcast_strides(out_shape, a_shape);
    let sb = broadcast_strides(out_shape, b_shape);
    let out_strides = strides_of(out_shape);
    for i in 0..n {
        let mut ia = 0;
        let mut ib = 0;
        let mut rem = i;
        for (d, os) in out_strides.iter().enumerate() {
            let c = rem / os;
            rem %= os;
            ia += c * sa[d];
            ib += c * sb[d];
        }
        visit(i, ia, ib);
    }
}

fn binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: fn(T, T) -> T,
    // (a_val, b_val, grad) -> (dL/da contribution, dL/db contribution)
    df: fn(T, T, T) -> (T, T),
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let mut data = vec![T::ZERO; numel(&out_shape)];
    if a.shape() == b.shape() {
        for (o, (&x, &y)) in data.iter_mut().zip(a.data().iter().zip(b.data())) {
            *o = f(x, y);
        }
    } else {
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, a.shape(), b.shape(), |i, ia, ib| {
            data[i] = f(ad[ia], bd[ib]);
        });
    }
    let shape_cl = out_shape.clone();
    Tensor::op_result(
        op,
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let a = &ctx.parents[0];
            let b = &ctx.parents[1];
            let mut ga = if a.is_requires_grad() { Some(vec![T::ZERO; a.numel()]) } else { None };
            let mut gb = if b.is_requires_grad() { Some(vec![T::ZERO; b.numel()]) } else { None };
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&shape_cl, a.shape(), b.shape(), |i, ia, ib| {
                let (da, db) = df(ad[ia], bd[ib], ctx.grad_out[i]);
                if let Some(g) = ga.as_mut() {
                    g[ia] += da;
                }
                if let Some(g) = gb.as_mut() {
                    g[ib] += db;
                }
            });
            vec![ga, gb]
        }),
    )
}

fn unary<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    f: fn(T) -> T,
    // (x_val, out_val, grad) -> dL/dx
    df: fn(T, T, T) -> T,
) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::op_result(
        op,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |ctx| {
            let xd = ctx.parents[0].data();
            let od = ctx.out.data();
            let g = ctx
                .grad_out
                .iter()
                .enumerate()
                .map(|(i, &go)| df(xd[i], od[i], go))
                .collect();
            vec![Some(g)]
        }),
    )
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("add", self, other, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("sub", self, other, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("mul", self, other, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&v| v * c).collect();
        Tensor::op_result(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(ctx.grad_out.iter().map(|&g| g * c).collect())]),
        )
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.scale(-T::ONE)
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&v| v + c).collect();
        Tensor::op_result(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad_out.to_vec())]),
        )
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        unary("exp", self, |x| x.exp(), |_, o, g| g * o)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        unary("sqrt", self, |x| x.sqrt(), |_, o, g| {
            g * (T::ONE / (T::from_f64(2.0) * o))
        })
    }

    /// Elementwise power with a fixed exponent.
    pub fn powf(&self, p: f64) -> Result<Tensor<T>> {
        let pe = T::from_f64(p);
        let data: Vec<T> = self.data().iter().map(|&v| v.powf(pe)).collect();
        Tensor::op_result(
            "powf",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let xd = ctx.parents[0].data();
                let g = ctx
                    .grad_out
                    .iter()
                    .enumerate()
                    .map(|(i, &go)| go * pe * xd[i].powf(pe - T::ONE))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        unary(
            "sigmoid",
            self,
            |x| T::ONE / (T::ONE + (-x).exp()),
            |_, o, g| g * o * (T::ONE - o),
        )
    }

    pub fn silu(&self) -> Result<Tensor<T>> {
        unary(
            "silu",
            self,
            |x| x / (T::ONE + (-x).exp()),
            |x, _, g| {
                let s = T::ONE / (T::ONE + (-x).exp());
                g * (s + x * s * (T::ONE - s))
            },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor<T>> {
        let s = T::from_f64(slope);
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { v * s })
            .collect();
        Tensor::op_result(
            "leaky_relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let xd = ctx.parents[0].data();
                let g = ctx
                    .grad_out
                    .iter()
                    .enumerate()
                    .map(|(i, &go)| if xd[i] > T::ZERO { go } else { go * s })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&self) -> Result<Tensor<T>> {
        unary(
            "softplus",
            self,
            |x| x.max(T::ZERO) + (-x.abs()).exp().ln_1p(),
            |x, _, g| g * (T::ONE / (T::ONE + (-x).exp())),
        )
    }

    pub fn abs(&self) -> Result<Tensor<T>> {
        unary("abs", self, |x| x.abs(), |x, _, g| {
            if x > T::ZERO {
                g
            } else if x < T::ZERO {
                -g
            } else {
                T::ZERO
            }
        })
    }
}
