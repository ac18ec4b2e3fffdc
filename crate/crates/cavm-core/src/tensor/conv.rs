//! 2D strided convolution and nearest-neighbor upsampling.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tensor<T> {
    /// Convolve `(C_in, H, W)` with `(C_out, C_in, kh, kw)`, zero padding.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        if self.ndim() != 3 || weight.ndim() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("need (C,H,W) and (O,C,kh,kw), got {:?} and {:?}", self.shape(), weight.shape()),
            ));
        }
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (c_out, wc_in, kh, kw) =
            (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        if c_in != wc_in {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != weight channels {}", c_in, wc_in),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let src = self.data();
        let wd = weight.data();
        let mut data = vec![T::ZERO; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::ZERO;
                    for ci in 0..c_in {
                        let wbase = ((co * c_in + ci) * kh) * kw;
                        let ibase = ci * h * w;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = ibase + iy as usize * w;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += src[irow + ix as usize] * wd[wrow + kx];
                            }
                        }
                    }
                    data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::op_result(
            "conv2d",
            vec![c_out, oh, ow],
            data,
            vec![self.clone(), weight.clone()],
            Box::new(move |ctx| {
                let input = &ctx.parents[0];
                let weight = &ctx.parents[1];
                let src = input.data();
                let wd = weight.data();
                let g = ctx.grad_out;
                let mut gin = if input.is_requires_grad() {
                    Some(vec![T::ZERO; input.numel()])
                } else {
                    None
                };
                let mut gw = if weight.is_requires_grad() {
                    Some(vec![T::ZERO; weight.numel()])
                } else {
                    None
                };
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(co * oh + oy) * ow + ox];
                            for ci in 0..c_in {
                                let wbase = ((co * c_in + ci) * kh) * kw;
                                let ibase = ci * h * w;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let irow = ibase + iy as usize * w;
                                    let wrow = wbase + ky * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        if let Some(gi) = gin.as_mut() {
                                            gi[irow + ix as usize] += gv * wd[wrow + kx];
                                        }
                                        if let Some(gwv) = gw.as_mut() {
                                            gwv[wrow + kx] += gv * src[irow + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gin, gw]
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of `(C, H, W)`.
    pub fn upsample2x(&self) -> Result<Tensor<T>> {
        if self.ndim() != 3 {
            return Err(Error::shape(
                "upsample2x",
                format!("need (C,H,W), got {:?}", self.shape()),
            ));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let src = self.data();
        let mut data = vec![T::ZERO; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ci in 0..c {
            for y in 0..oh {
                let sy = y / 2;
                let srow = (ci * h + sy) * w;
                let drow = (ci * oh + y) * ow;
                for x in 0..ow {
                    data[drow + x] = src[srow + x / 2];
                }
            }
        }
        Tensor::op_result(
            "upsample2x",
            vec![c, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = vec![T::ZERO; ctx.parents[0].numel()];
                for ci in 0..c {
                    for y in 0..oh {
                        let sy = y / 2;
                        let srow = (ci * h + sy) * w;
                        let drow = (ci * oh + y) * ow;
                        for x in 0..ow {
                            g[srow + x / 2] += ctx.grad_out[drow + x];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}
