//! Decomposition tokenizers and the reconstruction decoder.
//!
//! Three strided-convolution encoders produce token blocks at two shared
//! spatial scales: `f_DV` (dose-variant, 2 stages), `f_DI` (dose-invariant,
//! 4 stages) and `f_CE` (contrast, 4 stages, weight-shared across dose
//! levels). A 4-stage upsampling decoder `f_D` turns a (fine, coarse)
//! dose-variant token pair plus the dose-invariant skip tokens back into a
//! single-channel contrast image.

use crate::error::{Error, Result};
use crate::nn::{conv_forward, init_conv};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Downsampling factor of the fine token grid relative to the image.
pub const FINE_STRIDE: usize = 8;
/// Downsampling factor of the coarse token grid relative to the image.
pub const COARSE_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecConfig {
    /// Square image side; must be divisible by `COARSE_STRIDE`.
    pub image_size: usize,
    /// Channels of the model input x (contrast-free channels + tumor mask).
    pub in_channels: usize,
    /// First-stage width of the 4-stage encoders.
    pub base_channels: usize,
    /// Token embedding dim at the fine scale.
    pub fine_dim: usize,
    /// Token embedding dim at the coarse scale.
    pub coarse_dim: usize,
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(COARSE_STRIDE) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {COARSE_STRIDE}",
                self.image_size
            )));
        }
        if self.in_channels == 0
            || self.base_channels == 0
            || self.fine_dim == 0
            || self.coarse_dim == 0
        {
            return Err(Error::Config("codec dims must be positive".into()));
        }
        Ok(())
    }

    pub fn fine_grid(&self) -> usize {
        self.image_size / FINE_STRIDE
    }

    pub fn coarse_grid(&self) -> usize {
        self.image_size / COARSE_STRIDE
    }

    /// Tokens per block at the fine scale.
    pub fn n_fine(&self) -> usize {
        self.fine_grid() * self.fine_grid()
    }

    /// Tokens per block at the coarse scale.
    pub fn n_coarse(&self) -> usize {
        self.coarse_grid() * self.coarse_grid()
    }
}

/// `(C, gh, gw)` feature map -> `(gh*gw, C)` token block, row-major scan.
pub fn tokens_from_grid<T: Scalar>(feat: &Tensor<T>) -> Result<Tensor<T>> {
    if feat.ndim() != 3 {
        return Err(Error::shape(
            "tokens_from_grid",
            format!("need (C,gh,gw), got {:?}", feat.shape()),
        ));
    }
    let (c, gh, gw) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    feat.permute(&[1, 2, 0])?.reshape(&[gh * gw, c])
}

/// Inverse of [`tokens_from_grid`].
pub fn grid_from_tokens<T: Scalar>(tokens: &Tensor<T>, gh: usize, gw: usize) -> Result<Tensor<T>> {
    if tokens.ndim() != 2 || tokens.shape()[0] != gh * gw {
        return Err(Error::shape(
            "grid_from_tokens",
            format!("tokens {:?} do not form a {gh}x{gw} grid", tokens.shape()),
        ));
    }
    let c = tokens.shape()[1];
    tokens.reshape(&[gh, gw, c])?.permute(&[2, 0, 1])
}

fn check_input<T: Scalar>(op: &'static str, x: &Tensor<T>, channels: usize, cfg: &CodecConfig) -> Result<()> {
    if x.ndim() != 3 || x.shape()[0] != channels {
        return Err(Error::shape(
            op,
            format!("need ({channels},H,W), got {:?}", x.shape()),
        ));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::shape(
            op,
            format!("spatial dims {h}x{w} do not match configured size {}", cfg.image_size),
        ));
    }
    Ok(())
}

/// Register the weights of one 4-stage encoder under `prefix`.
fn init_encoder4<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut SplitMix64,
    prefix: &str,
    in_channels: usize,
    cfg: &CodecConfig,
) -> Result<()> {
    let widths = [
        cfg.base_channels,
        2 * cfg.base_channels,
        cfg.fine_dim,
        cfg.coarse_dim,
    ];
    let mut c_in = in_channels;
    for (i, &c_out) in widths.iter().enumerate() {
        init_conv(store, rng, &format!("{prefix}.stage{i}"), c_out, c_in, 3)?;
        c_in = c_out;
    }
    Ok(())
}

/// 4 stride-2 3x3 stages; the last two stage outputs are the (fine, coarse)
/// token blocks. Token-producing convs stay linear; silu feeds forward.
fn encoder4<T: Scalar>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let a0 = conv_forward(x, store, &format!("{prefix}.stage0"), 2, 1)?.silu()?;
    let a1 = conv_forward(&a0, store, &format!("{prefix}.stage1"), 2, 1)?.silu()?;
    let fine = conv_forward(&a1, store, &format!("{prefix}.stage2"), 2, 1)?;
    let coarse = conv_forward(&fine.silu()?, store, &format!("{prefix}.stage3"), 2, 1)?;
    Ok((tokens_from_grid(&fine)?, tokens_from_grid(&coarse)?))
}

/// Register every codec weight: f_DV, f_DI, f_CE and the decoder f_D.
pub fn init_codec<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut SplitMix64,
    cfg: &CodecConfig,
) -> Result<()> {
    cfg.validate()?;
    // f_DV: patchify to the fine grid in one stride-8 stage, then one
    // stride-2 stage down to the coarse grid.
    init_conv(store, rng, "fdv.stage0", cfg.fine_dim, cfg.in_channels, FINE_STRIDE)?;
    init_conv(store, rng, "fdv.stage1", cfg.coarse_dim, cfg.fine_dim, 3)?;
    init_encoder4(store, rng, "fdi", cfg.in_channels, cfg)?;
    init_encoder4(store, rng, "fce", 1, cfg)?;

    let (f, c, b) = (cfg.fine_dim, cfg.coarse_dim, cfg.base_channels);
    init_conv(store, rng, "dec.entry", c, 2 * c, 1)?; // fuse dv_coarse + di_coarse
    init_conv(store, rng, "dec.up1", f, c, 3)?; // -> fine grid
    init_conv(store, rng, "dec.fuse_fine", f, 3 * f, 1)?; // fuse dv_fine + di_fine
    init_conv(store, rng, "dec.up2", 2 * b, f, 3)?;
    init_conv(store, rng, "dec.up3", b, 2 * b, 3)?;
    init_conv(store, rng, "dec.up4", b, b, 3)?;
    init_conv(store, rng, "dec.final", 1, b, 1)?;
    Ok(())
}

/// Dose-variant tokenizer f_DV: 2 stages, both outputs become tokens.
pub fn encode_dose_variant<T: Scalar>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &CodecConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_input("encode_dose_variant", x, cfg.in_channels, cfg)?;
    let fine = conv_forward(x, store, "fdv.stage0", FINE_STRIDE, 0)?;
    let coarse = conv_forward(&fine.silu()?, store, "fdv.stage1", 2, 1)?;
    Ok((tokens_from_grid(&fine)?, tokens_from_grid(&coarse)?))
}

/// Dose-invariant tokenizer f_DI: 4 stages.
pub fn encode_dose_invariant<T: Scalar>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &CodecConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_input("encode_dose_invariant", x, cfg.in_channels, cfg)?;
    encoder4(x, store, "fdi")
}

/// Shared contrast tokenizer f_CE: 4 stages over a single-channel image;
/// the same weights serve every dose level.
pub fn encode_contrast<T: Scalar>(
    y: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &CodecConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_input("encode_contrast", y, 1, cfg)?;
    encoder4(y, store, "fce")
}

fn check_tokens<T: Scalar>(op: &'static str, t: &Tensor<T>, n: usize, dim: usize) -> Result<()> {
    if t.shape() != [n, dim] {
        return Err(Error::shape(
            op,
            format!("token block {:?}, expected ({n},{dim})", t.shape()),
        ));
    }
    Ok(())
}

/// Reconstruction decoder f_D. Dose-variant tokens enter at the coarse and
/// fine grids; dose-invariant tokens are fused by concatenation + 1x1 conv
/// at the matching resolutions; four upsampling stages recover image size.
pub fn decode<T: Scalar>(
    dose_invariant: (&Tensor<T>, &Tensor<T>),
    dose_variant: (&Tensor<T>, &Tensor<T>),
    store: &ParamStore<T>,
    cfg: &CodecConfig,
) -> Result<Tensor<T>> {
    let (di_fine, di_coarse) = dose_invariant;
    let (dv_fine, dv_coarse) = dose_variant;
    check_tokens("decode", di_fine, cfg.n_fine(), cfg.fine_dim)?;
    check_tokens("decode", dv_fine, cfg.n_fine(), cfg.fine_dim)?;
    check_tokens("decode", di_coarse, cfg.n_coarse(), cfg.coarse_dim)?;
    check_tokens("decode", dv_coarse, cfg.n_coarse(), cfg.coarse_dim)?;
    let (gf, gc) = (cfg.fine_grid(), cfg.coarse_grid());

    let entry = Tensor::concat(
        &[grid_from_tokens(dv_coarse, gc, gc)?, grid_from_tokens(di_coarse, gc, gc)?],
        0,
    )?;
    let h = conv_forward(&entry, store, "dec.entry", 1, 0)?.silu()?;
    let h = conv_forward(&h.upsample2x()?, store, "dec.up1", 1, 1)?.silu()?;
    let fused = Tensor::concat(
        &[h, grid_from_tokens(dv_fine, gf, gf)?, grid_from_tokens(di_fine, gf, gf)?],
        0,
    )?;
    let h = conv_forward(&fused, store, "dec.fuse_fine", 1, 0)?.silu()?;
    let h = conv_forward(&h.upsample2x()?, store, "dec.up2", 1, 1)?.silu()?;
    let h = conv_forward(&h.upsample2x()?, store, "dec.up3", 1, 1)?.silu()?;
    let h = conv_forward(&h.upsample2x()?, store, "dec.up4", 1, 1)?.silu()?;
    conv_forward(&h, store, "dec.final", 1, 0)
}
