//! Region-split image fidelity metrics: PSNR and windowed SSIM evaluated
//! over a tumor region (the mask dilated to cover the enhancing rim) and
//! the remaining healthy brain tissue, aggregated into a report.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Euclidean dilation radius applied to the tumor mask before metrics.
pub const TUMOR_DILATION_RADIUS: f64 = 2.0;

/// Reduce `(H,W)` or `(1,H,W)` to `(h, w, values)`.
fn as_image<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let shape = t.shape();
    let (h, w) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 if shape[0] == 1 => (shape[1], shape[2]),
        _ => {
            return Err(Error::shape(op, format!("need (H,W) or (1,H,W), got {shape:?}")));
        }
    };
    Ok((h, w, t.data().iter().map(|v| v.to_f64()).collect()))
}

fn as_mask<T: Scalar>(op: &'static str, t: &Tensor<T>, h: usize, w: usize) -> Result<Vec<bool>> {
    let (mh, mw, vals) = as_image(op, t)?;
    if (mh, mw) != (h, w) {
        return Err(Error::shape(op, format!("mask {mh}x{mw} vs image {h}x{w}")));
    }
    Ok(vals.into_iter().map(|v| v != 0.0).collect())
}

/// `10·log10(data_range² / MSE)` over masked pixels; `f64::INFINITY` on an
/// exact match.
pub fn psnr<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    region_mask: &Tensor<T>,
    data_range: f64,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if data_range <= 0.0 {
        return Err(Error::InvalidArgument(format!("data_range {data_range} must be > 0")));
    }
    let (h, w, av) = as_image("psnr", a)?;
    let (_, _, bv) = as_image("psnr", b)?;
    let mask = as_mask("psnr", region_mask, h, w)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..av.len() {
        if mask[i] {
            let d = av[i] - bv[i];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("psnr: empty region".into()));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean local SSIM (uniform 7x7 window) over map pixels whose window center
/// lies in the region and whose window fits entirely inside the image.
pub fn ssim<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    region_mask: &Tensor<T>,
    data_range: f64,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if data_range <= 0.0 {
        return Err(Error::InvalidArgument(format!("data_range {data_range} must be > 0")));
    }
    let (h, w, av) = as_image("ssim", a)?;
    let (_, _, bv) = as_image("ssim", b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim: image {h}x{w} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let mask = as_mask("ssim", region_mask, h, w)?;
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let half = SSIM_WINDOW / 2;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            if !mask[cy * w + cx] {
                continue;
            }
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in cy - half..=cy + half {
                for x in cx - half..=cx + half {
                    let (va, vb) = (av[y * w + x], bv[y * w + x]);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let val = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            sum += val;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "ssim: region has no pixel with a fully interior window".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Binary dilation with a Euclidean disc of the given radius.
pub fn dilate_mask<T: Scalar>(mask: &Tensor<T>, radius: f64) -> Result<Tensor<T>> {
    let (h, w, vals) = as_image("dilate_mask", mask)?;
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let mut out = vec![T::ZERO; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    if (dy * dy + dx * dx) as f64 > r2 {
                        continue;
                    }
                    let (sy, sx) = (y + dy, x + dx);
                    if sy >= 0
                        && sy < h as i64
                        && sx >= 0
                        && sx < w as i64
                        && vals[(sy as usize) * w + sx as usize] != 0.0
                    {
                        out[(y as usize) * w + x as usize] = T::ONE;
                        break 'search;
                    }
                }
            }
        }
    }
    Tensor::from_vec(mask.shape(), out)
}

/// The (tumor, healthy) partition used for all reports: tumor = dilated
/// mask, healthy = (target > 0) minus tumor.
pub fn region_split<T: Scalar>(target: &Tensor<T>, tumor_mask: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let tumor = dilate_mask(tumor_mask, TUMOR_DILATION_RADIUS)?;
    let (_, _, tv) = as_image("region_split", target)?;
    let td = tumor.data();
    let healthy: Vec<T> = tv
        .iter()
        .zip(td)
        .map(|(&t, &m)| if t > 0.0 && m.to_f64() == 0.0 { T::ONE } else { T::ZERO })
        .collect();
    let healthy = Tensor::from_vec(target.shape(), healthy)?;
    Ok((tumor, healthy))
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct RegionStats {
    /// Mean/std of SSIM in percent.
    pub ssim_mean: f64,
    pub ssim_std: f64,
    /// Mean/std of PSNR in dB; mean is infinite on exact matches.
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct RegionReport {
    pub tumor: RegionStats,
    pub healthy: RegionStats,
    pub sample_count: usize,
}

/// Population mean/std; std is 0 whenever the mean is not finite.
fn aggregate(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-sample metrics over both regions, aggregated to mean±std.
/// `data_range` per sample is the target image maximum.
pub fn evaluate<T: Scalar>(
    preds: &[Tensor<T>],
    targets: &[Tensor<T>],
    tumor_masks: &[Tensor<T>],
) -> Result<RegionReport> {
    if preds.len() != targets.len() || preds.len() != tumor_masks.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluate: mismatched set lengths {}/{}/{}",
            preds.len(),
            targets.len(),
            tumor_masks.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("evaluate: empty sample set".into()));
    }
    let mut per_region: [Vec<Vec<f64>>; 2] = [vec![Vec::new(), Vec::new()], vec![Vec::new(), Vec::new()]];
    for ((p, t), m) in preds.iter().zip(targets).zip(tumor_masks) {
        let range = t.data().iter().map(|v| v.to_f64()).fold(f64::MIN, f64::max);
        if range <= 0.0 {
            return Err(Error::InvalidArgument("evaluate: target has no positive values".into()));
        }
        let (tumor, healthy) = region_split(t, m)?;
        for (r, region) in [&tumor, &healthy].into_iter().enumerate() {
            per_region[r][0].push(ssim(p, t, region, range)? * 100.0);
            per_region[r][1].push(psnr(p, t, region, range)?);
        }
    }
    let stats = |vals: &[Vec<f64>]| {
        let (ssim_mean, ssim_std) = aggregate(&vals[0]);
        let (psnr_mean, psnr_std) = aggregate(&vals[1]);
        RegionStats { ssim_mean, ssim_std, psnr_mean, psnr_std }
    };
    Ok(RegionReport {
        tumor: stats(&per_region[0]),
        healthy: stats(&per_region[1]),
        sample_count: preds.len(),
    })
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "inf".to_string()
    }
}

impl RegionReport {
    /// One `key=value` record per region, machine-greppable.
    pub fn to_records(&self, label: &str) -> String {
        let mut out = String::new();
        for (region, s) in [("tumor", &self.tumor), ("healthy", &self.healthy)] {
            out.push_str(&format!(
                "method={label} region={region} n={} ssim_mean={:.4} ssim_std={:.4} psnr_mean={} psnr_std={:.4}\n",
                self.sample_count,
                s.ssim_mean,
                s.ssim_std,
                fmt_db(s.psnr_mean),
                s.psnr_std
            ));
        }
        out
    }
}

/// Aligned plain-text table, one row per method, SSIM/PSNR per region.
pub fn render_table(rows: &[(String, RegionReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<32} {:>14} {:>14} {:>14} {:>14}\n",
        "Method", "Tumor SSIM(%)", "Tumor PSNR", "Healthy SSIM(%)", "Healthy PSNR"
    ));
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<32} {:>14} {:>14} {:>14} {:>14}\n",
            name,
            format!("{:.2}±{:.2}", r.tumor.ssim_mean, r.tumor.ssim_std),
            format!("{}±{:.2}", fmt_db(r.tumor.psnr_mean), r.tumor.psnr_std),
            format!("{:.2}±{:.2}", r.healthy.ssim_mean, r.healthy.ssim_std),
            format!("{}±{:.2}", fmt_db(r.healthy.psnr_mean), r.healthy.psnr_std),
        ));
    }
    out
}
