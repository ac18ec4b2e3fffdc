//! Synthetic dose-ramp phantoms: an elliptical "brain" with smooth texture,
//! an interior "tumor" whose rim enhances under contrast, three
//! contrast-free channel surrogates, the linear dose-interpolation rule and
//! 95th-percentile normalization, plus a small binary on-disk format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DOSE_LOW: f64 = 1.0 / 3.0;
pub const DOSE_HIGH: f64 = 2.0 / 3.0;

/// One phantom "slice": contrast-free channels, tumor mask, standard-dose
/// target, plus the derived lower/higher-dose caches.
#[derive(Clone)]
pub struct VolumeSample<T: Scalar> {
    /// `(3,H,W)`: T1w-like, T2w-like, FLAIR-like surrogates, all >= 0.
    pub x_nc: Tensor<T>,
    /// `(1,H,W)` binary tumor mask.
    pub x_tm: Tensor<T>,
    /// `(1,H,W)` standard-dose contrast-enhanced target.
    pub y_sd: Tensor<T>,
    /// Derived d=1/3 image.
    pub y_ld: Tensor<T>,
    /// Derived d=2/3 image.
    pub y_hd: Tensor<T>,
    pub seed: u64,
}

impl<T: Scalar> VolumeSample<T> {
    pub fn new(x_nc: Tensor<T>, x_tm: Tensor<T>, y_sd: Tensor<T>, seed: u64) -> Result<Self> {
        if x_nc.ndim() != 3 || x_nc.shape()[0] != 3 {
            return Err(Error::shape("volume_sample", format!("x_nc {:?}", x_nc.shape())));
        }
        let (h, w) = (x_nc.shape()[1], x_nc.shape()[2]);
        for (name, t) in [("x_tm", &x_tm), ("y_sd", &y_sd)] {
            if t.shape() != [1, h, w] {
                return Err(Error::shape(
                    "volume_sample",
                    format!("{name} {:?} vs spatial {h}x{w}", t.shape()),
                ));
            }
        }
        if x_tm.data().iter().any(|v| v.to_f64() != 0.0 && v.to_f64() != 1.0) {
            return Err(Error::InvalidArgument("tumor mask must be exactly binary".into()));
        }
        let t1 = x_nc.slice(0, 0, 1)?.detach();
        let y_ld = dose_interpolate(&t1, &y_sd, DOSE_LOW)?;
        let y_hd = dose_interpolate(&t1, &y_sd, DOSE_HIGH)?;
        Ok(VolumeSample { x_nc, x_tm, y_sd, y_ld, y_hd, seed })
    }

    pub fn height(&self) -> usize {
        self.x_nc.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.x_nc.shape()[2]
    }

    /// The full model input `x = concat(x_NC, x_TM)`, shape `(4,H,W)`.
    pub fn x(&self) -> Result<Tensor<T>> {
        Tensor::concat(&[self.x_nc.clone(), self.x_tm.clone()], 0)
    }

    /// T1w-like baseline channel, `(1,H,W)`.
    pub fn t1(&self) -> Result<Tensor<T>> {
        Ok(self.x_nc.slice(0, 0, 1)?.detach())
    }

    /// Ground-truth image at dose `d`.
    pub fn dose_image(&self, d: f64) -> Result<Tensor<T>> {
        dose_interpolate(&self.t1()?, &self.y_sd, d)
    }

    /// Divide every channel by the 95th percentile of y_SD. One shared
    /// scalar keeps the enhancement relation between channels intact.
    pub fn normalized(&self) -> Result<VolumeSample<T>> {
        let p = percentile_95(self.y_sd.data())?;
        let inv = T::from_f64(1.0 / p);
        VolumeSample::new(
            self.x_nc.scale(inv)?.detach(),
            self.x_tm.clone(),
            self.y_sd.scale(inv)?.detach(),
            self.seed,
        )
    }
}

/// `y_d = x_t1 + d * (y_SD - x_t1)`; endpoints are returned bit-exactly.
pub fn dose_interpolate<T: Scalar>(x_t1: &Tensor<T>, y_sd: &Tensor<T>, d: f64) -> Result<Tensor<T>> {
    if x_t1.shape() != y_sd.shape() {
        return Err(Error::shape(
            "dose_interpolate",
            format!("{:?} vs {:?}", x_t1.shape(), y_sd.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::InvalidArgument(format!("dose {d} outside [0,1]")));
    }
    if d == 0.0 {
        return Ok(x_t1.clone());
    }
    if d == 1.0 {
        return Ok(y_sd.clone());
    }
    x_t1.add(&y_sd.sub(x_t1)?.scale(T::from_f64(d))?)
}

/// 95th percentile by linear interpolation over all sorted values.
pub fn percentile_95<T: Scalar>(values: &[T]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of empty data".into()));
    }
    let mut sorted: Vec<f64> = values.iter().map(|v| v.to_f64()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    let p = sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    if p <= 0.0 {
        return Err(Error::InvalidArgument(
            "95th percentile is not positive; cannot normalize".into(),
        ));
    }
    Ok(p)
}

/// `v / percentile_95(v)`.
pub fn normalize_volume<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let p = percentile_95(v.data())?;
    v.scale(T::from_f64(1.0 / p))
}

/// Rim weight as a function of the signed elliptical boundary distance
/// `dist` (negative inside the tumor). Strictly positive on |dist| <= RIM,
/// exactly zero outside.
const RIM_HALF_WIDTH: f64 = 2.0;

fn rim_weight(dist: f64) -> f64 {
    if dist.abs() > RIM_HALF_WIDTH {
        0.0
    } else {
        let c = (std::f64::consts::PI * dist / (2.0 * RIM_HALF_WIDTH)).cos();
        0.15 + 0.85 * c * c
    }
}

/// Deterministic phantom generator. All geometry and texture parameters are
/// drawn from a SplitMix64 stream keyed only by `seed`.
pub fn generate_phantom<T: Scalar>(seed: u64, size: usize) -> Result<VolumeSample<T>> {
    if size < 32 || !size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "phantom size must be even and >= 32, got {size}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let s = size as f64;

    // brain ellipse
    let bcx = s / 2.0 + rng.uniform(-0.03, 0.03) * s;
    let bcy = s / 2.0 + rng.uniform(-0.03, 0.03) * s;
    let ba = rng.uniform(0.35, 0.42) * s;
    let bb = rng.uniform(0.35, 0.42) * s;

    // smooth texture field
    let f1 = rng.uniform(1.0, 3.0);
    let f2 = rng.uniform(1.0, 3.0);
    let p1 = rng.uniform(0.0, std::f64::consts::TAU);
    let p2 = rng.uniform(0.0, std::f64::consts::TAU);

    // tumor ellipse strictly inside the brain (rim margin included)
    let ta = rng.uniform(0.08, 0.14) * s;
    let tb = rng.uniform(0.08, 0.14) * s;
    let margin = RIM_HALF_WIDTH + 2.0;
    let tcx = bcx + rng.uniform(-0.3, 0.3) * (ba - ta - margin).max(1.0);
    let tcy = bcy + rng.uniform(-0.3, 0.3) * (bb - tb - margin).max(1.0);

    // enhancement amplitude, also encoded into the FLAIR-like channel so
    // the target is inferable from the input
    let amp = rng.uniform(0.3, 0.8);

    let n = size * size;
    let mut t1w = vec![0.0f64; n];
    let mut t2w = vec![0.0f64; n];
    let mut flair = vec![0.0f64; n];
    let mut mask = vec![0.0f64; n];
    let mut rim_dist = vec![f64::INFINITY; n];

    let mut brain_sum = 0.0;
    let mut brain_count = 0usize;
    for iy in 0..size {
        for ix in 0..size {
            let (xf, yf) = (ix as f64 + 0.5, iy as f64 + 0.5);
            let rb = ((xf - bcx) / ba).powi(2) + ((yf - bcy) / bb).powi(2);
            if rb > 1.0 {
                continue;
            }
            let idx = iy * size + ix;
            let tex = 0.6
                + 0.1 * (std::f64::consts::TAU * f1 * xf / s + p1).sin()
                + 0.1 * (std::f64::consts::TAU * f2 * yf / s + p2).sin();
            let rt = (((xf - tcx) / ta).powi(2) + ((yf - tcy) / tb).powi(2)).sqrt();
            let in_tumor = rt <= 1.0;
            rim_dist[idx] = (rt - 1.0) * ta.min(tb);

            t1w[idx] = if in_tumor { 0.8 * tex } else { tex };
            t2w[idx] = if in_tumor { 1.3 * (1.1 - tex) } else { 1.1 - tex };
            flair[idx] = if in_tumor { 0.4 + amp } else { 0.4 * tex };
            if in_tumor {
                mask[idx] = 1.0;
            }
            brain_sum += t1w[idx];
            brain_count += 1;
        }
    }
    if !mask.contains(&1.0) {
        return Err(Error::InvalidArgument(format!(
            "degenerate phantom for seed {seed}: empty tumor"
        )));
    }
    let mean_brain = brain_sum / brain_count as f64;

    let mut y_sd = t1w.clone();
    for idx in 0..n {
        let w = rim_weight(rim_dist[idx]);
        if w > 0.0 {
            y_sd[idx] += amp * mean_brain * w;
        }
    }

    let mut nc = Vec::with_capacity(3 * n);
    nc.extend_from_slice(&t1w);
    nc.extend_from_slice(&t2w);
    nc.extend_from_slice(&flair);
    VolumeSample::new(
        Tensor::from_f64_values(&[3, size, size], &nc)?,
        Tensor::from_f64_values(&[1, size, size], &mask)?,
        Tensor::from_f64_values(&[1, size, size], &y_sd)?,
        seed,
    )
}

// ---------------------------------------------------------------------------
// on-disk format: b"CAVM" | u32 version | u32 header_len | JSON header |
// little-endian f32 planes in header-declared order
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"CAVM";
const FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct SampleHeader {
    channels: Vec<String>,
    height: usize,
    width: usize,
    dtype: String,
    seed: u64,
}

fn plane_names() -> Vec<String> {
    ["t1w", "t2w", "flair", "tumor_mask", "y_sd"].map(String::from).to_vec()
}

pub fn write_sample<T: Scalar>(sample: &VolumeSample<T>, path: &Path) -> Result<()> {
    let header = SampleHeader {
        channels: plane_names(),
        height: sample.height(),
        width: sample.width(),
        dtype: "f32".into(),
        seed: sample.seed,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for plane in [&sample.x_nc, &sample.x_tm, &sample.y_sd] {
        for v in plane.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sample<T: Scalar>(path: &Path) -> Result<VolumeSample<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    r.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: SampleHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    if header.channels != plane_names() || header.dtype != "f32" {
        return Err(Error::Format("unexpected channel layout or dtype".into()));
    }
    let (h, w) = (header.height, header.width);
    let mut read_planes = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count * h * w);
        for _ in 0..count * h * w {
            r.read_exact(&mut word)?;
            out.push(f32::from_le_bytes(word) as f64);
        }
        Ok(out)
    };
    let nc = read_planes(3)?;
    let tm = read_planes(1)?;
    let sd = read_planes(1)?;
    VolumeSample::new(
        Tensor::from_f64_values(&[3, h, w], &nc)?,
        Tensor::from_f64_values(&[1, h, w], &tm)?,
        Tensor::from_f64_values(&[1, h, w], &sd)?,
        header.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a: VolumeSample<f64> = generate_phantom(7, 64).unwrap();
        let b: VolumeSample<f64> = generate_phantom(7, 64).unwrap();
        assert_eq!(a.x_nc.data(), b.x_nc.data());
        assert_eq!(a.x_tm.data(), b.x_tm.data());
        assert_eq!(a.y_sd.data(), b.y_sd.data());
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(generate_phantom::<f64>(0, 30).is_err());
        assert!(generate_phantom::<f64>(0, 33).is_err());
    }

    #[test]
    fn tumor_area_fraction_over_100_seeds() {
        for seed in 0..100 {
            let s: VolumeSample<f64> = generate_phantom(seed, 64).unwrap();
            let area: f64 = s.x_tm.data().iter().sum();
            let frac = area / (64.0 * 64.0);
            assert!((0.01..=0.10).contains(&frac), "seed {seed}: fraction {frac}");
        }
    }

    #[test]
    fn mask_binary_and_tumor_inside_brain() {
        for seed in 0..20 {
            let s: VolumeSample<f64> = generate_phantom(seed, 64).unwrap();
            let t1 = &s.x_nc.data()[..64 * 64];
            for (i, &m) in s.x_tm.data().iter().enumerate() {
                assert!(m == 0.0 || m == 1.0);
                if m == 1.0 {
                    // tumor pixels carry brain tissue (darkened, never zero)
                    assert!(t1[i] > 0.0, "seed {seed}: tumor outside brain at {i}");
                }
            }
        }
    }

    #[test]
    fn enhancement_zero_outside_rim_positive_on_it() {
        let s: VolumeSample<f64> = generate_phantom(3, 64).unwrap();
        let t1 = &s.x_nc.data()[..64 * 64];
        let diff: Vec<f64> = s.y_sd.data().iter().zip(t1).map(|(y, x)| y - x).collect();
        assert!(diff.iter().all(|&d| d >= 0.0));
        assert!(diff.iter().any(|&d| d > 0.0));
        // every enhanced pixel lies within a few pixels of the tumor mask
        let size = 64i64;
        let tumor: Vec<(i64, i64)> = s
            .x_tm
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1.0)
            .map(|(i, _)| (i as i64 % size, i as i64 / size))
            .collect();
        for (i, &d) in diff.iter().enumerate() {
            if d > 0.0 {
                let (x, y) = (i as i64 % size, i as i64 / size);
                let near = tumor
                    .iter()
                    .any(|&(tx, ty)| (tx - x).pow(2) + (ty - y).pow(2) <= 25);
                assert!(near, "enhancement far from tumor at pixel {i}");
            }
        }
    }

    #[test]
    fn dose_endpoints_bit_exact() {
        let s: VolumeSample<f64> = generate_phantom(5, 64).unwrap();
        let t1 = s.t1().unwrap();
        assert_eq!(dose_interpolate(&t1, &s.y_sd, 0.0).unwrap().data(), t1.data());
        assert_eq!(dose_interpolate(&t1, &s.y_sd, 1.0).unwrap().data(), s.y_sd.data());
        assert!(dose_interpolate(&t1, &s.y_sd, 1.5).is_err());
    }

    #[test]
    fn dose_third_is_a_third_of_enhancement() {
        let s: VolumeSample<f64> = generate_phantom(6, 64).unwrap();
        let t1 = s.t1().unwrap();
        let y = dose_interpolate(&t1, &s.y_sd, 1.0 / 3.0).unwrap();
        for i in 0..y.numel() {
            let lhs = y.data()[i] - t1.data()[i];
            let rhs = (s.y_sd.data()[i] - t1.data()[i]) / 3.0;
            assert!((lhs - rhs).abs() < 1e-15, "pixel {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn dose_ramp_monotone() {
        let s: VolumeSample<f64> = generate_phantom(8, 64).unwrap();
        let t1 = s.t1().unwrap();
        for i in 0..t1.numel() {
            assert!(t1.data()[i] <= s.y_ld.data()[i] + 1e-15);
            assert!(s.y_ld.data()[i] <= s.y_hd.data()[i] + 1e-15);
            assert!(s.y_hd.data()[i] <= s.y_sd.data()[i] + 1e-15);
        }
    }

    #[test]
    fn percentile_matches_sorted_array_oracle() {
        // 101 values 0..100: position 0.95*100 = 95 exactly
        let vals: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let t = Tensor::from_vec(&[101], vals).unwrap();
        assert_eq!(percentile_95(t.data()).unwrap(), 95.0);
        let out = normalize_volume(&t).unwrap();
        let max = out.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 100.0 / 95.0).abs() < 1e-12);
        assert!((percentile_95(out.data()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_constant_and_scale_invariance() {
        let c = Tensor::from_vec(&[4], vec![2.5; 4]).unwrap();
        assert!(normalize_volume(&c).unwrap().data().iter().all(|&v| v == 1.0));

        let v = Tensor::from_vec(&[5], vec![1.0, 4.0, 2.0, 8.0, 3.0]).unwrap();
        let a = normalize_volume(&v).unwrap();
        let b = normalize_volume(&v.scale(3.0).unwrap()).unwrap();
        for i in 0..5 {
            assert!((a.data()[i] - b.data()[i]).abs() < 1e-12);
        }
        assert!(normalize_volume(&Tensor::<f64>::zeros(&[4])).is_err());
    }

    #[test]
    fn sample_normalized_shares_one_scalar() {
        let s: VolumeSample<f64> = generate_phantom(9, 64).unwrap();
        let n = s.normalized().unwrap();
        let p = percentile_95(s.y_sd.data()).unwrap();
        assert!((n.y_sd.data()[100] - s.y_sd.data()[100] / p).abs() < 1e-12);
        assert!((n.x_nc.data()[100] - s.x_nc.data()[100] / p).abs() < 1e-12);
        assert_eq!(n.x_tm.data(), s.x_tm.data()); // mask untouched
    }

    #[test]
    fn file_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cavm");
        let s: VolumeSample<f32> = generate_phantom(11, 64).unwrap();
        write_sample(&s, &path).unwrap();
        let r: VolumeSample<f32> = read_sample(&path).unwrap();
        assert_eq!(r.seed, 11);
        assert_eq!(r.x_nc.data(), s.x_nc.data());
        assert_eq!(r.x_tm.data(), s.x_tm.data());
        assert_eq!(r.y_sd.data(), s.y_sd.data());
        assert_eq!(r.y_ld.data(), s.y_ld.data());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cavm");
        let s: VolumeSample<f32> = generate_phantom(12, 64).unwrap();
        write_sample(&s, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // wrong magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_sample::<f32>(&path), Err(Error::Format(_))));

        // unsupported version
        let mut bad = bytes.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_sample::<f32>(&path), Err(Error::Format(_))));

        // truncation
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_sample::<f32>(&path), Err(Error::Io(_))));
    }
}
