//! Single-image files sharing the dataset container conventions
//! (magic "CAVM" | u32 version | u32 header_len | JSON header | f32 LE
//! plane), plus optional 8-bit PGM previews for eyeballing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cavm_core::error::{Error, Result};
use cavm_core::Tensor;

const MAGIC: &[u8; 4] = b"CAVM";
const FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct ImageHeader {
    channels: Vec<String>,
    height: usize,
    width: usize,
    dtype: String,
}

/// Write a `(1,H,W)` image.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.ndim() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape("write_image", format!("need (1,H,W), got {:?}", image.shape())));
    }
    let header = ImageHeader {
        channels: vec!["image".to_string()],
        height: image.shape()[1],
        width: image.shape()[2],
        dtype: "f32".into(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in image.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported image version {version}")));
    }
    r.read_exact(&mut word)?;
    let len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; len];
    r.read_exact(&mut header_bytes)?;
    let header: ImageHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    if header.channels.len() != 1 || header.dtype != "f32" {
        return Err(Error::Format("expected a single-channel f32 image".into()));
    }
    let mut data = Vec::with_capacity(header.height * header.width);
    for _ in 0..header.height * header.width {
        r.read_exact(&mut word)?;
        data.push(f32::from_le_bytes(word));
    }
    Tensor::from_vec(&[1, header.height, header.width], data)
}

/// 8-bit binary PGM, intensities scaled to the image maximum.
pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.ndim() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape("write_pgm", format!("need (1,H,W), got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let max = image.data().iter().cloned().fold(0.0f32, f32::max).max(1e-12);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| ((v.max(0.0) / max) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.cavm");
        let img = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| i as f32 * 0.1).collect()).unwrap();
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn pgm_has_expected_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.pgm");
        let img = Tensor::from_vec(&[1, 3, 5], vec![0.5f32; 15]).unwrap();
        write_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(bytes.len(), b"P5\n5 3\n255\n".len() + 15);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.cavm");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(read_image(&path), Err(Error::Format(_))));
    }
}
