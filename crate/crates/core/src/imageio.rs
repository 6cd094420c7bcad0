//! Binary PPM, a raw float dump format, and JSON-lines dataset manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degrade::{GenParams, Image};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{DType, Float, Tensor};

/// 8-bit binary PPM (`P6`), values rounded from `[0, 1]`.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(dim_err!("PPM needs an [H, W, 3] image, got {s:?}")),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Data(format!("PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("non-ASCII header"))?
                .to_string(),
        );
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let data = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::new(&[h, w, 3], data.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

const RAW_MAGIC: &[u8; 2] = b"RF";

/// Raw float container with a 16-byte header: 2-byte magic, u16 dtype code,
/// u32 height, width and channels, all little-endian.
pub fn encode_raw<T: Float>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, c) = match img.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(dim_err!("raw dump needs an [H, W, C] tensor, got {s:?}")),
    };
    let mut out = Vec::with_capacity(16 + img.numel() * T::DTYPE.size());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(T::DTYPE.code() as u16).to_le_bytes());
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    img.data().iter().for_each(|v| v.write_le(&mut out));
    Ok(out)
}

pub fn decode_raw<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 16 || &bytes[..2] != RAW_MAGIC {
        return Err(Error::Data("raw dump: bad header".into()));
    }
    let code = u16::from_le_bytes([bytes[2], bytes[3]]) as u32;
    if DType::from_code(code) != Some(T::DTYPE) {
        return Err(Error::Data(format!(
            "raw dump: dtype code {code} does not match {:?}",
            T::DTYPE
        )));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4")) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let size = T::DTYPE.size();
    let body = &bytes[16..];
    if body.len() != shape.iter().product::<usize>() * size {
        return Err(Error::Data("raw dump: payload size mismatch".into()));
    }
    Tensor::new(&shape, body.chunks_exact(size).map(T::read_le).collect())
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub clean_path: String,
    pub label: usize,
    pub task: String,
    pub gen_params: GenParams,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::synth_clean;

    #[test]
    fn ppm_roundtrip_is_within_quantization() {
        let img = synth_clean(4, 10, 7);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // Already-quantized images survive exactly.
        assert_eq!(
            decode_ppm(&encode_ppm(&back).unwrap()).unwrap().data(),
            back.data()
        );
    }

    #[test]
    fn raw_roundtrip_is_exact() {
        let img = synth_clean(5, 6, 9);
        let bytes = encode_raw(&img).unwrap();
        assert_eq!(bytes.len(), 16 + img.numel() * 4);
        assert_eq!(decode_raw::<f32>(&bytes).unwrap().data(), img.data());
        assert!(decode_raw::<f64>(&bytes).is_err());
    }
}
