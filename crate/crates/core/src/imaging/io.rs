//! Binary PGM/PPM images and the `ADMT` float tensor format.

use std::fs;
use std::path::Path;

use crate::error::{AdmError, Result};

use super::{DisplacementField, ImageBuffer};

const TENSOR_MAGIC: &[u8; 4] = b"ADMT";

fn format_err(path: &Path, reason: impl Into<String>) -> AdmError {
    AdmError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Encodes as P5 (one channel) or P6 (three channels), 8 bits per sample.
pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
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
            return Err(format_err(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format_err(path, format!("unsupported magic {other}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s}")));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(format_err(path, format!("only 8-bit images are supported, maxval {maxval}")));
    }
    let n = w * h * channels;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format_err(path, "truncated pixel data"))?;
    ImageBuffer::new(w, h, channels, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_pnm(path: &Path, img: &ImageBuffer) -> Result<()> {
    fs::write(path, encode_pnm(img)).map_err(|e| AdmError::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| AdmError::io(path, e))?;
    decode_pnm(&bytes, path)
}

/// Dense f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(AdmError::shape(n, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<(Tensor, usize)> {
        let u32_at = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| format_err(path, "truncated tensor header"))
        };
        if bytes.get(..4) != Some(TENSOR_MAGIC) {
            return Err(format_err(path, "missing ADMT magic"));
        }
        let rank = u32_at(4)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for r in 0..rank {
            dims.push(u32_at(8 + 4 * r)? as usize);
        }
        let start = 8 + 4 * rank;
        let n: usize = dims.iter().product();
        let payload = bytes
            .get(start..start + 4 * n)
            .ok_or_else(|| format_err(path, "truncated tensor payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((Tensor { dims, data }, start + 4 * n))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.encode(&mut out);
        fs::write(path, out).map_err(|e| AdmError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Tensor> {
        let bytes = fs::read(path).map_err(|e| AdmError::io(path, e))?;
        let (t, used) = Tensor::decode(&bytes, path)?;
        if used != bytes.len() {
            return Err(format_err(path, "trailing bytes after tensor"));
        }
        Ok(t)
    }
}

/// Stores a displacement field as a `[2, h, w]` tensor.
pub fn write_field(path: &Path, field: &DisplacementField) -> Result<()> {
    Tensor::from_f64(vec![2, field.height, field.width], &field.to_planar())?.write(path)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let t = Tensor::read(path)?;
    match t.dims.as_slice() {
        &[2, h, w] => DisplacementField::from_planar(w, h, &t.to_f64()),
        _ => Err(format_err(path, format!("expected [2, h, w] field, got {:?}", t.dims))),
    }
}

/// Sequence of named tensors: `u32` name length, UTF-8 name, `ADMT` block.
pub fn encode_named(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.encode(&mut out);
    }
    out
}

pub fn decode_named(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let len_bytes = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| format_err(path, "truncated name length"))?;
        let len = u32::from_le_bytes([len_bytes[0], len_bytes[1], len_bytes[2], len_bytes[3]]) as usize;
        pos += 4;
        let name = bytes
            .get(pos..pos + len)
            .ok_or_else(|| format_err(path, "truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| format_err(path, "name is not UTF-8"))?;
        pos += len;
        let (t, used) = Tensor::decode(&bytes[pos..], path)?;
        pos += used;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_of_quantized_image() {
        let img = ImageBuffer::from_fn(7, 5, |x, y| ((x * 13 + y * 29) % 256) as f64 / 255.0);
        let bytes = encode_pnm(&img);
        assert!(bytes.starts_with(b"P5\n7 5\n255\n"));
        assert_eq!(decode_pnm(&bytes, Path::new("mem")).unwrap(), img);
    }

    #[test]
    fn ppm_round_trip_and_comments() {
        let data: Vec<f64> = (0..2 * 2 * 3).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = ImageBuffer::new(2, 2, 3, data).unwrap();
        let bytes = encode_pnm(&img);
        assert_eq!(decode_pnm(&bytes, Path::new("mem")).unwrap(), img);
        let mut commented = b"P6\n# made by hand\n2 2\n255\n".to_vec();
        commented.extend_from_slice(&bytes[bytes.len() - 12..]);
        assert_eq!(decode_pnm(&commented, Path::new("mem")).unwrap(), img);
    }

    #[test]
    fn malformed_images_are_rejected() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00", Path::new("x")).is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00", Path::new("x")).is_err());
    }

    #[test]
    fn tensor_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let mut bytes = Vec::new();
        t.encode(&mut bytes);
        assert_eq!(&bytes[..4], b"ADMT");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[36..40], &6.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
        let (back, used) = Tensor::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, t);
    }

    #[test]
    fn named_tensors_round_trip() {
        let a = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![7.0]).unwrap();
        let items = vec![("w".to_string(), a), ("layer.bias".to_string(), b)];
        let bytes = encode_named(&items);
        assert_eq!(decode_named(&bytes, Path::new("mem")).unwrap(), items);
        assert!(decode_named(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn field_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.admt");
        let mut f = DisplacementField::zeros(4, 3);
        f.u[5] = 1.25;
        f.v[2] = -0.5;
        write_field(&path, &f).unwrap();
        assert_eq!(read_field(&path).unwrap(), f);
    }
}
