//! On-disk formats.
//!
//! - Tensor file: `u64` little-endian header length, a JSON header
//!   `{"name", "shape", "dtype": "f64"}`, then the values as little-endian
//!   `f64`, row-major.
//! - Binary masks: 8-bit PGM (`P5`), 0 background and 255 object.
//! - Structured records: JSON, or JSON lines for streams of records.

use std::fs;
use std::io::Write;
use std::path::Path;

use maskrefine_core::metrics::BinaryMask;
use maskrefine_core::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

pub fn encode_tensor(name: &str, t: &Tensor) -> Vec<u8> {
    let header = TensorHeader { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f64".into() };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + 8 * t.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(String, Tensor)> {
    let bad = |d: &str| Error::format(path, d);
    let len = bytes.get(..8).ok_or_else(|| bad("truncated tensor header"))?;
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    let header = bytes.get(8..8 + len).ok_or_else(|| bad("truncated tensor header"))?;
    let header: TensorHeader = serde_json::from_slice(header).map_err(Error::json(path))?;
    if header.dtype != "f64" {
        return Err(bad(&format!("unsupported dtype {}", header.dtype)));
    }
    let payload = &bytes[8 + len..];
    let n: usize = header.shape.iter().product();
    if payload.len() != 8 * n {
        return Err(bad(&format!("payload has {} bytes, shape {:?} needs {}", payload.len(), header.shape, 8 * n)));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header.name, Tensor::new(&header.shape, data)?))
}

pub fn write_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_tensor(name, t))
}

pub fn read_tensor(path: &Path) -> Result<(String, Tensor)> {
    decode_tensor(&read_bytes(path)?, path)
}

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

// Header fields and pixel bytes of an 8-bit `P5` image.
fn parse_pgm<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let bad = |d: &str| Error::format(path, d);
    // magic, width, height, maxval separated by whitespace (comments allowed)
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let pixels = bytes.get(i + 1..).ok_or_else(|| bad("missing PGM pixels"))?;
    if pixels.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, pixels.len())));
    }
    Ok((w, h, max, pixels))
}

/// Parses a binary 8-bit PGM mask; any nonzero pixel counts as object.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<BinaryMask> {
    let (w, h, _, pixels) = parse_pgm(bytes, path)?;
    Ok(BinaryMask::new(w, h, pixels.iter().map(|&p| p != 0).collect())?)
}

/// Reads a grayscale PGM as a `[1, 1, H, W]` image with values in `[0, 1]`.
pub fn read_gray_pgm(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let (w, h, max, pixels) = parse_pgm(&bytes, path)?;
    Ok(Tensor::new(&[1, 1, h, w], pixels.iter().map(|&p| p as f64 / max as f64).collect())?)
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_pgm(mask))
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    decode_pgm(&read_bytes(path)?, path)
}

pub fn to_json_lines<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_bytes(path, &to_json_lines(items))
}

pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::json(path)))
        .collect()
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(Error::json(path))
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(bytes).map_err(Error::io(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}
