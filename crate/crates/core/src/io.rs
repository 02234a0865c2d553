//! Checkpoint container and binary PPM/PGM images.
//!
//! Checkpoint layout (little-endian): `"FXVR"`, version `u32`, tensor count
//! `u64`, then per tensor a `u32`-prefixed UTF-8 name, rank `u32`, extents
//! `u64 * rank` and the `f32` payload; a CRC32 of everything before it
//! closes the file.

use std::fs;
use std::path::Path;

use flexvar_tensor::{ParamSet, Tensor};

use crate::error::{Error, Result};
use crate::model::{ArConfig, ArModel};
use crate::tokenizer::{Tokenizer, TokenizerConfig};

pub const MAGIC: &[u8; 4] = b"FXVR";
pub const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Named `f32` tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
            return Err(format_err(format!("checkpoint truncated at {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(format_err(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("bad magic at byte 0"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version} at byte 4")));
        }
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| format_err(format!("tensor name at byte {at} is not UTF-8")))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| format_err(format!("tensor {name}: extents overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| format_err("payload too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| format_err(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(format_err(format!("{} trailing bytes at byte {}", body.len() - r.pos, r.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub const TOKENIZER_CONFIG: &str = "tok.config";
pub const AR_CONFIG: &str = "ar.config";

fn config_tensor(values: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(&[values.len()], values).expect("rank-1")
}

fn params_from(ckpt: &Checkpoint, prefix: &str, config_key: &str) -> ParamSet<f32> {
    let mut set = ParamSet::new();
    for (name, t) in &ckpt.tensors {
        if name.starts_with(prefix) && name != config_key {
            set.add(name.clone(), t.clone(), false);
        }
    }
    set
}

fn config_values(ckpt: &Checkpoint, key: &str) -> Result<Vec<f64>> {
    let t = ckpt
        .get(key)
        .ok_or_else(|| format_err(format!("checkpoint has no {key} entry")))?;
    Ok(t.data().iter().map(|&v| v as f64).collect())
}

pub fn tokenizer_checkpoint(tok: &Tokenizer<f32>) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.push(TOKENIZER_CONFIG, config_tensor(&tok.config.to_values()));
    for e in tok.params.entries() {
        c.push(e.name.clone(), e.value.clone());
    }
    c
}

pub fn tokenizer_from(ckpt: &Checkpoint) -> Result<Tokenizer<f32>> {
    let config = TokenizerConfig::from_values(&config_values(ckpt, TOKENIZER_CONFIG)?)?;
    Tokenizer::with_params(config, &params_from(ckpt, "tok.", TOKENIZER_CONFIG))
}

pub fn ar_checkpoint(model: &ArModel<f32>) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.push(AR_CONFIG, config_tensor(&model.config.to_values()));
    for e in model.params.entries() {
        c.push(e.name.clone(), e.value.clone());
    }
    c
}

pub fn ar_from(ckpt: &Checkpoint) -> Result<ArModel<f32>> {
    let config = ArConfig::from_values(&config_values(ckpt, AR_CONFIG)?)?;
    ArModel::with_params(config, &params_from(ckpt, "ar.", AR_CONFIG))
}

/// Parses the whitespace-separated header fields of a PNM file, skipping
/// `#` comments. Returns the fields and the offset of the first payload byte.
fn pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<([usize; 3], usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(format!(
            "byte 0: expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        let mut saw_space = false;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_space = true;
                    pos += 1;
                }
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if !saw_space {
            return Err(format_err(format!("byte {pos}: expected whitespace")));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(format!("byte {pos}: expected a decimal number")));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii")
            .parse()
            .map_err(|_| format_err(format!("byte {start}: number out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(format!("byte {pos}: expected a single whitespace before the pixels"))),
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(format_err("byte 3: zero image dimension"));
    }
    if fields[2] != 255 {
        return Err(format_err(format!("maxval {} unsupported (only 255)", fields[2])));
    }
    Ok((fields, pos))
}

fn decode_pnm(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Tensor<f32>> {
    let ([w, h, _], start) = pnm_header(bytes, magic)?;
    let need = w * h * channels;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(format_err(format!(
            "byte {}: pixel data ends after {} of {need} bytes",
            bytes.len(),
            payload.len()
        )));
    }
    let mut data = vec![0f32; need];
    for (i, &b) in payload[..need].iter().enumerate() {
        let (pix, ch) = (i / channels, i % channels);
        data[ch * w * h + pix] = b as f32 / 255.0;
    }
    Tensor::new(&[channels, h, w], data).map_err(Into::into)
}

fn encode_pnm(t: &Tensor<f32>, magic: &str, channels: usize) -> Result<Vec<u8>> {
    let (c, h, w) = t.chw()?;
    if c != channels {
        return Err(crate::error::invalid(format!("{magic} needs {channels} channels, got {c}")));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = t.data();
    for pix in 0..h * w {
        for ch in 0..channels {
            out.push((d[ch * h * w + pix].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Binary RGB pixmap (P6, maxval 255) to a `3 x H x W` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    decode_pnm(bytes, b"P6", 3)
}

pub fn encode_ppm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    encode_pnm(t, "P6", 3)
}

/// Binary graymap (P5, maxval 255) to a `1 x H x W` tensor in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    decode_pnm(bytes, b"P5", 1)
}

pub fn encode_pgm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    encode_pnm(t, "P5", 1)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(t)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pgm(t)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let t = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn header_errors_name_offsets() {
        let e = decode_ppm(b"P3\n1 1\n255\n").unwrap_err().to_string();
        assert!(e.contains("byte 0"), "{e}");
        let e = decode_ppm(b"P6\n1 x\n255\n").unwrap_err().to_string();
        assert!(e.contains("byte 5"), "{e}");
        let e = decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00").unwrap_err().to_string();
        assert!(e.contains("pixel data ends"), "{e}");
    }

    #[test]
    fn comments_are_skipped() {
        let t = decode_pgm(b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn corrupted_checkpoint_is_refused() {
        let mut c = Checkpoint::default();
        c.push("a", Tensor::new(&[2], vec![1.0f32, -2.5]).unwrap());
        let mut b = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
        b[20] ^= 1;
        let e = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(e.contains("checksum"), "{e}");
    }
}
