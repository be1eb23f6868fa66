//! On-disk tensor formats.
//!
//! `SNF1`: 16-byte header (magic, then `u32` channels, height, width, all
//! little-endian) followed by `C*H*W` little-endian `f32` values in
//! `(c, h, w)` order. Masks use the same layout with one channel of
//! `0.0`/`1.0` entries.
//!
//! `SNC1`: same header with magic `SNC1`, followed by interleaved `(re, im)`
//! `f32` pairs.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex;

use crate::error::{Result, SonicError};
use crate::fields::{Field, MaskField, Shape};
use crate::scalar::Scalar;
use crate::spectral::Spectrum;

pub const FIELD_MAGIC: &[u8; 4] = b"SNF1";
pub const SPECTRUM_MAGIC: &[u8; 4] = b"SNC1";

fn encode_header(magic: &[u8; 4], shape: Shape, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(magic);
    for d in [shape.channels, shape.height, shape.width] {
        let d =
            u32::try_from(d).map_err(|_| SonicError::Format(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn decode_header<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(Shape, &'a [u8])> {
    if bytes.len() < 16 {
        return Err(SonicError::Format(
            "file shorter than 16-byte header".into(),
        ));
    }
    if &bytes[..4] != magic {
        return Err(SonicError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let shape = Shape::new(dim(4), dim(8), dim(12));
    shape.validate()?;
    Ok((shape, &bytes[16..]))
}

fn read_f32s(payload: &[u8], count: usize) -> Result<Vec<f32>> {
    if payload.len() != count * 4 {
        return Err(SonicError::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * 4
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

pub fn encode_field<T: Scalar>(field: &Field<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * field.len());
    encode_header(FIELD_MAGIC, field.shape(), &mut out)?;
    for &v in field.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_field<T: Scalar>(bytes: &[u8]) -> Result<Field<T>> {
    let (shape, payload) = decode_header(FIELD_MAGIC, bytes)?;
    let values = read_f32s(payload, shape.len())?;
    Field::from_vec(
        shape,
        values.into_iter().map(|v| T::lit(v as f64)).collect(),
    )
}

pub fn encode_spectrum<T: Scalar>(s: &Spectrum<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * s.data().len());
    encode_header(SPECTRUM_MAGIC, s.shape(), &mut out)?;
    for z in s.data() {
        out.extend_from_slice(&(z.re.as_f64() as f32).to_le_bytes());
        out.extend_from_slice(&(z.im.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_spectrum<T: Scalar>(bytes: &[u8]) -> Result<Spectrum<T>> {
    let (shape, payload) = decode_header(SPECTRUM_MAGIC, bytes)?;
    let values = read_f32s(payload, 2 * shape.len())?;
    let data = values
        .chunks_exact(2)
        .map(|p| Complex::new(T::lit(p[0] as f64), T::lit(p[1] as f64)))
        .collect();
    Spectrum::from_vec(shape, data)
}

/// Writes via a temporary sibling and a rename so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn write_field<T: Scalar>(path: &Path, field: &Field<T>) -> Result<()> {
    write_atomic(path, &encode_field(field)?)
}

pub fn read_field<T: Scalar>(path: &Path) -> Result<Field<T>> {
    decode_field(&read_all(path)?)
}

pub fn write_mask(path: &Path, mask: &MaskField) -> Result<()> {
    write_field(path, &mask.to_field::<f32>(1))
}

pub fn read_mask(path: &Path) -> Result<MaskField> {
    MaskField::from_field(&read_field::<f32>(path)?)
}

pub fn write_spectrum<T: Scalar>(path: &Path, s: &Spectrum<T>) -> Result<()> {
    write_atomic(path, &encode_spectrum(s)?)
}

pub fn read_spectrum<T: Scalar>(path: &Path) -> Result<Spectrum<T>> {
    decode_spectrum(&read_all(path)?)
}

/// 8-bit binary PGM (`P5`). Channels are stacked vertically; values are
/// clamped to `[lo, hi]` and scaled to `0..=255`.
pub fn encode_pgm<T: Scalar>(field: &Field<T>, lo: f64, hi: f64) -> Vec<u8> {
    let s = field.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height * s.channels).into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for &v in field.data() {
        let t = ((v.as_f64() - lo) / span).clamp(0.0, 1.0);
        out.push((t * 255.0).round() as u8);
    }
    out
}

pub fn write_pgm<T: Scalar>(path: &Path, field: &Field<T>, lo: f64, hi: f64) -> Result<()> {
    write_atomic(path, &encode_pgm(field, lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let f = Field::<f64>::from_vec(Shape::new(1, 1, 2), vec![1.0, -2.5]).unwrap();
        let bytes = encode_field(&f).unwrap();
        assert_eq!(&bytes[..4], b"SNF1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn spectrum_header() {
        let s =
            Spectrum::<f64>::from_vec(Shape::new(1, 1, 1), vec![Complex::new(0.5, -1.0)]).unwrap();
        let bytes = encode_spectrum(&s).unwrap();
        assert_eq!(&bytes[..4], b"SNC1");
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-1.0f32).to_le_bytes());
        assert_eq!(decode_spectrum::<f64>(&bytes).unwrap(), s);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let f = Field::<f32>::zeros(Shape::new(1, 2, 2)).unwrap();
        let mut bytes = encode_field(&f).unwrap();
        assert!(decode_spectrum::<f32>(&bytes).is_err());
        bytes.pop();
        assert!(decode_field::<f32>(&bytes).is_err());
        assert!(decode_field::<f32>(&bytes[..10]).is_err());
    }

    #[test]
    fn pgm_header() {
        let f = Field::<f64>::from_vec(Shape::new(2, 1, 2), vec![0.0, 1.0, 0.5, 2.0]).unwrap();
        let bytes = encode_pgm(&f, 0.0, 1.0);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 255, 128, 255]);
    }
}
