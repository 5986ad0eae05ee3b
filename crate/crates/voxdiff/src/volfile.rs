//! The VOL1 on-disk volume format.
//!
//! Layout: magic "VOL1" (4 bytes), version u16, channels u16, depth u32,
//! height u32, width u32, dtype code u8 (0 = little-endian 32-bit float),
//! then voxels with width fastest. The reader rejects any payload-length
//! mismatch. Values round-trip bit-exactly through f32.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VOL1";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn to_bytes(volume: &Tensor) -> Result<Vec<u8>> {
    let (c, d, h, w) = volume.dims4()?;
    if c > u16::MAX as usize {
        return Err(Error::shape(format!("channels {c} exceed u16")));
    }
    let mut buf = Vec::with_capacity(19 + volume.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(c as u16).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.push(DTYPE_F32);
    for &v in volume.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 19 {
        return Err(Error::data(format!(
            "VOL1 header needs 19 bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::data(format!(
            "bad VOL1 magic {:?}",
            &bytes[0..4]
        )));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(Error::data(format!("unsupported VOL1 version {version}")));
    }
    let c = u16::from_le_bytes(bytes[6..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if bytes.len() < 21 {
        return Err(Error::data("VOL1 header truncated before dtype"));
    }
    let dtype = bytes[20];
    if dtype != DTYPE_F32 {
        return Err(Error::data(format!("unsupported VOL1 dtype code {dtype}")));
    }
    let payload = &bytes[21..];
    let expect = c * d * h * w * 4;
    if payload.len() != expect {
        return Err(Error::data(format!(
            "VOL1 payload is {} bytes, header says {expect}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&[c, d, h, w], data)
}

/// Atomic write (temp + rename).
pub fn save(volume: &Tensor, path: &Path) -> Result<()> {
    let bytes = to_bytes(volume)?;
    let tmp = path.with_extension("vol.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open volume {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn header_layout_is_pinned() {
        let v = Tensor::zeros(&[2, 3, 4, 5]);
        let b = to_bytes(&v).unwrap();
        assert_eq!(&b[0..4], b"VOL1");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 2);
        assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]), 3);
        assert_eq!(u32::from_le_bytes([b[16], b[17], b[18], b[19]]), 5);
        assert_eq!(b[20], DTYPE_F32);
        assert_eq!(b.len(), 21 + 2 * 3 * 4 * 5 * 4);
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let mut rng = CounterRng::new(3);
        let v = Tensor::from_fn(&[1, 4, 4, 4], |_| rng.uniform());
        let b1 = to_bytes(&v).unwrap();
        let v2 = from_bytes(&b1).unwrap();
        let b2 = to_bytes(&v2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn payload_mismatch_rejected() {
        let v = Tensor::zeros(&[1, 2, 2, 2]);
        let mut b = to_bytes(&v).unwrap();
        b.pop();
        assert!(from_bytes(&b).is_err());
        b.extend_from_slice(&[0, 0, 0, 0, 0]);
        assert!(from_bytes(&b).is_err());
    }

    #[test]
    fn foreign_magic_rejected() {
        assert!(from_bytes(b"NOPE\x01\x00...............").is_err());
    }
}
