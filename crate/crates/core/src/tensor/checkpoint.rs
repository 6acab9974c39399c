//! `SEMC` parameter checkpoints.
//!
//! Layout (little-endian): magic `SEMC`, version `u16`, count `u32`, then per
//! parameter: name length `u16`, UTF-8 name, rank `u8`, one `u32` per extent,
//! and the `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::codec::{put_f32s, ByteReader};
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEMC";
pub const CHECKPOINT_VERSION: u16 = 1;

impl ParamStore {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for p in self.iter() {
            let name = p.name().as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::arg(format!("parameter name too long: {}", p.name())))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            let shape = p.tensor().shape();
            let rank = u8::try_from(shape.len())
                .map_err(|_| Error::arg(format!("rank too large for {}", p.name())))?;
            out.push(rank);
            for &e in shape {
                let e = u32::try_from(e).map_err(|_| Error::arg("extent exceeds u32"))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            put_f32s(&mut out, p.tensor().data());
        }
        w.write_all(&out)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r
            .take(4)
            .ok_or(FormatError::MalformedHeader("short header".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic { expected: "SEMC" }.into());
        }
        let header = |v: Option<u32>| v.ok_or(FormatError::MalformedHeader("short header".into()));
        let version = header(r.u16().map(u32::from))? as u16;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let count = header(r.u32())?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16().ok_or(FormatError::TruncatedPayload)? as usize;
            let name = r.take(name_len).ok_or(FormatError::TruncatedPayload)?;
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| FormatError::MalformedHeader("parameter name is not UTF-8".into()))?;
            let rank = r.u8().ok_or(FormatError::TruncatedPayload)? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or(FormatError::TruncatedPayload)?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or(FormatError::MalformedHeader("extent overflow".into()))?;
            let data = r.f32s(n).ok_or(FormatError::TruncatedPayload)?;
            store.push_raw(name, Tensor::new(&shape, data)?);
        }
        if r.remaining() != 0 {
            return Err(FormatError::TrailingBytes(r.remaining()).into());
        }
        store.check_unique_names()?;
        Ok(store)
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add("proj.w", Tensor::randn(&[4, 12], 0.02, &mut rng))
            .unwrap();
        s.add("proj.b", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        s.add("scalar", Tensor::scalar(-3.5)).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = sample_store();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::new();
        s.add("ab", Tensor::new(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        let mut want = b"SEMC".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1f32.to_le_bytes());
        want.extend_from_slice(&2f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncation_and_bad_magic() {
        let mut bytes = Vec::new();
        sample_store().write_to(&mut bytes).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            ParamStore::from_bytes(cut),
            Err(Error::Format(FormatError::TruncatedPayload))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamStore::from_bytes(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        bytes.push(0);
        assert!(matches!(
            ParamStore::from_bytes(&bytes),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.semc");
        let s = sample_store();
        s.save(&path).unwrap();
        assert_eq!(ParamStore::load(&path).unwrap(), s);
    }
}
