//! Binary tensor container.
//!
//! Layout (little-endian): magic `DPTK`, u32 version (1), u32 entry count,
//! then per entry: u16 name length, UTF-8 name, u8 rank, rank × u32 extents,
//! row-major f32 data. Network checkpoints list parameters first, then
//! batch-norm running statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DPTK";
pub const VERSION: u32 = 1;

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Parse {
        what: "checkpoint",
        location: "header".into(),
        detail: detail.into(),
    }
}

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| corrupt(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(nb)?;
        let rank = u8::try_from(t.rank()).map_err(|_| corrupt("rank exceeds 255"))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| corrupt("extent exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| corrupt(format!("truncated: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    if &read_exact::<4, _>(&mut r)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut nb = vec![0u8; len];
        r.read_exact(&mut nb)
            .map_err(|e| corrupt(format!("truncated name: {e}")))?;
        let name = String::from_utf8(nb).map_err(|_| corrupt("name is not UTF-8"))?;
        let rank = read_exact::<1, _>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| corrupt(format!("truncated data for `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = if shape.is_empty() {
            Tensor::from_parts(shape, data)
        } else {
            Tensor::new(shape, data)?
        };
        out.push((name, t));
    }
    Ok(out)
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, store.named_tensors()).expect("writing to a Vec cannot fail");
    buf
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), store.named_tensors())
}

/// Copies `entries` into `store`, which must hold exactly the same names and
/// shapes in the same order. The first disagreement is reported by name.
pub fn restore(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = store
        .named_tensors()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    for (i, (name, shape)) in expected.iter().enumerate() {
        let Some((got_name, got)) = entries.get(i) else {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                detail: "missing from checkpoint".into(),
            });
        };
        if got_name != name {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                detail: format!("checkpoint has `{got_name}` in this position"),
            });
        }
        if got.shape() != &shape[..] {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                detail: format!("shape {:?} in checkpoint, {:?} in network", got.shape(), shape),
            });
        }
    }
    if let Some((extra, _)) = entries.get(expected.len()) {
        return Err(Error::CheckpointMismatch {
            name: extra.clone(),
            detail: "not present in network".into(),
        });
    }
    for (name, t) in entries {
        let id = store.id(name).expect("validated above");
        store.value_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let entries = read_tensors(BufReader::new(File::open(path)?))?;
    restore(store, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0))
            .unwrap();
        s.add("a.bias", Tensor::full(&[3], 0.25)).unwrap();
        s.add_buffer("a.bn.running_mean", Tensor::full(&[3], 0.1)).unwrap();
        s
    }

    #[test]
    fn header_layout_is_exact() {
        let b = to_bytes(&store());
        assert_eq!(&b[..4], b"DPTK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 8);
        assert_eq!(&b[14..22], b"a.weight");
        assert_eq!(b[22], 2);
        assert_eq!(u32::from_le_bytes(b[23..27].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[27..31].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(b[31..35].try_into().unwrap()), -1.0);
        let expected_len = 12 + (2 + 8 + 1 + 8 + 24) + (2 + 6 + 1 + 4 + 12) + (2 + 17 + 1 + 4 + 12);
        assert_eq!(b.len(), expected_len);
    }

    #[test]
    fn round_trip_restores_values() {
        let src = store();
        let bytes = to_bytes(&src);
        let mut dst = store();
        let id = dst.id("a.bias").unwrap();
        dst.value_mut(id).data_mut().fill(9.0);
        restore(&mut dst, &read_tensors(&bytes[..]).unwrap()).unwrap();
        assert_eq!(to_bytes(&dst), bytes);
    }

    #[test]
    fn mismatch_names_first_bad_parameter() {
        let bytes = to_bytes(&store());
        let mut other = ParamStore::new();
        other
            .add("a.weight", Tensor::zeros(&[2, 3]))
            .unwrap();
        other.add("a.bias", Tensor::zeros(&[4])).unwrap();
        let err = restore(&mut other, &read_tensors(&bytes[..]).unwrap()).unwrap_err();
        match err {
            Error::CheckpointMismatch { name, .. } => assert_eq!(name, "a.bias"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let bytes = to_bytes(&store());
        assert!(read_tensors(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_tensors(&b"XXXX"[..]).is_err());
    }
}
