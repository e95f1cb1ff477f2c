//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PICA" | version u32 | record count u32 |
//!   { name length u16 | name UTF-8 | dtype u8 | rank u8 | dims u32 × rank | values }*
//! ```
//!
//! Records are written in registry order. Group and trainable flags are not
//! stored; loading matches records by name against a freshly built registry.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamRegistry;
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"PICA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

pub fn encode<T: Float>(registry: &ParamRegistry<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + registry.entries().iter().map(|e| e.tensor.len() * T::DTYPE.size()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(registry.len()).map_err(|_| Error::checkpoint("too many records"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in registry.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::checkpoint(format!("name `{}` is too long", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.code());
        let rank = u8::try_from(e.tensor.rank()).map_err(|_| Error::checkpoint(format!("`{}` has too many dims", e.name)))?;
        out.push(rank);
        for &d in e.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::checkpoint(format!("`{}` dim too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::checkpoint(format!("file truncated while reading {}", what())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parse every record, checking magic, version, truncation and duplicates.
pub fn decode<T: Float>(bytes: &[u8]) -> Result<Vec<Record<T>>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, || "the magic number".into())?;
    if magic != MAGIC {
        return Err(Error::checkpoint(format!("bad magic {magic:?}, expected \"PICA\"")));
    }
    let version = r.u32(|| "the version".into())?;
    if version != VERSION {
        return Err(Error::checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32(|| "the record count".into())? as usize;
    let mut records: Vec<Record<T>> = Vec::with_capacity(count.min(4096));
    let mut seen = std::collections::HashSet::new();
    for k in 0..count {
        let len = u16::from_le_bytes(r.take(2, || format!("the name length of record {k}"))?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(len as usize, || format!("the name of record {k}"))?)
            .map_err(|_| Error::checkpoint(format!("record {k} has a non-UTF-8 name")))?
            .to_string();
        let head = r.take(2, || format!("the dtype/rank of `{name}`"))?;
        let dtype = DType::from_code(head[0]).ok_or_else(|| Error::checkpoint(format!("`{name}` has unknown dtype {}", head[0])))?;
        if dtype != T::DTYPE {
            return Err(Error::checkpoint(format!("`{name}` is stored as {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(|| format!("the dims of `{name}`"))? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size(), || format!("the values of `{name}`"))?;
        let data: Vec<T> = raw.chunks(dtype.size()).map(T::read_le).collect();
        if !seen.insert(name.clone()) {
            return Err(Error::checkpoint(format!("duplicate record `{name}`")));
        }
        records.push(Record { tensor: Tensor::from_vec(&shape, data)?, name });
    }
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }
    Ok(records)
}

/// Overwrite every entry of `registry` from `bytes`. The file must hold
/// exactly the registry's names with matching shapes.
pub fn load_into<T: Float>(registry: &mut ParamRegistry<T>, bytes: &[u8]) -> Result<()> {
    let records = decode::<T>(bytes)?;
    let missing: Vec<&str> = registry.entries().iter().map(|e| e.name.as_str()).filter(|n| !records.iter().any(|r| r.name == *n)).collect();
    if !missing.is_empty() {
        return Err(Error::checkpoint(format!("checkpoint lacks {} parameters, e.g. `{}`", missing.len(), missing[0])));
    }
    for rec in records {
        let slot =
            registry.get_mut(&rec.name).ok_or_else(|| Error::checkpoint(format!("unexpected record `{}` for this network", rec.name)))?;
        if slot.shape() != rec.tensor.shape() {
            return Err(Error::checkpoint(format!(
                "`{}` has shape {:?}, the network expects {:?}",
                rec.name,
                rec.tensor.shape(),
                slot.shape()
            )));
        }
        *slot = rec.tensor;
    }
    Ok(())
}

/// Write-to-temp-then-rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file = path.file_name().ok_or_else(|| Error::usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<T: Float>(registry: &ParamRegistry<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(registry)?)
}

pub fn load<T: Float>(registry: &mut ParamRegistry<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::checkpoint(format!("cannot read {}: {e}", path.display())))?;
    load_into(registry, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;

    fn registry() -> ParamRegistry<f32> {
        let mut reg = ParamRegistry::new();
        reg.insert("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0), Group::Encoder, true).unwrap();
        reg.insert("a.bias", Tensor::from_vec(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap(), Group::Decoder, true).unwrap();
        reg.insert("bn.running_var", Tensor::ones(&[4]), Group::Decoder, false).unwrap();
        reg
    }

    #[test]
    fn empty_registry_is_header_only() {
        let bytes = encode(&ParamRegistry::<f64>::new()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[..4], b"PICA");
        assert_eq!(&bytes[4..], &[1, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn byte_layout_of_one_record() {
        let mut reg = ParamRegistry::<f32>::new();
        reg.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap(), Group::Decoder, true).unwrap();
        let bytes = encode(&reg).unwrap();
        let expected: Vec<u8> =
            [&b"PICA"[..], &[1, 0, 0, 0], &[1, 0, 0, 0], &[1, 0], b"w", &[0, 1], &[1, 0, 0, 0], &1.0f32.to_le_bytes()].concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let reg = registry();
        let bytes = encode(&reg).unwrap();
        let mut fresh = registry();
        fresh.entries_mut().iter_mut().for_each(|e| e.tensor = Tensor::zeros(e.tensor.shape()));
        load_into(&mut fresh, &bytes).unwrap();
        assert_eq!(encode(&fresh).unwrap(), bytes);
        assert_eq!(fresh.get("a.bias").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = encode(&registry()).unwrap();
        let err = decode::<f32>(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("bn.running_var"), "{err}");
        let err = decode::<f32>(&bytes[..28]).unwrap_err().to_string();
        assert!(err.contains("a.weight"), "{err}");
    }

    #[test]
    fn bad_magic_version_and_duplicates() {
        let mut bytes = encode(&registry()).unwrap();
        bytes[0] = b'X';
        assert!(decode::<f32>(&bytes).is_err());
        let mut bytes = encode(&registry()).unwrap();
        bytes[4] = 2;
        assert!(decode::<f32>(&bytes).unwrap_err().to_string().contains("version"));

        let mut one = ParamRegistry::<f32>::new();
        one.insert("x", Tensor::ones(&[1]), Group::Decoder, true).unwrap();
        let rec = encode(&one).unwrap()[HEADER_LEN..].to_vec();
        let dup = [&b"PICA"[..], &[1, 0, 0, 0], &[2, 0, 0, 0], &rec, &rec].concat();
        assert!(decode::<f32>(&dup).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn dtype_and_shape_mismatch() {
        let bytes = encode(&registry().cast::<f64>()).unwrap();
        assert!(decode::<f32>(&bytes).is_err());
        let mut other = ParamRegistry::<f32>::new();
        other.insert("a.weight", Tensor::zeros(&[3, 2]), Group::Encoder, true).unwrap();
        other.insert("a.bias", Tensor::zeros(&[2]), Group::Decoder, true).unwrap();
        other.insert("bn.running_var", Tensor::zeros(&[4]), Group::Decoder, false).unwrap();
        assert!(load_into(&mut other, &encode(&registry()).unwrap()).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.pica");
        save(&registry(), &path).unwrap();
        let names: Vec<_> = std::fs::read_dir(path.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("model.pica")]);
        let mut back = registry();
        load(&mut back, &path).unwrap();
        assert_eq!(encode(&back).unwrap(), encode(&registry()).unwrap());
    }
}
