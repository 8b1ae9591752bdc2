//! Self-describing binary archive of named f64 arrays, used for checkpoints
//! and external backbone weights. Little-endian throughout; exact bit
//! round-trips are part of the contract.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MUSALAR\x01";

/// A named-array container with a free-form UTF-8 metadata blob.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub meta: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.meta.len() as u32)?;
        w.write_all(self.meta.as_bytes())?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, tensor) in &self.entries {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(tensor.shape().len() as u8)?;
            for &d in tensor.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in tensor.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Archive> {
        let mut r = BufReader::new(
            File::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?,
        );
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Load(format!(
                "{}: not a parameter archive (bad magic)",
                path.display()
            )));
        }
        let meta_len = r.read_u32::<LittleEndian>().map_err(bad("meta length"))? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(bad("meta"))?;
        let meta = String::from_utf8(meta)
            .map_err(|_| Error::Load("archive metadata is not UTF-8".into()))?;
        let count = r.read_u32::<LittleEndian>().map_err(bad("entry count"))? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>().map_err(bad("name length"))? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(bad("name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Load("entry name is not UTF-8".into()))?;
            let ndim = r.read_u8().map_err(bad("ndim"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>().map_err(bad("dim"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.read_f64::<LittleEndian>().map_err(bad("data"))?);
            }
            entries.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Archive { meta, entries })
    }
}

fn bad(what: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| Error::Load(format!("truncated archive while reading {what}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let t = Tensor::from_vec(&[2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300, -7.25, 0.1])
            .unwrap();
        let arch = Archive {
            meta: "step = 3".into(),
            entries: vec![("w".into(), t.clone()), ("s".into(), Tensor::scalar(2.0))],
        };
        arch.write_to(&path).unwrap();
        let back = Archive::read_from(&path).unwrap();
        assert_eq!(back.meta, "step = 3");
        let w = back.get("w").unwrap();
        assert_eq!(w.shape(), t.shape());
        for (a, b) in w.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not an archive").unwrap();
        assert!(matches!(Archive::read_from(&path), Err(Error::Load(_))));
    }
}
