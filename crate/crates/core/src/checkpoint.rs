//! Checkpoint container: little-endian binary, magic `CLRN1`, then one
//! record per tensor — u32 name length, UTF-8 name, u32 rank, u32 dims, raw
//! f32 data. Round trips are bit-exact; readers consume records until EOF.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"CLRN1";

/// Named tensors in sorted-name order. Sections are separated by name
/// prefixes (`model/...`, `optim/...`, `meta/...`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    /// Entries under `prefix/`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        let full = format!("{prefix}/");
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&full).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        for (name, tensor) in &self.entries {
            let name_bytes = name.as_bytes();
            out.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 5];
        file.read_exact(&mut magic)
            .map_err(|_| Error::Format(format!("{}: file too short for magic", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {:?} (expected {:?})",
                path.display(),
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let mut entries = BTreeMap::new();
        loop {
            let mut len4 = [0u8; 4];
            match file.read(&mut len4)? {
                0 => break, // clean EOF between records
                4 => {}
                _ => {
                    return Err(Error::Format(format!(
                        "{}: truncated record header",
                        path.display()
                    )))
                }
            }
            let name_len = u32::from_le_bytes(len4) as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_fully(&mut file, &mut name_bytes, path, "name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format(format!("{}: name is not UTF-8", path.display())))?;
            let mut rank4 = [0u8; 4];
            read_fully(&mut file, &mut rank4, path, "rank")?;
            let rank = u32::from_le_bytes(rank4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d4 = [0u8; 4];
                read_fully(&mut file, &mut d4, path, "dims")?;
                shape.push(u32::from_le_bytes(d4) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            read_fully(&mut file, &mut raw, path, "data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            entries.insert(name, tensor);
        }
        Ok(Checkpoint { entries })
    }
}

fn read_fully(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("{}: truncated while reading {what}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("model/conv.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.5e-8, 9.0, 4.0]).unwrap());
        ck.insert("model/conv.b", Tensor::from_vec(vec![0.25, -0.125]));
        ck.insert("optim/v/conv.w", Tensor::zeros(vec![2, 3]));
        ck
    }

    #[test]
    fn save_load_save_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(ck, loaded);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOPE!rest").unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn section_filters_by_prefix() {
        let ck = sample();
        let model = ck.section("model");
        assert_eq!(model.len(), 2);
        assert!(model.contains_key("conv.w"));
    }
}
