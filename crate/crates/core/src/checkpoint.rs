//! Versioned binary checkpoint container.
//!
//! Byte layout (all integers little-endian u64, floats little-endian f64):
//!
//! ```text
//! magic            6 bytes         b"MTGNN1"
//! config_len       u64
//! config           config_len bytes of UTF-8 `key = value` lines
//! param_count      u64
//! per parameter:
//!   name_len       u64
//!   name           name_len bytes of UTF-8
//!   rank           u64
//!   extents        rank × u64
//!   payload        product(extents) × f64
//! adjacency_flag   1 byte          0 = absent, 1 = present
//! if present:
//!   n              u64
//!   adjacency      n·n × f64       (global graph over all nodes)
//! ```
//!
//! Save followed by load is bit-identical.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"MTGNN1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Effective configuration as `key = value` lines.
    pub config: String,
    pub params: Vec<CheckpointParam>,
    /// Global adjacency over all nodes, row-major, when available.
    pub adjacency: Option<(usize, Vec<f64>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let cfg = self.config.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
            for &e in &p.shape {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            debug_assert_eq!(p.data.len(), p.shape.iter().product::<usize>());
            for &v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.adjacency {
            None => buf.push(0),
            Some((n, a)) => {
                buf.push(1);
                buf.extend_from_slice(&(*n as u64).to_le_bytes());
                for &v in a {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, at: 0 };
        let magic = r.take(6)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let cfg_len = r.u64()? as usize;
        let config = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let count = r.u64()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            params.push(CheckpointParam { name, shape, data });
        }
        let flag = r.take(1)?[0];
        let adjacency = match flag {
            0 => None,
            1 => {
                let n = r.u64()? as usize;
                let mut a = Vec::with_capacity(n * n);
                for _ in 0..n * n {
                    a.push(r.f64()?);
                }
                Some((n, a))
            }
            other => {
                return Err(Error::Checkpoint(format!("invalid adjacency flag {other}")));
            }
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint { config, params, adjacency })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Capture a model's parameters (and optional global adjacency) for saving.
pub fn snapshot_model(
    model: &crate::model::MtgnnModel,
    config_lines: String,
    adjacency: Option<(usize, Vec<f64>)>,
) -> Checkpoint {
    let params = model
        .params()
        .iter()
        .map(|p| {
            let p = p.borrow();
            CheckpointParam { name: p.name.clone(), shape: p.shape.clone(), data: p.data.clone() }
        })
        .collect();
    Checkpoint { config: config_lines, params, adjacency }
}

/// Restore parameters into a freshly built model by name. Every model
/// parameter must be present with a matching shape.
pub fn restore_model(model: &mut crate::model::MtgnnModel, ckpt: &Checkpoint) -> Result<()> {
    for pref in model.params() {
        let mut p = pref.borrow_mut();
        let found = ckpt
            .params
            .iter()
            .find(|c| c.name == p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
        if found.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} in the checkpoint, expected {:?}",
                p.name, found.shape, p.shape
            )));
        }
        p.data = found.data.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("mtgnn-ckpt-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = Checkpoint {
            config: "layers = 3\nseed = 7\n".into(),
            params: vec![
                CheckpointParam {
                    name: "a.weight".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300],
                },
                CheckpointParam { name: "b".into(), shape: vec![1], data: vec![-0.0] },
            ],
            adjacency: Some((2, vec![0.0, 0.25, 0.0, 0.0])),
        };
        let path = tmp("roundtrip");
        ck.save(&path).unwrap();
        let re = Checkpoint::load(&path).unwrap();
        // Bit-level equality, including the sign of zero.
        assert_eq!(re.config, ck.config);
        for (a, b) in re.params.iter().zip(&ck.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(re.adjacency, ck.adjacency);
        let bytes1 = std::fs::read(&path).unwrap();
        ck.save(&path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let path = tmp("corrupt");
        std::fs::write(&path, b"NOTMTGNN").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        // Truncation.
        let ck = Checkpoint { config: "x = 1\n".into(), params: vec![], adjacency: None };
        ck.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn model_snapshot_restores_by_name() {
        use crate::model::{seeded_model, small_config};
        let model = seeded_model(small_config(5), 3).unwrap();
        let ck = snapshot_model(&model, "seed = 3\n".into(), None);
        let mut other = seeded_model(small_config(5), 99).unwrap();
        restore_model(&mut other, &ck).unwrap();
        for (a, b) in model.params().iter().zip(other.params()) {
            assert_eq!(a.borrow().data, b.borrow().data);
        }
    }
}
