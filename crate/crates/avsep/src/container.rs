//! Single-file binary container for named f64 arrays.
//!
//! Used for spectrogram files, scaled-magnitude grids, visual-embedding
//! files, and model checkpoints. The layout is fixed and little-endian
//! throughout:
//!
//! ```text
//! offset  size          field
//! 0       8             magic b"AVSEPBIN"
//! 8       4             format version, u32 LE (currently 1)
//! 12      8             metadata length M, u64 LE
//! 20      M             metadata, UTF-8 JSON object
//! ..      8             entry count E, u64 LE
//! then E entries, each:
//!         8             name length K, u64 LE
//!         K             name, UTF-8
//!         8             ndim D, u64 LE
//!         8*D           dims, u64 LE each
//!         8*prod(dims)  values, f64 LE, row-major (C order)
//! ```

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{AvsepError, Result};

const MAGIC: &[u8; 8] = b"AVSEPBIN";
const VERSION: u32 = 1;

/// In-memory form of a container file: a JSON metadata object plus named
/// arrays in insertion order (BTreeMap keeps serialization deterministic).
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| AvsepError::InvalidInput(format!("container missing array {name:?}")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| AvsepError::InvalidInput(format!("container missing metadata {key:?}")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| AvsepError::InvalidInput(format!("container missing metadata {key:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| AvsepError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| AvsepError::io(path, e);

        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        let meta = serde_json::Value::Object(self.meta.clone()).to_string();
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(meta.as_bytes()).map_err(io_err)?;
        w.write_all(&(self.arrays.len() as u64).to_le_bytes()).map_err(io_err)?;
        for (name, array) in &self.arrays {
            w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            w.write_all(&(array.ndim() as u64).to_le_bytes()).map_err(io_err)?;
            for &d in array.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
            }
            // as_standard_layout makes the raw slice row-major regardless of
            // how the array was built.
            let std_layout = array.as_standard_layout();
            for &v in std_layout.as_slice().expect("standard layout") {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| AvsepError::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| AvsepError::io(path, e);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(AvsepError::InvalidInput(format!(
                "{}: not a container file (bad magic)",
                path.display()
            )));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(AvsepError::InvalidInput(format!(
                "{}: unsupported container version {version}",
                path.display()
            )));
        }
        let meta_len = read_u64(&mut r, path)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes).map_err(io_err)?;
        let meta_value: serde_json::Value = serde_json::from_slice(&meta_bytes)
            .map_err(|e| AvsepError::InvalidInput(format!("{}: bad metadata: {e}", path.display())))?;
        let meta = match meta_value {
            serde_json::Value::Object(m) => m,
            _ => {
                return Err(AvsepError::InvalidInput(format!(
                    "{}: metadata is not a JSON object",
                    path.display()
                )))
            }
        };

        let count = read_u64(&mut r, path)? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(&mut r, path)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io_err)?;
            let name = String::from_utf8(name_bytes).map_err(|_| {
                AvsepError::InvalidInput(format!("{}: non-UTF-8 array name", path.display()))
            })?;
            let ndim = read_u64(&mut r, path)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(&mut r, path)? as usize);
            }
            let len: usize = dims.iter().product();
            let mut values = vec![0.0f64; len];
            let mut buf = [0u8; 8];
            for v in values.iter_mut() {
                r.read_exact(&mut buf).map_err(io_err)?;
                *v = f64::from_le_bytes(buf);
            }
            let array = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| AvsepError::Shape(format!("{}: {e}", path.display())))?;
            arrays.insert(name, array);
        }
        Ok(Self { meta, arrays })
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| AvsepError::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| AvsepError::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}
