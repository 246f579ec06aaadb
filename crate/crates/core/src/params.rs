//! Named-tensor view over parameter structs plus the binary checkpoint format.
//!
//! Checkpoint layout (little endian): magic `NTS1`, `u32` tensor count, then
//! per tensor `u32` name length, UTF-8 name, `u32` rank, `rank x u64` dims and
//! the row-major `f64` payload. A sidecar `<file>.shapes` lists one
//! `name dims` line per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};

use crate::error::{Error, Result};
use crate::fcn::io::write_atomic;

pub const TENSOR_MAGIC: &[u8; 4] = b"NTS1";

pub trait ParamSet: Clone + Send + Sync {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        for ((_, mut dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.scaled_add(scale, &s);
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

pub fn encode_tensors(tensors: &[(String, ArrayViewD<'_, f64>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated tensor file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if c.take(4)? != TENSOR_MAGIC {
        return Err(Error::format(path, "missing NTS1 header"));
    }
    let count = c.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = c.take(n * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("size matches dims");
        if out.insert(name.clone(), arr).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

fn shapes_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".shapes");
    PathBuf::from(s)
}

pub fn save_params<P: ParamSet>(params: &P, path: &Path) -> Result<()> {
    let tensors = params.tensors();
    write_atomic(path, &encode_tensors(&tensors))?;
    let mut manifest = String::new();
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} {}\n", dims.join("x")));
    }
    write_atomic(&shapes_path(path), manifest.as_bytes())
}

/// Loads tensors by name into an already-shaped parameter set.
pub fn load_params_into<P: ParamSet>(params: &mut P, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut stored = decode_tensors(&bytes, path)?;
    for (name, mut dst) in params.tensors_mut() {
        let src = stored
            .remove(&name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        if src.shape() != dst.shape() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                ),
            ));
        }
        dst.assign(&src);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    Ok(())
}
