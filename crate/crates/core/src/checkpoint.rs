//! Binary checkpoints.
//!
//! Field file: `PRTG`, format version (u32), architecture as u32s
//! (`l_pos l_dir depth width skip head_width`, skip `u32::MAX` when absent),
//! tensor count (u32), then every tensor's little-endian f32 data in
//! declaration order. A sidecar `<file>.manifest` lists `name rows cols` per
//! line.
//!
//! Optimizer file: `PRTA`, version, step (u64), `lr beta1 beta2 eps` (f64),
//! tensor count, then all first moments followed by all second moments.
//!
//! Files are written to a temporary name and renamed, so an interrupted
//! write never replaces a good checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::{Architecture, FieldParams};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const FIELD_MAGIC: &[u8; 4] = b"PRTG";
pub const ADAM_MAGIC: &[u8; 4] = b"PRTA";
pub const FORMAT_VERSION: u32 = 1;

const NO_SKIP: u32 = u32::MAX;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[Tensor<f32>]) {
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.origin, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensors(&mut self, shapes: &[(usize, usize)], what: &str) -> Result<Vec<Tensor<f32>>> {
        shapes
            .iter()
            .map(|&(r, c)| {
                let raw = self.take(4 * r * c, what)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Ok(Tensor::from_vec(r, c, data))
            })
            .collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.origin, "trailing bytes"));
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn field_to_bytes(field: &FieldParams<f32>) -> Result<Vec<u8>> {
    field.validate()?;
    let a = field.arch;
    let mut out = Vec::with_capacity(64 + 4 * field.parameter_count());
    out.extend_from_slice(FIELD_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    for v in [a.l_pos, a.l_dir, a.depth, a.width] {
        put_u32(&mut out, v as u32);
    }
    put_u32(&mut out, a.skip.map_or(NO_SKIP, |s| s as u32));
    put_u32(&mut out, a.head_width as u32);
    put_u32(&mut out, field.tensors.len() as u32);
    put_tensors(&mut out, &field.tensors);
    Ok(out)
}

pub fn field_from_bytes(bytes: &[u8], origin: &Path) -> Result<FieldParams<f32>> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(4, "magic")? != FIELD_MAGIC {
        return Err(Error::format(origin, "not a field checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 4];
    for (d, name) in dims.iter_mut().zip(["l_pos", "l_dir", "depth", "width"]) {
        *d = r.u32(name)? as usize;
    }
    let skip = match r.u32("skip")? {
        NO_SKIP => None,
        s => Some(s as usize),
    };
    let arch = Architecture {
        l_pos: dims[0],
        l_dir: dims[1],
        depth: dims[2],
        width: dims[3],
        skip,
        head_width: r.u32("head_width")? as usize,
    };
    arch.validate().map_err(|e| Error::format(origin, e.to_string()))?;
    let shapes = arch.shapes();
    let count = r.u32("tensor count")? as usize;
    if count != shapes.len() {
        return Err(Error::format(
            origin,
            format!("{count} tensors stored, architecture has {}", shapes.len()),
        ));
    }
    let tensors = r.tensors(&shapes, "tensor data")?;
    r.finish()?;
    let field = FieldParams { arch, tensors };
    if !field.tensors.iter().all(|t| t.all_finite()) {
        return Err(Error::format(origin, "non-finite parameter values"));
    }
    Ok(field)
}

/// Tensor names and shapes, one `name rows cols` line each.
pub fn sidecar_text(arch: &Architecture) -> String {
    arch.tensor_specs()
        .iter()
        .map(|(name, (r, c))| format!("{name} {r} {c}\n"))
        .collect()
}

/// Writes the field and its sidecar manifest.
pub fn save_field(path: &Path, field: &FieldParams<f32>) -> Result<()> {
    let bytes = field_to_bytes(field)?;
    write_atomic(&sidecar_path(path), sidecar_text(&field.arch).as_bytes())?;
    write_atomic(path, &bytes)
}

pub fn load_field(path: &Path) -> Result<FieldParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    field_from_bytes(&bytes, path)
}

pub fn adam_to_bytes(state: &AdamState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ADAM_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&state.step.to_le_bytes());
    let c = state.config;
    for v in [c.lr, c.beta1, c.beta2, c.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(&mut out, state.m.len() as u32);
    put_tensors(&mut out, &state.m);
    put_tensors(&mut out, &state.v);
    out
}

/// Decodes optimizer state for parameters of the given shapes.
pub fn adam_from_bytes(bytes: &[u8], shapes: &[(usize, usize)], origin: &Path) -> Result<AdamState<f32>> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(4, "magic")? != ADAM_MAGIC {
        return Err(Error::format(origin, "not an optimizer state file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(origin, format!("unsupported optimizer state version {version}")));
    }
    let step = r.u64("step")?;
    let config = AdamConfig {
        lr: r.f64("lr")?,
        beta1: r.f64("beta1")?,
        beta2: r.f64("beta2")?,
        eps: r.f64("eps")?,
    };
    let count = r.u32("tensor count")? as usize;
    if count != shapes.len() {
        return Err(Error::format(
            origin,
            format!("{count} moment tensors stored, expected {}", shapes.len()),
        ));
    }
    let m = r.tensors(shapes, "first moments")?;
    let v = r.tensors(shapes, "second moments")?;
    r.finish()?;
    Ok(AdamState { config, m, v, step })
}

pub fn save_adam(path: &Path, state: &AdamState<f32>) -> Result<()> {
    write_atomic(path, &adam_to_bytes(state))
}

pub fn load_adam(path: &Path, shapes: &[(usize, usize)]) -> Result<AdamState<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    adam_from_bytes(&bytes, shapes, path)
}
