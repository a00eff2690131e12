//! Sized binary checkpoint of a field: a fixed little-endian header that
//! records the architecture and domain, followed by the raw parameters.

use std::path::Path;

use super::{DeformationField, FieldSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DAFD";
const VERSION: u32 = 1;

pub fn write_blob(field: &DeformationField) -> Vec<u8> {
    let s = field.spec();
    let mut out = Vec::with_capacity(128 + field.num_params() * 8);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        s.levels as u32,
        s.features as u32,
        s.log2_table,
        s.hidden as u32,
        s.embed_dim as u32,
        s.views as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let floats = [s.output_scale, s.coarsest_cell, s.finest_cell];
    for v in floats.iter().chain(&s.bbox_min).chain(&s.bbox_max) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(field.num_params() as u64).to_le_bytes());
    for p in field.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Checkpoint("truncated field blob".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_blob(bytes: &[u8]) -> Result<DeformationField> {
    let mut c = Cursor(bytes);
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a field blob".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported field blob version {version}")));
    }
    let levels = c.u32()? as usize;
    let features = c.u32()? as usize;
    let log2_table = c.u32()?;
    let hidden = c.u32()? as usize;
    let embed_dim = c.u32()? as usize;
    let views = c.u32()? as usize;
    let output_scale = c.f64()?;
    let coarsest_cell = c.f64()?;
    let finest_cell = c.f64()?;
    let bbox_min = [c.f64()?, c.f64()?, c.f64()?];
    let bbox_max = [c.f64()?, c.f64()?, c.f64()?];
    let spec = FieldSpec {
        levels,
        features,
        log2_table,
        hidden,
        embed_dim,
        views,
        output_scale,
        bbox_min,
        bbox_max,
        coarsest_cell,
        finest_cell,
    };
    let mut field = DeformationField::zeroed(spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = u64::from_le_bytes(c.take(8)?.try_into().unwrap()) as usize;
    if n != field.num_params() {
        return Err(Error::Checkpoint(format!(
            "blob holds {n} parameters, architecture needs {}",
            field.num_params()
        )));
    }
    for p in field.params_mut() {
        *p = c.f64()?;
    }
    if !c.0.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after field parameters".into()));
    }
    Ok(field)
}

impl DeformationField {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, write_blob(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_blob(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
