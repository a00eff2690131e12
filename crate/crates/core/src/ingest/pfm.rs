//! Grayscale PFM rasters (`Pf`), little-endian, rows stored bottom-up.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height x width` float raster, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, x: f32) {
        self.data[v * self.width + u] = x;
    }
}

pub fn write_pfm(path: &Path, r: &Raster) -> Result<()> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", r.width, r.height).into_bytes();
    out.reserve(r.data.len() * 4);
    for v in (0..r.height).rev() {
        for u in 0..r.width {
            out.extend_from_slice(&r.get(u, v).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Raster> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let bad = |m: &str| Error::Pfm(format!("{}: {m}", path.display()));
    let mut tokens = Vec::new();
    // magic, width, height, scale: whitespace separated, the last one is
    // followed by a single newline before the data
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "Pf" {
        return Err(bad("only grayscale `Pf` rasters are supported"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let mut bytes = vec![0u8; width * height * 4];
    r.read_exact(&mut bytes).map_err(|_| bad("truncated data"))?;
    let mut out = Raster::new(width, height);
    for (k, c) in bytes.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let x = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (u, vb) = (k % width, k / width);
        out.set(u, height - 1 - vb, x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_keeps_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let mut r = Raster::new(3, 2);
        r.set(0, 0, 1.5);
        r.set(2, 1, -4.25);
        write_pfm(&p, &r).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // first stored row is the bottom image row
        let data = &bytes[b"Pf\n3 2\n-1.0\n".len()..];
        assert_eq!(f32::from_le_bytes(data[8..12].try_into().unwrap()), -4.25);
        assert_eq!(read_pfm(&p).unwrap(), r);
    }

    #[test]
    fn rejects_color_pfm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pfm");
        std::fs::write(&p, b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(read_pfm(&p).is_err());
    }
}
