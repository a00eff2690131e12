//! Minimal PLY support: a single `vertex` element of scalar properties,
//! written as `binary_little_endian`, read from binary little endian or ASCII.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            PlyType::I8 => "char",
            PlyType::U8 => "uchar",
            PlyType::I16 => "short",
            PlyType::U16 => "ushort",
            PlyType::I32 => "int",
            PlyType::U32 => "uint",
            PlyType::F32 => "float",
            PlyType::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn write_le(self, x: f64, out: &mut Vec<u8>) {
        match self {
            PlyType::I8 => out.push(x as i8 as u8),
            PlyType::U8 => out.push(x as u8),
            PlyType::I16 => out.extend_from_slice(&(x as i16).to_le_bytes()),
            PlyType::U16 => out.extend_from_slice(&(x as u16).to_le_bytes()),
            PlyType::I32 => out.extend_from_slice(&(x as i32).to_le_bytes()),
            PlyType::U32 => out.extend_from_slice(&(x as u32).to_le_bytes()),
            PlyType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            PlyType::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Column-oriented vertex table. Values are widened to `f64` on read and
/// narrowed to the declared type on write.
#[derive(Clone, Debug, Default)]
pub struct VertexTable {
    pub len: usize,
    pub columns: Vec<(String, PlyType, Vec<f64>)>,
}

impl VertexTable {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            columns: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, ty: PlyType, values: Vec<f64>) {
        assert_eq!(values.len(), self.len, "column {name} has wrong length");
        self.columns.push((name.to_string(), ty, values));
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| v.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| Error::Ply(format!("missing vertex property `{name}`")))
    }

    pub fn property_type(&self, name: &str) -> Option<PlyType> {
        self.columns
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| *t)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
        header.push_str(&format!("element vertex {}\n", self.len));
        for (name, ty, _) in &self.columns {
            header.push_str(&format!("property {} {}\n", ty.name(), name));
        }
        header.push_str("end_header\n");
        let io = |e| Error::io("<ply>", e);
        w.write_all(header.as_bytes()).map_err(io)?;
        let stride: usize = self.columns.iter().map(|(_, t, _)| t.size()).sum();
        let mut buf = Vec::with_capacity(stride * 4096);
        for i in 0..self.len {
            for (_, ty, vals) in &self.columns {
                ty.write_le(vals[i], &mut buf);
            }
            if buf.len() >= stride * 4096 {
                w.write_all(&buf).map_err(io)?;
                buf.clear();
            }
        }
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(f)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
            line.clear();
            let n = r.read_line(line).map_err(|e| Error::io("<ply>", e))?;
            if n == 0 {
                return Err(Error::Ply("unexpected end of header".into()));
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.trim() != "ply" {
            return Err(Error::Ply("missing magic".into()));
        }
        let mut ascii = false;
        let mut vertex_count = None;
        let mut in_vertex = false;
        let mut seen_other_before_vertex = false;
        let mut props: Vec<(String, PlyType)> = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["format", fmt, _] => match *fmt {
                    "binary_little_endian" => ascii = false,
                    "ascii" => ascii = true,
                    other => return Err(Error::Ply(format!("unsupported format {other}"))),
                },
                ["comment", ..] | ["obj_info", ..] | [] => {}
                ["element", name, count] => {
                    let count: usize = count
                        .parse()
                        .map_err(|_| Error::Ply(format!("bad element count {count}")))?;
                    if *name == "vertex" {
                        if seen_other_before_vertex {
                            return Err(Error::Ply("vertex must be the first element".into()));
                        }
                        vertex_count = Some(count);
                        in_vertex = true;
                    } else {
                        if vertex_count.is_none() {
                            seen_other_before_vertex = true;
                        }
                        in_vertex = false;
                    }
                }
                ["property", "list", ..] if in_vertex => {
                    return Err(Error::Ply("list properties on vertices are unsupported".into()))
                }
                ["property", ty, name] if in_vertex => {
                    let ty = PlyType::parse(ty)
                        .ok_or_else(|| Error::Ply(format!("unknown property type {ty}")))?;
                    props.push((name.to_string(), ty));
                }
                ["property", ..] => {}
                ["end_header"] => break,
                other => return Err(Error::Ply(format!("unexpected header line {other:?}"))),
            }
        }
        let len = vertex_count.ok_or_else(|| Error::Ply("no vertex element".into()))?;
        let mut cols: Vec<Vec<f64>> = props.iter().map(|_| Vec::with_capacity(len)).collect();
        if ascii {
            let mut read = 0;
            while read < len {
                next_line(&mut r, &mut line)?;
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.is_empty() {
                    continue;
                }
                if toks.len() < props.len() {
                    return Err(Error::Ply(format!("short vertex row {read}")));
                }
                for (c, t) in cols.iter_mut().zip(&toks) {
                    c.push(
                        t.parse()
                            .map_err(|_| Error::Ply(format!("bad value {t} in row {read}")))?,
                    );
                }
                read += 1;
            }
        } else {
            let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
            let mut data = vec![0u8; stride * len];
            r.read_exact(&mut data)
                .map_err(|_| Error::Ply("truncated vertex data".into()))?;
            for row in data.chunks_exact(stride.max(1)).take(len) {
                let mut off = 0;
                for (c, (_, ty)) in cols.iter_mut().zip(&props) {
                    c.push(ty.read_le(&row[off..]));
                    off += ty.size();
                }
            }
        }
        Ok(Self {
            len,
            columns: props
                .into_iter()
                .zip(cols)
                .map(|((n, t), c)| (n, t, c))
                .collect(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f)
    }
}
