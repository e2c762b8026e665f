//! Embedding files.
//!
//! Text layout (comma separated, `#` starts the header line):
//!
//! ```text
//! #GMNE,1,<d_in>,<record count>,<role>
//! <sample_id>,<identity>,<domain>,<camera>,<x_0>,...,<x_{d_in-1}>
//! ```
//!
//! Reals are written with the shortest representation that parses back to
//! the same bits.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic "GMNE" | version u32 | d_in u32 | count u64 | role u32
//! count × { sample_id u64 | identity u32 | domain u32 | camera u32 | d_in × f64 }
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::data::{Dataset, Role, SampleRecord};
use crate::error::{GmnError, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"GMNE";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Text,
    Binary,
}

impl EmbeddingFormat {
    /// `.bin` and `.gmne` are binary, everything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("gmne") => EmbeddingFormat::Binary,
            _ => EmbeddingFormat::Text,
        }
    }
}

impl FromStr for EmbeddingFormat {
    type Err = GmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "csv" => Ok(EmbeddingFormat::Text),
            "binary" | "bin" => Ok(EmbeddingFormat::Binary),
            other => Err(GmnError::config("format", format!("unknown format `{other}`"))),
        }
    }
}

pub fn save_embeddings(dataset: &Dataset, path: &Path, format: EmbeddingFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| GmnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        EmbeddingFormat::Text => write_text(dataset, &mut w),
        EmbeddingFormat::Binary => write_binary(dataset, &mut w),
    };
    res.and_then(|_| w.flush()).map_err(|e| GmnError::io(path, e))
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| GmnError::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        EmbeddingFormat::Text => read_text(reader, path),
        EmbeddingFormat::Binary => read_binary(reader, path),
    }
}

fn write_text<W: Write>(ds: &Dataset, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "#GMNE,{},{},{},{}", EMBEDDING_VERSION, ds.d_in(), ds.len(), ds.role())?;
    for r in ds.records() {
        write!(w, "{},{},{},{}", r.sample_id, r.identity, r.domain, r.camera)?;
        for v in &r.embedding {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn ingest(row: usize, reason: impl Into<String>) -> GmnError {
    GmnError::Ingest {
        row,
        reason: reason.into(),
    }
}

fn parse_field<T: FromStr>(row: usize, name: &str, raw: Option<&str>) -> Result<T> {
    let raw = raw.ok_or_else(|| ingest(row, format!("missing field `{name}`")))?;
    raw.trim()
        .parse()
        .map_err(|_| ingest(row, format!("cannot parse `{name}` from `{raw}`")))
}

/// Rows are numbered from 1 with the header as row 1.
fn read_text<R: BufRead>(reader: R, path: &Path) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| GmnError::io(path, e))?,
        None => return Err(ingest(1, "empty file")),
    };
    let mut fields = header
        .strip_prefix("#GMNE,")
        .ok_or_else(|| ingest(1, "missing `#GMNE` header"))?
        .split(',');
    let version: u32 = parse_field(1, "version", fields.next())?;
    if version != EMBEDDING_VERSION {
        return Err(GmnError::Version {
            found: version,
            expected: EMBEDDING_VERSION,
        });
    }
    let d_in: usize = parse_field(1, "d_in", fields.next())?;
    let count: usize = parse_field(1, "count", fields.next())?;
    let role: Role = fields
        .next()
        .ok_or_else(|| ingest(1, "missing field `role`"))?
        .trim()
        .parse()
        .map_err(|_| ingest(1, "unknown role"))?;

    let mut records = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let line = line.map_err(|e| GmnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let sample_id = parse_field(row, "sample_id", parts.next())?;
        let identity = parse_field(row, "identity", parts.next())?;
        let domain = parse_field(row, "domain", parts.next())?;
        let camera = parse_field(row, "camera", parts.next())?;
        let embedding = parts
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| ingest(row, format!("cannot parse real `{p}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if embedding.len() != d_in {
            return Err(ingest(
                row,
                format!("expected {d_in} embedding values, found {}", embedding.len()),
            ));
        }
        records.push(SampleRecord {
            sample_id,
            identity,
            domain,
            camera,
            embedding,
        });
    }
    if records.len() != count {
        return Err(ingest(
            records.len() + 1,
            format!("header declares {count} records, file has {}", records.len()),
        ));
    }
    // Renumber row-level errors from Dataset::new (0-based record index) to file rows.
    Dataset::new(records, d_in, role).map_err(|e| match e {
        GmnError::Ingest { row, reason } => GmnError::Ingest { row: row + 2, reason },
        other => other,
    })
}

fn write_binary<W: Write>(ds: &Dataset, w: &mut W) -> std::io::Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(ds.d_in() as u32).to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&ds.role().code().to_le_bytes())?;
    for r in ds.records() {
        w.write_all(&r.sample_id.to_le_bytes())?;
        w.write_all(&r.identity.to_le_bytes())?;
        w.write_all(&r.domain.to_le_bytes())?;
        w.write_all(&r.camera.to_le_bytes())?;
        for v in &r.embedding {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, row: usize) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| ingest(row, "unexpected end of file"))?;
    Ok(buf)
}

/// Row 0 is the header; record `i` is row `i + 1`.
fn read_binary<R: Read>(mut r: R, _path: &Path) -> Result<Dataset> {
    let magic: [u8; 4] = read_exact(&mut r, 0)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(ingest(0, "bad magic bytes"));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, 0)?);
    if version != EMBEDDING_VERSION {
        return Err(GmnError::Version {
            found: version,
            expected: EMBEDDING_VERSION,
        });
    }
    let d_in = u32::from_le_bytes(read_exact(&mut r, 0)?) as usize;
    let count = u64::from_le_bytes(read_exact(&mut r, 0)?) as usize;
    let role = Role::from_code(u32::from_le_bytes(read_exact(&mut r, 0)?))
        .ok_or_else(|| ingest(0, "unknown role code"))?;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let row = i + 1;
        let sample_id = u64::from_le_bytes(read_exact(&mut r, row)?);
        let identity = u32::from_le_bytes(read_exact(&mut r, row)?);
        let domain = u32::from_le_bytes(read_exact(&mut r, row)?);
        let camera = u32::from_le_bytes(read_exact(&mut r, row)?);
        let embedding = (0..d_in)
            .map(|_| read_exact(&mut r, row).map(f64::from_le_bytes))
            .collect::<Result<Vec<f64>>>()?;
        records.push(SampleRecord {
            sample_id,
            identity,
            domain,
            camera,
            embedding,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).unwrap_or(0) != 0 {
        return Err(ingest(count + 1, "trailing bytes after declared records"));
    }
    Dataset::new(records, d_in, role).map_err(|e| match e {
        GmnError::Ingest { row, reason } => GmnError::Ingest { row: row + 1, reason },
        other => other,
    })
}
