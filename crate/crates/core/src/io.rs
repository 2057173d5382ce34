//! Binary formats: the `fvecs` / `ivecs` / `bvecs` family and the graph file.
//!
//! A `*vecs` file is a sequence of records, each a little-endian `i32`
//! dimension followed by that many values (`f32`, `i32` or `u8`).
//!
//! Graph file layout (all little-endian):
//!
//! ```text
//! magic   u32  "GFKG"
//! version u32  1
//! n       u64
//! k       u32
//! entry   u32  (u32::MAX when absent)
//! n times: count u32, then count × (id u32, dist f32)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::dataset::{MetricKind, VectorDataset};
use crate::error::{Error, Result};
use crate::neighbor::{KnnGraph, NeighborEntry, NeighborList};

pub const GRAPH_MAGIC: u32 = u32::from_le_bytes(*b"GFKG");
pub const GRAPH_VERSION: u32 = 1;
const NO_ENTRY: u32 = u32::MAX;

/// Element types storable in a `*vecs` record.
pub trait VecsElement: Copy + Sized {
    fn read_from<R: Read>(r: &mut R, out: &mut [Self]) -> std::io::Result<()>;
    fn write_to<W: Write>(w: &mut W, values: &[Self]) -> std::io::Result<()>;
}

impl VecsElement for f32 {
    fn read_from<R: Read>(r: &mut R, out: &mut [Self]) -> std::io::Result<()> {
        r.read_f32_into::<LittleEndian>(out)
    }
    fn write_to<W: Write>(w: &mut W, values: &[Self]) -> std::io::Result<()> {
        values.iter().try_for_each(|&v| w.write_f32::<LittleEndian>(v))
    }
}

impl VecsElement for i32 {
    fn read_from<R: Read>(r: &mut R, out: &mut [Self]) -> std::io::Result<()> {
        r.read_i32_into::<LittleEndian>(out)
    }
    fn write_to<W: Write>(w: &mut W, values: &[Self]) -> std::io::Result<()> {
        values.iter().try_for_each(|&v| w.write_i32::<LittleEndian>(v))
    }
}

impl VecsElement for u8 {
    fn read_from<R: Read>(r: &mut R, out: &mut [Self]) -> std::io::Result<()> {
        r.read_exact(out)
    }
    fn write_to<W: Write>(w: &mut W, values: &[Self]) -> std::io::Result<()> {
        w.write_all(values)
    }
}

/// Reads every record; all records must share one dimension.
/// Returns `(dim, flat values)`.
pub fn read_vecs<T: VecsElement + Default, R: Read>(mut r: R) -> Result<(usize, Vec<T>)> {
    let mut dim: Option<usize> = None;
    let mut data = Vec::new();
    let mut record = 0usize;
    loop {
        let d = match r.read_i32::<LittleEndian>() {
            Ok(d) => d,
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        if d <= 0 {
            return Err(Error::Format(format!("record {record}: invalid dimension {d}")));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Format(format!(
                    "record {record}: dimension {d} differs from {expected}"
                )))
            }
            _ => {}
        }
        let start = data.len();
        data.resize(start + d, T::default());
        T::read_from(&mut r, &mut data[start..]).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Format(format!("record {record}: truncated"))
            } else {
                e.into()
            }
        })?;
        record += 1;
    }
    match dim {
        Some(d) => Ok((d, data)),
        None => Err(Error::Format("no records".into())),
    }
}

pub fn write_vecs<T: VecsElement, W: Write>(mut w: W, dim: usize, data: &[T]) -> Result<()> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::Usage(format!(
            "{} values do not form records of dimension {dim}",
            data.len()
        )));
    }
    for row in data.chunks_exact(dim) {
        w.write_i32::<LittleEndian>(dim as i32)?;
        T::write_to(&mut w, row)?;
    }
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn read_fvecs(path: impl AsRef<Path>) -> Result<(usize, Vec<f32>)> {
    read_vecs(open(path.as_ref())?)
}

pub fn write_fvecs(path: impl AsRef<Path>, dim: usize, data: &[f32]) -> Result<()> {
    write_vecs(create(path.as_ref())?, dim, data)
}

pub fn read_ivecs(path: impl AsRef<Path>) -> Result<(usize, Vec<i32>)> {
    read_vecs(open(path.as_ref())?)
}

pub fn write_ivecs(path: impl AsRef<Path>, dim: usize, data: &[i32]) -> Result<()> {
    write_vecs(create(path.as_ref())?, dim, data)
}

pub fn read_bvecs(path: impl AsRef<Path>) -> Result<(usize, Vec<u8>)> {
    read_vecs(open(path.as_ref())?)
}

pub fn write_bvecs(path: impl AsRef<Path>, dim: usize, data: &[u8]) -> Result<()> {
    write_vecs(create(path.as_ref())?, dim, data)
}

pub fn read_dataset(path: impl AsRef<Path>, metric: MetricKind) -> Result<VectorDataset> {
    let (dim, data) = read_fvecs(path)?;
    VectorDataset::new(data, dim, metric)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &VectorDataset) -> Result<()> {
    write_fvecs(path, ds.dim(), ds.as_slice())
}

pub fn write_graph_to<W: Write>(mut w: W, g: &KnnGraph) -> Result<()> {
    w.write_u32::<LittleEndian>(GRAPH_MAGIC)?;
    w.write_u32::<LittleEndian>(GRAPH_VERSION)?;
    w.write_u64::<LittleEndian>(g.len() as u64)?;
    w.write_u32::<LittleEndian>(g.k() as u32)?;
    w.write_u32::<LittleEndian>(g.entry().unwrap_or(NO_ENTRY))?;
    for list in g.lists() {
        write_list(&mut w, list)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_list<W: Write>(w: &mut W, list: &NeighborList) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(list.len() as u32)?;
    for e in list.entries() {
        w.write_u32::<LittleEndian>(e.id)?;
        w.write_f32::<LittleEndian>(e.dist)?;
    }
    Ok(())
}

pub(crate) fn read_list<R: Read>(r: &mut R, k: usize) -> Result<NeighborList> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count > k {
        return Err(Error::Format(format!("list of {count} entries exceeds degree {k}")));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.read_u32::<LittleEndian>()?;
        let dist = r.read_f32::<LittleEndian>()?;
        entries.push(NeighborEntry::old(id, dist));
    }
    // Ordering and id checks happen in `KnnGraph::from_lists`.
    Ok(NeighborList::raw(k, entries))
}

pub fn read_graph_from<R: Read>(mut r: R) -> Result<KnnGraph> {
    let eof = |e: std::io::Error| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Format("graph file truncated".into())
        } else {
            e.into()
        }
    };
    let magic = r.read_u32::<LittleEndian>().map_err(eof)?;
    if magic != GRAPH_MAGIC {
        return Err(Error::Format(format!("bad graph magic {magic:#010x}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != GRAPH_VERSION {
        return Err(Error::Format(format!("unsupported graph version {version}")));
    }
    let n = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
    let k = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let entry = r.read_u32::<LittleEndian>().map_err(eof)?;
    let mut lists = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        lists.push(read_list(&mut r, k).map_err(|e| match e {
            Error::Io(io) => eof(io),
            other => other,
        })?);
    }
    let mut g = KnnGraph::from_lists(k, lists).map_err(|e| Error::Format(e.to_string()))?;
    g.set_entry((entry != NO_ENTRY).then_some(entry));
    g.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(g)
}

pub fn write_graph(path: impl AsRef<Path>, g: &KnnGraph) -> Result<()> {
    write_graph_to(create(path.as_ref())?, g)
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<KnnGraph> {
    read_graph_from(open(path.as_ref())?)
}
