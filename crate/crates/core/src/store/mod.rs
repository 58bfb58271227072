//! Immutable on-disk tables of precomputed embeddings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     8  magic "FSTORE01"
//!      8     4  version (u32, currently 1)
//!     12     4  dim (u32, >= 1)
//!     16     8  count (u64)
//!     24     4  modality (u32: 0 = vision, 1 = text)
//!     28     4  reserved, zero
//!     32     8  id_table_offset (u64) = 40 + count * dim * 4
//!     40     .  payload: count * dim f32 values, row-major
//!      .     .  id table: (count + 1) u64 offsets into the id blob, then the
//!               UTF-8 id blob itself
//! ```
//!
//! The payload is a contiguous row-major matrix, so batches are strided
//! reads out of the memory map.

mod pairs;

pub use pairs::{build_pairs, parse_pair_manifest, PairedDataset};

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use ndarray::{Array2, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"FSTORE01";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    fn code(self) -> u32 {
        match self {
            Modality::Vision => 0,
            Modality::Text => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Modality::Vision),
            1 => Some(Modality::Text),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FeatureStoreHeader {
    pub version: u32,
    pub dim: u32,
    pub count: u64,
    pub modality: Modality,
    pub id_table_offset: u64,
}

impl FeatureStoreHeader {
    pub fn payload_len(&self) -> u64 {
        self.count * self.dim as u64 * 4
    }

    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut buf = [0u8; HEADER_LEN as usize];
        buf[0..8].copy_from_slice(&MAGIC);
        buf[8..12].copy_from_slice(&self.version.to_le_bytes());
        buf[12..16].copy_from_slice(&self.dim.to_le_bytes());
        buf[16..24].copy_from_slice(&self.count.to_le_bytes());
        buf[24..28].copy_from_slice(&self.modality.code().to_le_bytes());
        buf[32..40].copy_from_slice(&self.id_table_offset.to_le_bytes());
        buf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

impl FeatureRecord {
    pub fn new(id: impl Into<String>, vector: Vec<f32>) -> Self {
        Self { id: id.into(), vector }
    }
}

/// Streaming writer. Records are validated as they arrive; the header is
/// patched in once the final count is known.
pub struct StoreWriter {
    path: PathBuf,
    out: BufWriter<File>,
    dim: usize,
    modality: Modality,
    ids: Vec<String>,
    seen: HashSet<String>,
}

impl StoreWriter {
    pub fn create(path: impl AsRef<Path>, dim: usize, modality: Modality) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!("store dim must be in 1..=u32::MAX, got {dim}")));
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&[0u8; HEADER_LEN as usize]).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, out, dim, modality, ids: Vec::new(), seen: HashSet::new() })
    }

    pub fn push(&mut self, record: &FeatureRecord) -> Result<()> {
        if record.vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                id: record.id.clone(),
                expected: self.dim,
                got: record.vector.len(),
            });
        }
        if let Some(index) = record.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { id: record.id.clone(), index });
        }
        if !self.seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id.clone()));
        }
        let mut row = Vec::with_capacity(self.dim * 4);
        for v in &record.vector {
            row.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&row).map_err(|e| Error::io(&self.path, e))?;
        self.ids.push(record.id.clone());
        Ok(())
    }

    pub fn finish(mut self) -> Result<FeatureStoreHeader> {
        let count = self.ids.len() as u64;
        let header = FeatureStoreHeader {
            version: VERSION,
            dim: self.dim as u32,
            count,
            modality: self.modality,
            id_table_offset: HEADER_LEN + count * self.dim as u64 * 4,
        };
        let io = |e| Error::io(&self.path, e);
        let mut offset = 0u64;
        self.out.write_all(&offset.to_le_bytes()).map_err(io)?;
        for id in &self.ids {
            offset += id.len() as u64;
            self.out.write_all(&offset.to_le_bytes()).map_err(io)?;
        }
        for id in &self.ids {
            self.out.write_all(id.as_bytes()).map_err(io)?;
        }
        self.out.seek(SeekFrom::Start(0)).map_err(io)?;
        self.out.write_all(&header.encode()).map_err(io)?;
        self.out.flush().map_err(io)?;
        Ok(header)
    }
}

/// Write `records` to a new store at `path`. A failed write leaves no file
/// behind.
pub fn write_store<I>(records: I, dim: usize, modality: Modality, path: impl AsRef<Path>) -> Result<FeatureStoreHeader>
where
    I: IntoIterator<Item = FeatureRecord>,
{
    let path = path.as_ref();
    let run = || -> Result<FeatureStoreHeader> {
        let mut writer = StoreWriter::create(path, dim, modality)?;
        for record in records {
            writer.push(&record)?;
        }
        writer.finish()
    };
    let result = run();
    if result.is_err() {
        let _ = fs::remove_file(path);
    }
    result
}

/// Read-only, memory-mapped view of a store. Only the id table is decoded
/// eagerly; vectors are decoded on access.
#[derive(Debug)]
pub struct StoreHandle {
    path: PathBuf,
    header: FeatureStoreHeader,
    map: Mmap,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn read_u64(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

pub fn open_store(path: impl AsRef<Path>) -> Result<StoreHandle> {
    StoreHandle::open(path)
}

impl StoreHandle {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        // SAFETY: stores are immutable once written; nothing in this process
        // writes to a mapped file.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(&path, e))?;
        let actual = map.len() as u64;
        let corrupt = |reason: String| Error::CorruptStore { path: path.clone(), reason };

        if actual < 8 {
            return Err(Error::TruncatedFile { path, expected: HEADER_LEN, actual });
        }
        if map[0..8] != MAGIC {
            let found = map[0..8].try_into().unwrap();
            return Err(Error::BadMagic { path, found });
        }
        if actual < HEADER_LEN {
            return Err(Error::TruncatedFile { path, expected: HEADER_LEN, actual });
        }
        let version = read_u32(&map, 8);
        if version != VERSION {
            return Err(Error::VersionUnsupported { path, found: version });
        }
        let dim = read_u32(&map, 12);
        let count = read_u64(&map, 16);
        let modality = Modality::from_code(read_u32(&map, 24))
            .ok_or_else(|| corrupt(format!("unknown modality code {}", read_u32(&map, 24))))?;
        let id_table_offset = read_u64(&map, 32);
        if dim == 0 {
            return Err(corrupt("dim is zero".into()));
        }
        let expected_offset = count
            .checked_mul(dim as u64 * 4)
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| corrupt("count * dim overflows".into()))?;
        if id_table_offset != expected_offset {
            return Err(corrupt(format!("id table offset {id_table_offset}, expected {expected_offset}")));
        }
        let offsets_end = (count + 1)
            .checked_mul(8)
            .and_then(|n| n.checked_add(id_table_offset))
            .ok_or_else(|| corrupt("id table size overflows".into()))?;
        if actual < offsets_end {
            return Err(Error::TruncatedFile { path, expected: offsets_end, actual });
        }

        let table = id_table_offset as usize;
        let blob_start = offsets_end as usize;
        let blob_len = read_u64(&map, table + count as usize * 8);
        let expected_len = offsets_end + blob_len;
        if actual < expected_len {
            return Err(Error::TruncatedFile { path, expected: expected_len, actual });
        }
        if actual > expected_len {
            return Err(corrupt(format!("{} trailing bytes", actual - expected_len)));
        }

        let mut ids = Vec::with_capacity(count as usize);
        let mut index = HashMap::with_capacity(count as usize);
        let mut prev = read_u64(&map, table);
        if prev != 0 {
            return Err(corrupt("id table does not start at zero".into()));
        }
        for i in 0..count as usize {
            let next = read_u64(&map, table + (i + 1) * 8);
            if next < prev || next > blob_len {
                return Err(corrupt(format!("id offset {i} out of order")));
            }
            let bytes = &map[blob_start + prev as usize..blob_start + next as usize];
            let id = std::str::from_utf8(bytes)
                .map_err(|_| corrupt(format!("id {i} is not UTF-8")))?
                .to_owned();
            if index.insert(id.clone(), i).is_some() {
                return Err(corrupt(format!("duplicate id `{id}`")));
            }
            ids.push(id);
            prev = next;
        }

        let header = FeatureStoreHeader { version, dim, count, modality, id_table_offset };
        Ok(Self { path, header, map, ids, index })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &FeatureStoreHeader {
        &self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn modality(&self) -> Modality {
        self.header.modality
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    fn row_bytes(&self, row: usize) -> &[u8] {
        let stride = self.dim() * 4;
        let start = HEADER_LEN as usize + row * stride;
        &self.map[start..start + stride]
    }

    pub fn row_into(&self, row: usize, mut out: ArrayViewMut1<f32>) {
        for (dst, chunk) in out.iter_mut().zip(self.row_bytes(row).chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }

    pub fn row(&self, row: usize) -> Vec<f32> {
        self.row_bytes(row)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn get_by_id(&self, id: &str) -> Option<Vec<f32>> {
        self.index_of(id).map(|row| self.row(row))
    }

    /// Copy the given rows into a `rows.len() × dim` matrix.
    pub fn gather(&self, rows: &[usize]) -> Array2<f32> {
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (dst, &row) in out.rows_mut().into_iter().zip(rows) {
            self.row_into(row, dst);
        }
        out
    }

    /// Resolve ids to row indices, collecting every id that is absent.
    pub fn resolve<'a, I>(&self, ids: I) -> Result<Vec<usize>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut rows = Vec::new();
        let mut missing = Vec::new();
        for id in ids {
            match self.index_of(id) {
                Some(row) => rows.push(row),
                None => missing.push(id.to_owned()),
            }
        }
        if missing.is_empty() {
            Ok(rows)
        } else {
            Err(Error::MissingEmbedding(missing))
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = FeatureRecord> + '_ {
        (0..self.len()).map(move |row| FeatureRecord { id: self.ids[row].clone(), vector: self.row(row) })
    }

    /// Sequential batches of at most `size` rows, as `(first_row, matrix)`.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (usize, Array2<f32>)> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let rows: Vec<usize> = (start..(start + size).min(self.len())).collect();
            (start, self.gather(&rows))
        })
    }
}
