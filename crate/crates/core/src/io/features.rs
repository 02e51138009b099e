use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SGMF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Precomputed per-segment visual features.
///
/// On disk: a binary matrix (`"SGMF"`, version, dim, rows as little-endian
/// `u32`, then row-major little-endian `f32`) plus a text index with one
/// `video_id<TAB>segment_index<TAB>row` line per row.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureStore {
    dim: usize,
    index: HashMap<(String, usize), usize>,
    data: Vec<f32>,
}

/// Result of looking up a segment's feature row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureLookup<'a> {
    Found(&'a [f32]),
    Missing,
}

impl VisualFeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    /// Appends a row for `(video_id, segment)` and returns its row number.
    pub fn push(&mut self, video_id: &str, segment: usize, row: &[f32]) -> Result<usize> {
        if row.len() != self.dim {
            return Err(Error::invalid(format!(
                "feature row has {} values, store dim is {}",
                row.len(),
                self.dim
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite feature for {video_id}#{segment}")));
        }
        let r = self.rows();
        self.data.extend_from_slice(row);
        self.index.insert((video_id.to_string(), segment), r);
        Ok(r)
    }

    pub fn row_of(&self, video_id: &str, segment: usize) -> Option<usize> {
        // HashMap<(String, usize)> cannot be probed with a borrowed &str
        // pair, so the key is rebuilt here.
        self.index.get(&(video_id.to_string(), segment)).copied()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn lookup(&self, video_id: &str, segment: usize) -> FeatureLookup<'_> {
        match self.row_of(video_id, segment) {
            Some(r) => FeatureLookup::Found(self.row(r)),
            None => FeatureLookup::Missing,
        }
    }

    /// Index entries sorted by row number.
    pub fn index_entries(&self) -> Vec<(&str, usize, usize)> {
        let mut entries: Vec<_> = self
            .index
            .iter()
            .map(|((v, s), &r)| (v.as_str(), *s, r))
            .collect();
        entries.sort_by_key(|e| e.2);
        entries
    }
}

pub fn write_visual_features(
    store: &VisualFeatureStore,
    data_path: &Path,
    index_path: &Path,
) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + store.data.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(store.dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(store.rows() as u32).to_le_bytes());
    for &x in &store.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(data_path, bytes).map_err(|e| Error::io(data_path, e))?;

    let mut index = String::new();
    for (vid, seg, row) in store.index_entries() {
        index.push_str(&format!("{vid}\t{seg}\t{row}\n"));
    }
    fs::write(index_path, index).map_err(|e| Error::io(index_path, e))
}

pub fn load_visual_features(data_path: &Path, index_path: &Path) -> Result<VisualFeatureStore> {
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a feature file",
            data_path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let version = word(4);
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    let dim = word(8);
    let rows = word(12);
    if dim == 0 {
        return Err(Error::Format("feature dim must be positive".into()));
    }
    if bytes.len() != HEADER_LEN + rows * dim * 4 {
        return Err(Error::Format(format!(
            "{}: header says {rows}x{dim} but payload has {} bytes",
            data_path.display(),
            bytes.len() - HEADER_LEN
        )));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!("non-finite value in feature row {}", bad / dim)));
    }

    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let mut index = HashMap::with_capacity(rows);
    let mut lines = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        let parse_err = |msg: &str| Error::Parse {
            path: index_path.to_path_buf(),
            line: i as u64 + 1,
            msg: msg.to_string(),
        };
        let mut parts = line.split('\t');
        let (Some(vid), Some(seg), Some(row), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(parse_err("expected video_id<TAB>segment_index<TAB>row"));
        };
        let seg: usize = seg.trim().parse().map_err(|_| parse_err("bad segment index"))?;
        let row: usize = row.trim().parse().map_err(|_| parse_err("bad row number"))?;
        if row >= rows {
            return Err(Error::Format(format!(
                "{}: line {}: row {row} out of range ({rows} rows)",
                index_path.display(),
                i + 1
            )));
        }
        index.insert((vid.to_string(), seg), row);
    }
    if lines != rows {
        return Err(Error::Format(format!(
            "feature file has {rows} rows but index has {lines} lines"
        )));
    }
    Ok(VisualFeatureStore { dim, index, data })
}
