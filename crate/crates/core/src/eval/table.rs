use std::collections::HashMap;
use std::path::Path;

use crate::data::NoteId;
use crate::error::{Error, Result};

pub const TABLE_MAGIC: &[u8; 8] = b"MLRMEMB1";

/// Unit-normalised `f32` embeddings keyed by note id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<NoteId>,
    data: Vec<f32>,
    index: HashMap<NoteId, usize>,
}

impl EmbeddingTable {
    fn index_ids(ids: &[NoteId]) -> Result<HashMap<NoteId, usize>> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Data(format!(
                    "duplicate note id {id} in embedding table"
                )));
            }
        }
        Ok(index)
    }

    /// Normalises each vector (in `f64`) and stores it as `f32`.
    pub fn from_vectors(ids: Vec<NoteId>, vectors: &[Vec<f64>]) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::shape(
                "embedding table",
                &[ids.len()],
                &[vectors.len()],
            ));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for v in vectors {
            if v.len() != dim {
                return Err(Error::shape("embedding table", &[dim], &[v.len()]));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm("embedding table"));
            }
            data.extend(v.iter().map(|x| (x / norm) as f32));
        }
        Self::from_raw(dim, ids, data)
    }

    /// Takes stored rows as they are.
    pub fn from_raw(dim: usize, ids: Vec<NoteId>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::shape(
                "embedding table",
                &[ids.len(), dim],
                &[data.len()],
            ));
        }
        let index = Self::index_ids(&ids)?;
        Ok(EmbeddingTable {
            dim,
            ids,
            data,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[NoteId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: NoteId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn vector(&self, id: NoteId) -> Result<&[f32]> {
        self.position(id)
            .map(|i| self.row(i))
            .ok_or_else(|| Error::Data(format!("note {id} is not in the embedding table")))
    }

    /// Rows restricted to `ids`, in the given order.
    pub fn subset(&self, ids: &[NoteId]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(self.vector(id)?);
        }
        Self::from_raw(self.dim, ids.to_vec(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.ids.len() * (8 + 4 * self.dim));
        out.extend(TABLE_MAGIC);
        out.extend((self.ids.len() as u32).to_le_bytes());
        out.extend((self.dim as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend(id.to_le_bytes());
            for x in self.row(i) {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("embedding table: {m}"));
        if bytes.len() < 16 || &bytes[..8] != TABLE_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let row = 8 + 4 * dim;
        if bytes.len() != 16 + count * row {
            return Err(bad("length does not match header"));
        }
        let mut ids = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for r in bytes[16..].chunks_exact(row) {
            ids.push(u64::from_le_bytes(r[..8].try_into().unwrap()));
            data.extend(
                r[8..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
        }
        Self::from_raw(dim, ids, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
