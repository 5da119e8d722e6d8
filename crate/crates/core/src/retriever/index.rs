//! Exact dense retrieval over the full corpus.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::retriever::model::DualEncoderModel;

const INDEX_MAGIC: &[u8; 8] = b"CSIDX01\0";
const INDEX_VERSION: u32 = 1;

/// Passage embeddings in corpus order, plus the parallel id list.
#[derive(Debug, Clone)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<String>,
    embeddings: Vec<f64>,
}

impl DenseIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for w in &self.embeddings {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::data(format!("{}: truncated index file", path.display())))?;
        if &magic != INDEX_MAGIC {
            return Err(Error::data(format!("{}: not an index file", path.display())));
        }
        let mut buf4 = [0u8; 4];
        f.read_exact(&mut buf4)?;
        if u32::from_le_bytes(buf4) != INDEX_VERSION {
            return Err(Error::data(format!("{}: unsupported index version", path.display())));
        }
        let mut buf8 = [0u8; 8];
        f.read_exact(&mut buf8)?;
        let dim = u64::from_le_bytes(buf8) as usize;
        f.read_exact(&mut buf8)?;
        let n = u64::from_le_bytes(buf8) as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            f.read_exact(&mut buf4)?;
            let len = u32::from_le_bytes(buf4) as usize;
            let mut bytes = vec![0u8; len];
            f.read_exact(&mut bytes)?;
            ids.push(String::from_utf8(bytes).map_err(|e| {
                Error::data(format!("{}: bad id encoding: {e}", path.display()))
            })?);
        }
        let mut weights = vec![0u8; n * dim * 8];
        f.read_exact(&mut weights)
            .map_err(|_| Error::data(format!("{}: truncated embeddings", path.display())))?;
        let embeddings = weights
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DenseIndex {
            dim,
            ids,
            embeddings,
        })
    }
}

/// Embeds every corpus passage. Rows follow corpus order; embedding may run
/// in parallel but assembly is ordered, so the matrix is identical for any
/// worker count.
pub fn build_index(model: &DualEncoderModel, corpus: &Corpus) -> Result<DenseIndex> {
    if corpus.is_empty() {
        return Err(Error::data("cannot index an empty corpus"));
    }
    let rows: Vec<Vec<f64>> = corpus
        .passages()
        .par_iter()
        .map(|p| model.encode_passage(p))
        .collect();
    let dim = model.dim();
    let mut embeddings = Vec::with_capacity(corpus.len() * dim);
    for row in rows {
        embeddings.extend_from_slice(&row);
    }
    Ok(DenseIndex {
        dim,
        ids: corpus.iter().map(|p| p.id.clone()).collect(),
        embeddings,
    })
}

/// Top-`min(k, N)` passages by descending dot product; ties broken by corpus
/// position (smaller first). Scores are included.
pub fn search(index: &DenseIndex, query_emb: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::validation("search requires k >= 1"));
    }
    if query_emb.len() != index.dim {
        return Err(Error::validation(format!(
            "query dim {} does not match index dim {}",
            query_emb.len(),
            index.dim
        )));
    }
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|i| {
            let row = index.row(i);
            let score: f64 = row.iter().zip(query_emb).map(|(a, b)| a * b).sum();
            (i, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k.min(index.len()))
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect())
}
