//! Exact cosine top-k search over embeddings of the world's canonical
//! addresses.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::address::Lexicon;
use crate::embedder::SpatialEncoder;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Matrix};
use crate::world::World;

pub const INDEX_MAGIC: &[u8; 8] = b"GRWINDX\0";
const INDEX_VERSION: u32 = 1;
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub record_ids: Vec<usize>,
    /// One unit-norm row per entry, aligned with `record_ids`.
    pub embeddings: Matrix<f32>,
    pub encoder_checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub record_id: usize,
    pub score: f64,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    /// Exact top-`k` by cosine similarity, descending, ties to the lower
    /// record id. `k` larger than the index yields the full ranking.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim()
            )));
        }
        let mut hits: Vec<Hit> = self
            .record_ids
            .iter()
            .enumerate()
            .map(|(row, &record_id)| Hit {
                record_id,
                score: dot(self.embeddings.row(row), query),
            })
            .collect();
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        Ok(hits)
    }
}

/// Descending score, then ascending record id.
fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.record_id.cmp(&b.record_id))
}

/// Dot product accumulated in `f64`, sequentially.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Embeds `(record id, text)` entries in order.
pub fn build_index_from(
    encoder: &SpatialEncoder<f32>,
    lexicon: &Lexicon,
    entries: &[(usize, &str)],
) -> Result<VectorIndex> {
    let mut embeddings = Matrix::zeros(entries.len(), encoder.cfg.dim);
    for (c, chunk) in entries.chunks(512).enumerate() {
        let texts: Vec<&str> = chunk.iter().map(|e| e.1).collect();
        let e = encoder.encode_batch(lexicon, &texts)?;
        let start = c * 512 * encoder.cfg.dim;
        embeddings.data[start..start + e.data.len()].copy_from_slice(&e.data);
    }
    Ok(VectorIndex {
        record_ids: entries.iter().map(|e| e.0).collect(),
        embeddings,
        encoder_checksum: encoder.params.checksum(),
    })
}

pub fn build_index(world: &World, encoder: &SpatialEncoder<f32>) -> Result<VectorIndex> {
    let entries: Vec<(usize, &str)> = world
        .records
        .iter()
        .map(|r| (r.id, r.canonical_text.as_str()))
        .collect();
    build_index_from(encoder, &world.lexicon, &entries)
}

/// The index together with the encoder that produced it, so queries are
/// embedded consistently.
#[derive(Debug, Clone)]
pub struct Retriever {
    pub index: VectorIndex,
    pub encoder: SpatialEncoder<f32>,
}

impl Retriever {
    pub fn new(index: VectorIndex, encoder: SpatialEncoder<f32>) -> Result<Self> {
        if index.encoder_checksum != encoder.params.checksum() {
            return Err(Error::InvalidArgument(
                "index was built with a different encoder".into(),
            ));
        }
        Ok(Retriever { index, encoder })
    }

    pub fn build(world: &World, encoder: SpatialEncoder<f32>) -> Result<Self> {
        let index = build_index(world, &encoder)?;
        Ok(Retriever { index, encoder })
    }

    /// Embeds the raw query text and returns the top-`k` records.
    pub fn retrieve(&self, lexicon: &Lexicon, query: &str, k: usize) -> Result<Vec<Hit>> {
        let q = self.encoder.encode(lexicon, query)?;
        self.index.search(&q, k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let enc = self.encoder.to_checkpoint().to_bytes()?;
        let header = serde_json::to_vec(&IndexHeader {
            encoder_checksum: self.index.encoder_checksum.clone(),
            dim: self.index.dim(),
            record_ids: self.index.record_ids.clone(),
            encoder_bytes: enc.len(),
        })?;
        let mut out =
            Vec::with_capacity(20 + header.len() + enc.len() + 4 * self.index.embeddings.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&enc);
        for x in &self.index.embeddings.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |r: &str| Error::format(path, r.to_string());
        if bytes.len() < 20 || &bytes[..8] != INDEX_MAGIC {
            return Err(bad("not an index file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != INDEX_VERSION {
            return Err(bad(&format!("unsupported index version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header: IndexHeader = serde_json::from_slice(
            bytes
                .get(20..20 + hlen)
                .ok_or_else(|| bad("truncated header"))?,
        )
        .map_err(|e| bad(&e.to_string()))?;
        let enc_start = 20 + hlen;
        let enc_bytes = bytes
            .get(enc_start..enc_start + header.encoder_bytes)
            .ok_or_else(|| bad("truncated encoder"))?;
        let encoder = SpatialEncoder::from_checkpoint(&Checkpoint::from_bytes(enc_bytes, path)?)?;
        let data = &bytes[enc_start + header.encoder_bytes..];
        if data.len() != 4 * header.dim * header.record_ids.len() {
            return Err(bad("embedding block has the wrong size"));
        }
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let index = VectorIndex {
            embeddings: Matrix::from_vec(header.record_ids.len(), header.dim, values),
            record_ids: header.record_ids,
            encoder_checksum: header.encoder_checksum,
        };
        Retriever::new(index, encoder)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    encoder_checksum: String,
    dim: usize,
    record_ids: Vec<usize>,
    encoder_bytes: usize,
}

/// Fraction of `(record id, query)` pairs whose record is among the top `k`.
pub fn recall_at_k(
    retriever: &Retriever,
    lexicon: &Lexicon,
    queries: &[(usize, String)],
    k: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let mut hits = 0;
    for (id, q) in queries {
        if retriever
            .retrieve(lexicon, q, k)?
            .iter()
            .any(|h| h.record_id == *id)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{fresh_encoder, EncoderConfig};
    use crate::world::WorldParams;

    fn setup() -> (World, Retriever) {
        let world = World::generate(&WorldParams {
            branching: vec![2, 2, 2, 2, 2, 2],
            ..WorldParams::default()
        })
        .unwrap();
        let enc = fresh_encoder(EncoderConfig::default(), &world, 3).unwrap();
        let r = Retriever::build(&world, enc).unwrap();
        (world, r)
    }

    #[test]
    fn one_entry_per_record_and_rebuild_is_identical() {
        let (world, r) = setup();
        assert_eq!(r.index.len(), 64);
        let again = build_index(&world, &r.encoder).unwrap();
        assert_eq!(again, r.index);
    }

    #[test]
    fn adding_a_record_changes_one_entry() {
        let (world, r) = setup();
        let mut entries: Vec<(usize, &str)> = world
            .records
            .iter()
            .map(|x| (x.id, x.canonical_text.as_str()))
            .collect();
        let extra = format!(
            "{}, Room 999",
            world.records[0].prefix_text(crate::address::HierarchyTier::POI)
        );
        entries.push((64, &extra));
        let grown = build_index_from(&r.encoder, &world.lexicon, &entries).unwrap();
        assert_eq!(grown.len(), 65);
        for row in 0..64 {
            assert_eq!(grown.embeddings.row(row), r.index.embeddings.row(row));
        }
    }

    #[test]
    fn self_retrieval_ranks_first_and_scores_descend() {
        let (world, r) = setup();
        for rec in world.records.iter().step_by(7) {
            let hits = r.retrieve(&world.lexicon, &rec.canonical_text, 10).unwrap();
            assert_eq!(hits.len(), 10);
            assert_eq!(hits[0].record_id, rec.id);
            assert!((hits[0].score - 1.0).abs() < 1e-6);
            assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
            assert!(hits.iter().all(|h| h.score.abs() <= 1.0 + 1e-6));
        }
        let all = r.retrieve(&world.lexicon, "anything", 1000).unwrap();
        assert_eq!(all.len(), 64);
        assert!(r.retrieve(&world.lexicon, "x", 0).is_err());
    }

    #[test]
    fn ties_break_by_record_id() {
        let index = VectorIndex {
            record_ids: vec![5, 2, 9],
            embeddings: Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
            encoder_checksum: String::new(),
        };
        let hits = index.search(&[1.0, 0.0], 2).unwrap();
        assert_eq!(
            hits.iter().map(|h| h.record_id).collect::<Vec<_>>(),
            vec![2, 5]
        );
    }

    #[test]
    fn save_load_round_trip() {
        let (world, r) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        r.save(&path).unwrap();
        let back = Retriever::load(&path).unwrap();
        assert_eq!(back.index, r.index);
        let q = &world.records[5].canonical_text;
        assert_eq!(
            back.retrieve(&world.lexicon, q, 10).unwrap(),
            r.retrieve(&world.lexicon, q, 10).unwrap()
        );
        fs::write(&path, b"junk").unwrap();
        assert!(matches!(Retriever::load(&path), Err(Error::Format { .. })));
    }
}
