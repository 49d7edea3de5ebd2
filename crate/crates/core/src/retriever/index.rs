//! LSH-bucketed embedding snapshot for approximate maximum inner product
//! search, with an exact exhaustive fallback.
//!
//! Random-hyperplane signatures are computed over norm-augmented vectors
//! (the standard MIPS-to-cosine reduction): each document gains a
//! `sqrt(max_norm^2 - |z|^2)` coordinate and queries gain a zero, so bucket
//! collisions respect inner-product order. Hyperplanes are drawn
//! sequentially from one seeded stream, which makes tables nested in L: an
//! index with more tables always probes a superset of the candidates.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"RGIX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Lsh,
    Exhaustive,
}

impl std::str::FromStr for SearchMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsh" => Ok(SearchMode::Lsh),
            "exhaustive" => Ok(SearchMode::Exhaustive),
            other => Err(CoreError::Retrieval(format!(
                "unknown search mode `{other}` (expected lsh or exhaustive)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    pub dim: usize,
    pub tables: usize,
    pub bits: usize,
    pub seed: u64,
    /// Training step at which the stored embeddings were computed.
    pub snapshot_step: u64,
    doc_ids: Vec<String>,
    /// Flat n x dim document embeddings (the snapshot).
    embeddings: Vec<f64>,
    max_norm: f64,
    /// Flat tables x bits x (dim + 1) hyperplane normals.
    hyperplanes: Vec<f64>,
    buckets: Vec<HashMap<u64, Vec<u32>>>,
}

impl EmbeddingIndex {
    pub fn build(
        doc_ids: Vec<String>,
        embeddings: Vec<Vec<f64>>,
        tables: usize,
        bits: usize,
        seed: u64,
        snapshot_step: u64,
    ) -> Result<Self> {
        if doc_ids.is_empty() {
            return Err(CoreError::Retrieval("cannot build an index over zero documents".into()));
        }
        if doc_ids.len() != embeddings.len() {
            return Err(CoreError::Retrieval("doc id / embedding count mismatch".into()));
        }
        if tables < 1 || bits < 1 || bits > 63 {
            return Err(CoreError::Retrieval(format!(
                "invalid LSH parameters: tables={tables}, bits={bits} (need tables >= 1, 1 <= bits <= 63)"
            )));
        }
        let dim = embeddings[0].len();
        if dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
            return Err(CoreError::Retrieval("inconsistent embedding dimensions".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hyperplanes = Vec::with_capacity(tables * bits * (dim + 1));
        for _ in 0..tables * bits * (dim + 1) {
            hyperplanes.push(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        }

        let max_norm = embeddings
            .iter()
            .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0_f64, f64::max);

        let flat: Vec<f64> = embeddings.iter().flatten().copied().collect();
        let mut index = EmbeddingIndex {
            dim,
            tables,
            bits,
            seed,
            snapshot_step,
            doc_ids,
            embeddings: flat,
            max_norm,
            hyperplanes,
            buckets: vec![HashMap::new(); tables],
        };
        for i in 0..index.len() {
            let aug = index.augmented_doc(i);
            for t in 0..tables {
                let sig = index.signature(t, &aug);
                index.buckets[t].entry(sig).or_default().push(i as u32);
            }
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_id(&self, idx: usize) -> &str {
        &self.doc_ids[idx]
    }

    pub fn embedding(&self, idx: usize) -> &[f64] {
        &self.embeddings[idx * self.dim..(idx + 1) * self.dim]
    }

    fn augmented_doc(&self, idx: usize) -> Vec<f64> {
        let e = self.embedding(idx);
        let norm_sq: f64 = e.iter().map(|v| v * v).sum();
        let extra = (self.max_norm * self.max_norm - norm_sq).max(0.0).sqrt();
        let mut aug = e.to_vec();
        aug.push(extra);
        aug
    }

    fn signature(&self, table: usize, aug: &[f64]) -> u64 {
        let width = self.dim + 1;
        let mut sig = 0u64;
        for b in 0..self.bits {
            let plane = &self.hyperplanes[(table * self.bits + b) * width..(table * self.bits + b + 1) * width];
            let dot: f64 = plane.iter().zip(aug).map(|(p, v)| p * v).sum();
            if dot >= 0.0 {
                sig |= 1 << b;
            }
        }
        sig
    }

    fn stored_score(&self, idx: usize, query: &[f64]) -> f64 {
        self.embedding(idx).iter().zip(query).map(|(a, b)| a * b).sum()
    }

    /// Union of bucket contents over all tables for this query.
    pub fn lsh_candidates(&self, query: &[f64]) -> Result<BTreeSet<u32>> {
        if query.len() != self.dim {
            return Err(CoreError::Retrieval(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        let mut aug = query.to_vec();
        aug.push(0.0);
        let mut candidates = BTreeSet::new();
        for t in 0..self.tables {
            let sig = self.signature(t, &aug);
            if let Some(bucket) = self.buckets[t].get(&sig) {
                candidates.extend(bucket.iter().copied());
            }
        }
        Ok(candidates)
    }

    /// Top-k document indices by inner product against the *stored*
    /// snapshot embeddings, ties broken by doc id ascending. `Lsh` ranks
    /// the probed-bucket union and falls back to exhaustive search when
    /// that union is smaller than k.
    pub fn search(&self, query: &[f64], k: usize, mode: SearchMode) -> Result<Vec<(usize, f64)>> {
        if k < 1 {
            return Err(CoreError::Retrieval("k must be >= 1".into()));
        }
        if k > self.len() {
            return Err(CoreError::Retrieval(format!(
                "k={k} exceeds the {} indexed documents",
                self.len()
            )));
        }
        if query.len() != self.dim {
            return Err(CoreError::Retrieval(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        let candidate_indices: Vec<usize> = match mode {
            SearchMode::Exhaustive => (0..self.len()).collect(),
            SearchMode::Lsh => {
                let candidates = self.lsh_candidates(query)?;
                if candidates.len() < k {
                    (0..self.len()).collect()
                } else {
                    candidates.into_iter().map(|i| i as usize).collect()
                }
            }
        };
        let mut scored: Vec<(usize, f64)> =
            candidate_indices.into_iter().map(|i| (i, self.stored_score(i, query))).collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        });
        scored.truncate(k);
        Ok(scored)
    }

    // ── persistence ────────────────────────────────────────────────────

    pub fn save(&self, path: &Path, header: &serde_json::Value) -> Result<()> {
        let header_bytes = serde_json::to_vec(header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for v in [self.dim as u64, self.tables as u64, self.bits as u64] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.snapshot_step.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.max_norm.to_le_bytes());
        for id in &self.doc_ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for &v in &self.embeddings {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.hyperplanes {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for table in &self.buckets {
            let mut sigs: Vec<&u64> = table.keys().collect();
            sigs.sort();
            buf.extend_from_slice(&(sigs.len() as u32).to_le_bytes());
            for sig in sigs {
                buf.extend_from_slice(&sig.to_le_bytes());
                let entries = &table[sig];
                buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
                for &e in entries {
                    buf.extend_from_slice(&e.to_le_bytes());
                }
            }
        }
        retgen_numeric::atomic_write(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(serde_json::Value, Self)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(CoreError::Retrieval(format!("truncated index file {}", path.display())));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(CoreError::Retrieval(format!("bad magic in {}", path.display())));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CoreError::Retrieval(format!("unsupported index version {version}")));
        }
        let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(take(&mut pos, hlen)?)?;
        let u64_at = |pos: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let dim = u64_at(&mut pos)? as usize;
        let tables = u64_at(&mut pos)? as usize;
        let bits = u64_at(&mut pos)? as usize;
        let seed = u64_at(&mut pos)?;
        let snapshot_step = u64_at(&mut pos)?;
        let n = u64_at(&mut pos)? as usize;
        let max_norm = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut doc_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            doc_ids.push(
                std::str::from_utf8(take(&mut pos, len)?)
                    .map_err(|e| CoreError::Retrieval(format!("doc id: {e}")))?
                    .to_string(),
            );
        }
        let mut embeddings = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            embeddings.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let mut hyperplanes = Vec::with_capacity(tables * bits * (dim + 1));
        for _ in 0..tables * bits * (dim + 1) {
            hyperplanes.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let mut buckets = Vec::with_capacity(tables);
        for _ in 0..tables {
            let n_buckets = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut table = HashMap::with_capacity(n_buckets);
            for _ in 0..n_buckets {
                let sig = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
                let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                let mut entries = Vec::with_capacity(count);
                for _ in 0..count {
                    entries.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
                }
                table.insert(sig, entries);
            }
            buckets.push(table);
        }
        Ok((
            header,
            EmbeddingIndex {
                dim,
                tables,
                bits,
                seed,
                snapshot_step,
                doc_ids,
                embeddings,
                max_norm,
                hyperplanes,
                buckets,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("doc{:04}", i)).collect()
    }

    #[test]
    fn hand_vectors_exhaustive_topk() {
        let index = EmbeddingIndex::build(
            ids(3),
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
            2,
            4,
            7,
            0,
        )
        .unwrap();
        let top = index.search(&[1.0, 0.0], 2, SearchMode::Exhaustive).unwrap();
        assert_eq!(top[0].0, 0);
        assert!((top[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(top[1].0, 2);
        assert!((top[1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn every_doc_lands_in_every_table() {
        let index = EmbeddingIndex::build(
            ids(3),
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.3]],
            5,
            3,
            1,
            0,
        )
        .unwrap();
        for table in &index.buckets {
            let total: usize = table.values().map(Vec::len).sum();
            assert_eq!(total, 3);
        }
    }

    #[test]
    fn rebuild_same_seed_is_identical() {
        let embs = vec![vec![0.2, -0.4, 0.1], vec![1.0, 0.0, 0.0], vec![0.3, 0.3, 0.3]];
        let a = EmbeddingIndex::build(ids(3), embs.clone(), 3, 5, 11, 4).unwrap();
        let b = EmbeddingIndex::build(ids(3), embs, 3, 5, 11, 4).unwrap();
        assert_eq!(a.hyperplanes, b.hyperplanes);
        assert_eq!(a.embeddings, b.embeddings);
        for (ta, tb) in a.buckets.iter().zip(&b.buckets) {
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn zero_bits_or_tables_rejected() {
        let embs = vec![vec![1.0, 0.0]];
        assert!(EmbeddingIndex::build(ids(1), embs.clone(), 0, 4, 1, 0).is_err());
        assert!(EmbeddingIndex::build(ids(1), embs, 2, 0, 1, 0).is_err());
    }

    #[test]
    fn k_larger_than_store_rejected() {
        let index = EmbeddingIndex::build(ids(2), vec![vec![1.0], vec![2.0]], 1, 1, 0, 0).unwrap();
        assert!(index.search(&[1.0], 3, SearchMode::Exhaustive).is_err());
    }

    #[test]
    fn equal_scores_tie_break_by_doc_id() {
        let index = EmbeddingIndex::build(
            vec!["b".into(), "a".into(), "c".into()],
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            1,
            1,
            0,
            0,
        )
        .unwrap();
        let top = index.search(&[1.0, 0.0], 2, SearchMode::Exhaustive).unwrap();
        // identical scores: "a" (idx 1) sorts before "b" (idx 0)
        assert_eq!(top[0].0, 1);
        assert_eq!(top[1].0, 0);
    }

    #[test]
    fn lsh_results_rank_identically_with_exhaustive_where_they_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let dim = 8;
        let embs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let index = EmbeddingIndex::build(ids(n), embs, 8, 6, 13, 0).unwrap();
        for q in 0..20 {
            let query: Vec<f64> = (0..dim).map(|i| ((q * dim + i) as f64 * 0.37).sin()).collect();
            let ex = index.search(&query, 10, SearchMode::Exhaustive).unwrap();
            let lsh = index.search(&query, 10, SearchMode::Lsh).unwrap();
            let ex_ids: Vec<usize> = ex.iter().map(|e| e.0).collect();
            let overlap: Vec<usize> = lsh.iter().map(|e| e.0).filter(|i| ex_ids.contains(i)).collect();
            let ex_filtered: Vec<usize> =
                ex_ids.iter().copied().filter(|i| overlap.contains(i)).collect();
            assert_eq!(overlap, ex_filtered, "query {q}: overlap must rank identically");
        }
    }

    #[test]
    fn nested_tables_make_candidates_monotone_in_l() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100;
        let dim = 6;
        let embs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let query: Vec<f64> = (0..dim).map(|i| (i as f64).cos()).collect();
        let mut previous = 0usize;
        for tables in [1, 2, 4, 8] {
            let index = EmbeddingIndex::build(ids(n), embs.clone(), tables, 4, 33, 0).unwrap();
            let count = index.lsh_candidates(&query).unwrap().len();
            assert!(count >= previous, "tables={tables}: {count} < {previous}");
            previous = count;
        }
    }

    #[test]
    fn index_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        let index = EmbeddingIndex::build(
            ids(4),
            vec![vec![1.0, 0.2], vec![0.1, 0.9], vec![-0.4, 0.4], vec![0.0, -1.0]],
            3,
            4,
            17,
            42,
        )
        .unwrap();
        index.save(&path, &serde_json::json!({"config_hash": "cafe", "seed": 17})).unwrap();
        let (header, loaded) = EmbeddingIndex::load(&path).unwrap();
        assert_eq!(header["config_hash"], "cafe");
        assert_eq!(loaded.snapshot_step, 42);
        assert_eq!(loaded.embeddings, index.embeddings);
        assert_eq!(loaded.hyperplanes, index.hyperplanes);
        let q = [0.3, 0.7];
        assert_eq!(
            index.search(&q, 2, SearchMode::Lsh).unwrap(),
            loaded.search(&q, 2, SearchMode::Lsh).unwrap()
        );
    }
}
