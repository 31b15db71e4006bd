//! Descriptor database, exact k-nearest-neighbor search with temporal
//! exclusion, and pose-based ground truth.

use crate::ingest::Pose;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const UNIT_NORM_TOL: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("descriptor row {0} is not unit norm")]
    NormViolation(usize),
    #[error("descriptor and metadata counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("temporal exclusion removed every candidate")]
    EmptyCandidateSet,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("query dimension {0} does not match database dimension {1}")]
    DimMismatch(usize, usize),
    #[error("malformed descriptor db: {0}")]
    MalformedContainer(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Frame metadata stored alongside each descriptor row.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RowMeta {
    pub id: u64,
    pub timestamp: f64,
    pub pose: Pose,
    pub sequence_tag: String,
}

/// Immutable store of unit-norm descriptors with parallel metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDB {
    pub dim: usize,
    /// Row-major (N, dim).
    pub data: Vec<f32>,
    pub meta: Vec<RowMeta>,
}

impl DescriptorDB {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Validates norms and freezes the rows in insertion order.
pub fn build_db(
    descriptors: &crate::tensor::Tensor,
    meta: Vec<RowMeta>,
) -> Result<DescriptorDB, RetrievalError> {
    let (n, dim) = match descriptors.shape.as_slice() {
        [n, d] => (*n, *d),
        other => {
            return Err(RetrievalError::MalformedContainer(format!(
                "descriptors must be 2-d, got {other:?}"
            )))
        }
    };
    if n != meta.len() {
        return Err(RetrievalError::CountMismatch(n, meta.len()));
    }
    for i in 0..n {
        let norm: f32 = descriptors.data[i * dim..(i + 1) * dim]
            .iter()
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(RetrievalError::NormViolation(i));
        }
    }
    Ok(DescriptorDB {
        dim,
        data: descriptors.data.clone(),
        meta,
    })
}

/// Ranked candidate list for one query, ascending L2 distance.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: u64,
    /// (database frame id, L2 distance), non-decreasing distance; ties broken
    /// by lower id.
    pub hits: Vec<(u64, f32)>,
}

/// Exact top-k search. `exclusion = (query timestamp, window)` removes rows
/// with |t_db - t_q| <= window before ranking.
pub fn search_knn(
    db: &DescriptorDB,
    query_id: u64,
    query: &[f32],
    k: usize,
    exclusion: Option<(f64, f64)>,
) -> Result<QueryResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if query.len() != db.dim {
        return Err(RetrievalError::DimMismatch(query.len(), db.dim));
    }
    let mut scored: Vec<(f32, u64)> = Vec::with_capacity(db.len());
    for i in 0..db.len() {
        if let Some((t_q, window)) = exclusion {
            if (db.meta[i].timestamp - t_q).abs() <= window {
                continue;
            }
        }
        let dist = l2_distance(query, db.row(i));
        scored.push((dist, db.meta[i].id));
    }
    if scored.is_empty() {
        return Err(RetrievalError::EmptyCandidateSet);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(QueryResult {
        query_id,
        hits: scored.into_iter().map(|(d, id)| (id, d)).collect(),
    })
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

/// Per-query set of true-positive database ids. Queries whose positive set is
/// empty are flagged `filtered` and must be dropped from metric denominators.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Parallel to the query list.
    pub positives: Vec<Vec<u64>>,
    pub filtered: Vec<bool>,
}

impl GroundTruth {
    pub fn filtered_count(&self) -> usize {
        self.filtered.iter().filter(|&&f| f).count()
    }
}

/// A database frame is a positive for a query when it lies within `tau_gt`
/// meters, and, for same-sequence pairs, is more than `delta_t` away in time.
pub fn ground_truth_positives(
    queries: &[RowMeta],
    database: &[RowMeta],
    tau_gt: f32,
    delta_t: f64,
) -> GroundTruth {
    let mut positives = Vec::with_capacity(queries.len());
    let mut filtered = Vec::with_capacity(queries.len());
    for q in queries {
        let mut pos = Vec::new();
        for d in database {
            if q.pose.distance(&d.pose) >= tau_gt {
                continue;
            }
            if q.sequence_tag == d.sequence_tag && (q.timestamp - d.timestamp).abs() <= delta_t {
                continue;
            }
            pos.push(d.id);
        }
        filtered.push(pos.is_empty());
        positives.push(pos);
    }
    GroundTruth {
        positives,
        filtered,
    }
}

pub const DB_MAGIC: &[u8; 4] = b"LPRD";
pub const DB_VERSION: u32 = 1;

/// Header (magic, version, N, d, metric tag), then row-major float32 rows,
/// then a JSON metadata table.
pub fn write_db<W: Write>(writer: &mut W, db: &DescriptorDB) -> Result<(), RetrievalError> {
    let io_err = |source: std::io::Error| RetrievalError::Io {
        path: "<writer>".into(),
        source,
    };
    writer.write_all(DB_MAGIC).map_err(io_err)?;
    writer.write_all(&DB_VERSION.to_le_bytes()).map_err(io_err)?;
    writer
        .write_all(&(db.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    writer
        .write_all(&(db.dim as u32).to_le_bytes())
        .map_err(io_err)?;
    writer.write_all(b"l2\0\0").map_err(io_err)?;
    for v in &db.data {
        writer.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    let meta = serde_json::to_vec(&db.meta)
        .map_err(|e| RetrievalError::MalformedContainer(format!("serialize metadata: {e}")))?;
    writer
        .write_all(&(meta.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    writer.write_all(&meta).map_err(io_err)?;
    Ok(())
}

pub fn read_db<R: Read>(reader: &mut R) -> Result<DescriptorDB, RetrievalError> {
    let io_err = |source: std::io::Error| RetrievalError::Io {
        path: "<reader>".into(),
        source,
    };
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(io_err)?;
    if &magic != DB_MAGIC {
        return Err(RetrievalError::MalformedContainer("bad magic".into()));
    }
    let mut w32 = [0u8; 4];
    reader.read_exact(&mut w32).map_err(io_err)?;
    let version = u32::from_le_bytes(w32);
    if version != DB_VERSION {
        return Err(RetrievalError::MalformedContainer(format!(
            "unsupported version {version}"
        )));
    }
    let mut w64 = [0u8; 8];
    reader.read_exact(&mut w64).map_err(io_err)?;
    let n = u64::from_le_bytes(w64) as usize;
    reader.read_exact(&mut w32).map_err(io_err)?;
    let dim = u32::from_le_bytes(w32) as usize;
    let mut tag = [0u8; 4];
    reader.read_exact(&mut tag).map_err(io_err)?;
    if &tag != b"l2\0\0" {
        return Err(RetrievalError::MalformedContainer("unknown metric tag".into()));
    }
    let mut data = vec![0f32; n * dim];
    let mut buf = [0u8; 4];
    for v in &mut data {
        reader.read_exact(&mut buf).map_err(io_err)?;
        *v = f32::from_le_bytes(buf);
    }
    reader.read_exact(&mut w64).map_err(io_err)?;
    let meta_len = u64::from_le_bytes(w64) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    reader.read_exact(&mut meta_buf).map_err(io_err)?;
    let meta: Vec<RowMeta> = serde_json::from_slice(&meta_buf)
        .map_err(|e| RetrievalError::MalformedContainer(format!("metadata: {e}")))?;
    if meta.len() != n {
        return Err(RetrievalError::CountMismatch(n, meta.len()));
    }
    Ok(DescriptorDB { dim, data, meta })
}

pub fn save_db(path: &Path, db: &DescriptorDB) -> Result<(), RetrievalError> {
    let mut file = std::fs::File::create(path).map_err(|source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_db(&mut file, db)
}

pub fn load_db(path: &Path) -> Result<DescriptorDB, RetrievalError> {
    let mut file = std::fs::File::open(path).map_err(|source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_db(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(id: u64, t: f64, x: f32) -> RowMeta {
        RowMeta {
            id,
            timestamp: t,
            pose: Pose::from_yaw(0.0, [x, 0.0, 0.0]),
            sequence_tag: "seq".into(),
        }
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let mut row: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            for v in &mut row {
                *v /= norm;
            }
            data.extend_from_slice(&row);
        }
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    #[test]
    fn build_db_validations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let desc = unit_rows(&mut rng, 3, 8);
        let metas: Vec<RowMeta> = (0..3).map(|i| meta(i, i as f64, i as f32)).collect();
        let db = build_db(&desc, metas.clone()).unwrap();
        assert_eq!(db.len(), 3);
        assert_eq!(db.meta[0].id, 0);

        assert!(matches!(
            build_db(&desc, metas[..2].to_vec()),
            Err(RetrievalError::CountMismatch(3, 2))
        ));

        let mut bad = desc.clone();
        for v in &mut bad.data[8..16] {
            *v *= 0.5;
        }
        assert!(matches!(
            build_db(&bad, metas),
            Err(RetrievalError::NormViolation(1))
        ));
    }

    #[test]
    fn self_match_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let desc = unit_rows(&mut rng, 20, 8);
        let metas: Vec<RowMeta> = (0..20).map(|i| meta(i, i as f64, i as f32)).collect();
        let db = build_db(&desc, metas).unwrap();
        let q: Vec<f32> = db.row(7).to_vec();
        let res = search_knn(&db, 999, &q, 3, None).unwrap();
        assert_eq!(res.hits[0].0, 7);
        assert_eq!(res.hits[0].1, 0.0);
    }

    #[test]
    fn exclusion_window_and_empty_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let desc = unit_rows(&mut rng, 10, 4);
        let metas: Vec<RowMeta> = (0..10).map(|i| meta(i, i as f64, i as f32)).collect();
        let db = build_db(&desc, metas).unwrap();
        let q: Vec<f32> = db.row(5).to_vec();
        let res = search_knn(&db, 5, &q, 10, Some((5.0, 2.0))).unwrap();
        for &(id, _) in &res.hits {
            assert!((id as f64 - 5.0).abs() > 2.0, "id {id} inside the window");
        }
        // timestamps 3..=7 fall inside the window, 5 candidates remain
        assert_eq!(res.hits.len(), 5);

        assert!(matches!(
            search_knn(&db, 5, &q, 1, Some((5.0, 100.0))),
            Err(RetrievalError::EmptyCandidateSet)
        ));
    }

    #[test]
    fn distance_identity_on_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = unit_rows(&mut rng, 40, 16);
        for i in 0..20 {
            let a = &rows.data[2 * i * 16..(2 * i + 1) * 16];
            let b = &rows.data[(2 * i + 1) * 16..(2 * i + 2) * 16];
            let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let d = l2_distance(a, b);
            assert!((d * d - (2.0 - 2.0 * dot)).abs() < 1e-5);
        }
    }

    #[test]
    fn ground_truth_rules() {
        // 3 m apart, large index gap: positive
        let q = vec![meta(0, 1000.0, 0.0)];
        let d = vec![meta(1, 500.0, 3.0)];
        let gt = ground_truth_positives(&q, &d, 5.0, 200.0);
        assert_eq!(gt.positives[0], vec![1]);
        assert!(!gt.filtered[0]);

        // 3 m apart but only 50 frames away in the same sequence: rejected
        let d = vec![meta(1, 950.0, 3.0)];
        let gt = ground_truth_positives(&q, &d, 5.0, 200.0);
        assert!(gt.positives[0].is_empty());
        assert!(gt.filtered[0]);

        // different sequence: temporal rule does not apply
        let mut other = meta(1, 950.0, 3.0);
        other.sequence_tag = "other".into();
        let gt = ground_truth_positives(&q, &[other], 5.0, 200.0);
        assert_eq!(gt.positives[0], vec![1]);

        // nothing within 5 m: filtered
        let d = vec![meta(1, 500.0, 50.0)];
        let gt = ground_truth_positives(&q, &d, 5.0, 200.0);
        assert!(gt.filtered[0]);
        assert_eq!(gt.filtered_count(), 1);
    }

    #[test]
    fn db_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let desc = unit_rows(&mut rng, 6, 8);
        let metas: Vec<RowMeta> = (0..6).map(|i| meta(i, i as f64, i as f32)).collect();
        let db = build_db(&desc, metas).unwrap();
        let mut buf = Vec::new();
        write_db(&mut buf, &db).unwrap();
        let loaded = read_db(&mut buf.as_slice()).unwrap();
        assert_eq!(db.dim, loaded.dim);
        assert_eq!(db.meta, loaded.meta);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&db.data), bits(&loaded.data));

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_db(&mut bad.as_slice()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn knn_matches_naive_oracle(seed in 0u64..10_000, k in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(5..60);
            let d = rng.gen_range(2..17);
            let desc = unit_rows(&mut rng, n, d);
            let metas: Vec<RowMeta> =
                (0..n as u64).map(|i| meta(i, i as f64, i as f32)).collect();
            let db = build_db(&desc, metas).unwrap();
            let mut q: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let norm: f32 = q.iter().map(|v| v * v).sum::<f32>().sqrt();
            for v in &mut q { *v /= norm; }

            let res = search_knn(&db, 0, &q, k, None).unwrap();

            let mut naive: Vec<(f32, u64)> = (0..n)
                .map(|i| (l2_distance(&q, db.row(i)), i as u64))
                .collect();
            naive.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            naive.truncate(k);
            let expected: Vec<(u64, f32)> = naive.into_iter().map(|(d, i)| (i, d)).collect();
            prop_assert_eq!(res.hits.clone(), expected);

            for pair in res.hits.windows(2) {
                prop_assert!(pair[0].1 <= pair[1].1);
            }
        }
    }
}
