//! Prompt embeddings, pairwise distances and the RBF kernel over them.
//!
//! Distances are computed once per [`PromptSet`] and reused: the kernel for any
//! bandwidth `h` is `exp(-d² / (2h²))` applied entrywise, so rebuilding it for a
//! new `h` never revisits the embeddings.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VipError};

/// One line of an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub embedding: Vec<f64>,
}

/// Immutable registry of prompt ids and their embeddings.
///
/// Iteration order is insertion order and defines the index ↔ id mapping used
/// everywhere else in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl PromptSet {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let dim = records.first().map(|r| r.embedding.len()).unwrap_or(0);
        if !records.is_empty() && dim == 0 {
            return Err(VipError::invalid("embedding dimension must be at least 1"));
        }
        let mut ids = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        let mut index = HashMap::with_capacity(records.len());
        for (i, rec) in records.into_iter().enumerate() {
            if rec.embedding.len() != dim {
                return Err(VipError::invalid(format!(
                    "prompt '{}' has dimension {} but expected {dim}",
                    rec.id,
                    rec.embedding.len()
                )));
            }
            if rec.embedding.iter().any(|v| !v.is_finite()) {
                return Err(VipError::invalid(format!(
                    "prompt '{}' has a non-finite embedding",
                    rec.id
                )));
            }
            if index.insert(rec.id.clone(), i).is_some() {
                return Err(VipError::invalid(format!(
                    "duplicate prompt id '{}'",
                    rec.id
                )));
            }
            ids.push(rec.id);
            data.extend_from_slice(&rec.embedding);
        }
        Ok(Self {
            ids,
            dim,
            data,
            index,
        })
    }

    /// Builds a set from raw row-major embeddings with ids `"0"`, `"1"`, ….
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(
            rows.iter()
                .enumerate()
                .map(|(i, r)| EmbeddingRecord {
                    id: i.to_string(),
                    embedding: r.clone(),
                })
                .collect(),
        )
    }

    /// Reads a line-delimited embedding file. The dimension of the first record
    /// is enforced on every later one.
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let records: Vec<EmbeddingRecord> = crate::io::read_jsonl(path)?;
        Self::new(records)
    }

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

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Resolves ids to indices, failing on the first unknown id.
    pub fn indices_of<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index_of(id.as_ref()).ok_or_else(|| {
                    VipError::NotFound(format!("unknown prompt id '{}'", id.as_ref()))
                })
            })
            .collect()
    }

    pub fn records(&self) -> Vec<EmbeddingRecord> {
        (0..self.len())
            .map(|i| EmbeddingRecord {
                id: self.ids[i].clone(),
                embedding: self.embedding(i).to_vec(),
            })
            .collect()
    }

    /// SHA-256 over ids and the little-endian embedding bytes. Used to tie a
    /// kernel cache to the embeddings it was computed from.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
            for v in self.embedding(i) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn distances(&self) -> PairwiseDistances {
        PairwiseDistances::compute(self)
    }
}

/// Strict lower triangle of the Euclidean distance matrix, row by row:
/// `(1,0), (2,0), (2,1), (3,0), …`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseDistances {
    n: usize,
    lower: Vec<f64>,
}

impl PairwiseDistances {
    pub fn compute(set: &PromptSet) -> Self {
        let n = set.len();
        let mut lower = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 1..n {
            let xi = set.embedding(i);
            for j in 0..i {
                let xj = set.embedding(j);
                let sq: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                lower.push(sq.sqrt());
            }
        }
        Self { n, lower }
    }

    pub fn from_lower(n: usize, lower: Vec<f64>) -> Result<Self> {
        if lower.len() != n * n.saturating_sub(1) / 2 {
            return Err(VipError::invalid("distance triangle has the wrong length"));
        }
        if lower.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(VipError::invalid(
                "distances must be finite and non-negative",
            ));
        }
        Ok(Self { n, lower })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (r, c) = if i > j { (i, j) } else { (j, i) };
        self.lower[r * (r - 1) / 2 + c]
    }

    /// Median over the `n(n-1)/2` distinct unordered pairs; the mean of the two
    /// middle order statistics when the count is even.
    pub fn median(&self) -> Result<f64> {
        if self.n < 2 {
            return Err(VipError::invalid(
                "median bandwidth needs at least 2 prompts",
            ));
        }
        let mut d = self.lower.clone();
        let m = d.len();
        let median = if m % 2 == 1 {
            *d.select_nth_unstable_by(m / 2, f64::total_cmp).1
        } else {
            let (left, hi, _) = d.select_nth_unstable_by(m / 2, f64::total_cmp);
            let hi = *hi;
            let lo = left.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            0.5 * (lo + hi)
        };
        if median <= 0.0 {
            return Err(VipError::DegenerateGeometry(
                "median pairwise distance is zero; supply an explicit bandwidth".into(),
            ));
        }
        Ok(median)
    }

    pub fn kernel(&self, bandwidth: f64) -> Result<KernelMatrix> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(VipError::invalid(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        let n = self.n;
        let scale = 1.0 / (2.0 * bandwidth * bandwidth);
        let mut values = DMatrix::<f64>::identity(n, n);
        for i in 1..n {
            let row = i * (i - 1) / 2;
            for j in 0..i {
                let d = self.lower[row + j];
                let k = (-d * d * scale).exp();
                values[(i, j)] = k;
                values[(j, i)] = k;
            }
        }
        Ok(KernelMatrix { values, bandwidth })
    }
}

/// Median of pairwise Euclidean distances between distinct prompts.
pub fn median_bandwidth(set: &PromptSet) -> Result<f64> {
    set.distances().median()
}

/// RBF kernel `K[i][j] = exp(-‖xᵢ - xⱼ‖² / (2h²))`.
pub fn kernel_matrix(set: &PromptSet, bandwidth: f64) -> Result<KernelMatrix> {
    set.distances().kernel(bandwidth)
}

/// Symmetric kernel matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    bandwidth: f64,
}

impl KernelMatrix {
    /// Wraps an explicit covariance matrix (tests and hand-crafted priors).
    /// The matrix must be square and exactly symmetric.
    pub fn from_matrix(values: DMatrix<f64>, bandwidth: f64) -> Result<Self> {
        if !values.is_square() {
            return Err(VipError::invalid("kernel matrix must be square"));
        }
        let n = values.nrows();
        for i in 0..n {
            for j in 0..i {
                if values[(i, j)] != values[(j, i)] {
                    return Err(VipError::invalid("kernel matrix must be symmetric"));
                }
            }
        }
        Ok(Self { values, bandwidth })
    }

    /// Row-major `q × q` values; same checks as [`KernelMatrix::from_matrix`].
    pub fn from_row_slice(q: usize, values: &[f64], bandwidth: f64) -> Result<Self> {
        if values.len() != q * q {
            return Err(VipError::invalid(format!(
                "kernel needs {} values, got {}",
                q * q,
                values.len()
            )));
        }
        Self::from_matrix(DMatrix::from_row_slice(q, q, values), bandwidth)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Splits the matrix along `batch` and its complement (ascending order).
    pub fn blocks(&self, batch: &[usize]) -> Result<KernelBlocks> {
        kernel_blocks(self, batch)
    }
}

/// Blocks of the kernel partitioned by a batch `B` and its complement `Bᶜ`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlocks {
    pub batch: Vec<usize>,
    pub complement: Vec<usize>,
    /// `Σ_BB`, `|B| × |B|`.
    pub batch_batch: DMatrix<f64>,
    /// `Σ_BᶜB`, `|Bᶜ| × |B|`.
    pub complement_batch: DMatrix<f64>,
    /// `Σ_BᶜBᶜ`, `|Bᶜ| × |Bᶜ|`.
    pub complement_complement: DMatrix<f64>,
}

pub fn kernel_blocks(k: &KernelMatrix, batch: &[usize]) -> Result<KernelBlocks> {
    let n = k.len();
    if batch.is_empty() {
        return Err(VipError::invalid("batch must be non-empty"));
    }
    let mut in_batch = vec![false; n];
    for &i in batch {
        if i >= n {
            return Err(VipError::invalid(format!(
                "index {i} out of range for {n} prompts"
            )));
        }
        if in_batch[i] {
            return Err(VipError::invalid(format!(
                "index {i} appears twice in the batch"
            )));
        }
        in_batch[i] = true;
    }
    let complement: Vec<usize> = (0..n).filter(|&i| !in_batch[i]).collect();
    let v = &k.values;
    let batch_batch = DMatrix::from_fn(batch.len(), batch.len(), |r, c| v[(batch[r], batch[c])]);
    let complement_batch = DMatrix::from_fn(complement.len(), batch.len(), |r, c| {
        v[(complement[r], batch[c])]
    });
    let complement_complement = DMatrix::from_fn(complement.len(), complement.len(), |r, c| {
        v[(complement[r], complement[c])]
    });
    Ok(KernelBlocks {
        batch: batch.to_vec(),
        complement,
        batch_batch,
        complement_batch,
        complement_complement,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"VIPK";
const CACHE_VERSION: u8 = 1;

/// Persisted bandwidth, ids and distance triangle for a prompt set.
///
/// Layout (little-endian): magic `VIPK`, version byte, `h: f64`, `n: u64`,
/// 32-byte embeddings digest, then `n` ids as `u32` length + UTF-8 bytes, then
/// the `n(n-1)/2` lower-triangle distances as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCache {
    pub bandwidth: f64,
    pub ids: Vec<String>,
    pub embeddings_digest: [u8; 32],
    pub distances: PairwiseDistances,
}

impl KernelCache {
    pub fn build(set: &PromptSet, bandwidth: Option<f64>) -> Result<Self> {
        let distances = set.distances();
        let bandwidth = match bandwidth {
            Some(h) => h,
            None => distances.median()?,
        };
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(VipError::invalid(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            bandwidth,
            ids: set.ids().to_vec(),
            embeddings_digest: set.digest(),
            distances,
        })
    }

    pub fn kernel(&self) -> Result<KernelMatrix> {
        self.distances.kernel(self.bandwidth)
    }

    /// Confirms that this cache was computed from `set`.
    pub fn verify(&self, set: &PromptSet) -> Result<()> {
        if self.ids != set.ids() {
            return Err(VipError::Integrity(
                "kernel cache ids do not match the embeddings".into(),
            ));
        }
        if self.embeddings_digest != set.digest() {
            return Err(VipError::Integrity(
                "kernel cache digest does not match the embeddings".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.distances.lower().len() * 8);
        out.extend_from_slice(CACHE_MAGIC);
        out.push(CACHE_VERSION);
        out.extend_from_slice(&self.bandwidth.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.embeddings_digest);
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for d in self.distances.lower() {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(VipError::Integrity("not a kernel cache file".into()));
        }
        let mut version = [0u8; 1];
        read_exact(&mut r, &mut version)?;
        if version[0] != CACHE_VERSION {
            return Err(VipError::Version(format!(
                "kernel cache version {} (supported: {CACHE_VERSION})",
                version[0]
            )));
        }
        let bandwidth = f64::from_le_bytes(read_array(&mut r)?);
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let embeddings_digest: [u8; 32] = read_array(&mut r)?;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
            if len > r.len() {
                return Err(VipError::Integrity("truncated kernel cache".into()));
            }
            let (s, rest) = r.split_at(len);
            ids.push(
                String::from_utf8(s.to_vec())
                    .map_err(|_| VipError::Integrity("id is not UTF-8".into()))?,
            );
            r = rest;
        }
        let m = n * n.saturating_sub(1) / 2;
        if r.len() != m * 8 {
            return Err(VipError::Integrity(
                "kernel cache distance block has the wrong size".into(),
            ));
        }
        let lower = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let distances = PairwiseDistances::from_lower(n, lower)?;
        Ok(Self {
            bandwidth,
            ids,
            embeddings_digest,
            distances,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized cache; the `kernel_ref` of belief snapshots.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(VipError::Integrity("truncated kernel cache".into()));
    }
    let (head, rest) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = rest;
    Ok(())
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(points: &[f64]) -> PromptSet {
        PromptSet::from_rows(&points.iter().map(|&p| vec![p]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn median_of_three_distances() {
        assert_eq!(median_bandwidth(&line(&[0.0, 1.0, 3.0])).unwrap(), 2.0);
    }

    #[test]
    fn median_even_count_averages_middle_pair() {
        assert_eq!(median_bandwidth(&line(&[0.0, 1.0, 2.0, 4.0])).unwrap(), 2.0);
        // sorted distances 1,2,2,3,4,5
        assert_eq!(median_bandwidth(&line(&[0.0, 1.0, 3.0, 5.0])).unwrap(), 2.5);
    }

    #[test]
    fn median_rejects_small_or_degenerate_sets() {
        assert!(matches!(
            median_bandwidth(&line(&[1.0])),
            Err(VipError::InvalidInput(_))
        ));
        assert!(matches!(
            median_bandwidth(&line(&[2.0, 2.0, 2.0])),
            Err(VipError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn kernel_hand_values() {
        let h = 0.7;
        let k = kernel_matrix(&line(&[0.0, h * 2f64.sqrt()]), h).unwrap();
        assert_abs_diff_eq!(k.get(0, 1), (-1.0f64).exp(), epsilon = 1e-15);
        assert_eq!(k.get(0, 0), 1.0);
        let k = kernel_matrix(&line(&[3.0, 3.0]), 1.0).unwrap();
        assert_eq!(k.get(0, 1), 1.0);
    }

    #[test]
    fn kernel_wide_bandwidth_limit() {
        let set = line(&[0.0, 1.0, 5.0, -2.0]);
        let k = kernel_matrix(&set, 1e6 * 7.0).unwrap();
        assert!(k.values().iter().all(|v| (v - 1.0).abs() <= 1e-9));
    }

    #[test]
    fn kernel_rejects_bad_bandwidth() {
        assert!(kernel_matrix(&line(&[0.0, 1.0]), 0.0).is_err());
        assert!(kernel_matrix(&line(&[0.0, 1.0]), f64::NAN).is_err());
    }

    #[test]
    fn blocks_two_by_two() {
        let rho = 0.3;
        let k =
            KernelMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]), 1.0)
                .unwrap();
        let b = k.blocks(&[0]).unwrap();
        assert_eq!(b.batch_batch, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(b.complement_batch, DMatrix::from_element(1, 1, rho));
        assert_eq!(b.complement_complement, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn blocks_full_batch_and_errors() {
        let k = kernel_matrix(&line(&[0.0, 1.0, 2.0]), 1.0).unwrap();
        let b = k.blocks(&[0, 1, 2]).unwrap();
        assert_eq!(&b.batch_batch, k.values());
        assert_eq!(b.complement_batch.nrows(), 0);
        assert_eq!(b.complement_complement.nrows(), 0);
        assert!(k.blocks(&[3]).is_err());
        assert!(k.blocks(&[]).is_err());
        assert!(k.blocks(&[1, 1]).is_err());
    }

    #[test]
    fn prompt_set_validation() {
        let dup = PromptSet::new(vec![
            EmbeddingRecord {
                id: "a".into(),
                embedding: vec![0.0],
            },
            EmbeddingRecord {
                id: "a".into(),
                embedding: vec![1.0],
            },
        ]);
        assert!(matches!(dup, Err(VipError::InvalidInput(m)) if m.contains("'a'")));
        let ragged = PromptSet::from_rows(&[vec![0.0, 1.0], vec![0.0]]);
        assert!(ragged.is_err());
        let zero_dim = PromptSet::from_rows(&[vec![]]);
        assert!(zero_dim.is_err());
    }

    #[test]
    fn cache_round_trip_and_integrity() {
        let set = line(&[0.0, 1.0, 3.0, 7.5]);
        let cache = KernelCache::build(&set, None).unwrap();
        let back = KernelCache::from_bytes(&cache.to_bytes()).unwrap();
        assert_eq!(back, cache);
        back.verify(&set).unwrap();
        assert_eq!(
            back.kernel().unwrap(),
            kernel_matrix(&set, cache.bandwidth).unwrap()
        );

        let other = line(&[0.0, 1.0, 3.0, 7.0]);
        assert!(matches!(back.verify(&other), Err(VipError::Integrity(_))));

        let mut bytes = cache.to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            KernelCache::from_bytes(&bytes),
            Err(VipError::Version(_))
        ));
        let bytes = cache.to_bytes();
        assert!(KernelCache::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
