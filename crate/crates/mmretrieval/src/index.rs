//! Clustered ANN index over unit product embeddings.
//!
//! A single spherical k-means layer partitions the corpus; each centroid
//! owns a flat posting list of `(product id, embedding)` rows. Queries score
//! all centroids, probe the best `nprobe` lists, and rank the scanned
//! candidates by inner product. `nprobe = C` degrades to exact brute force.
//!
//! Ranking ties break by ascending product id so results are deterministic
//! across platforms. File formats: `EMB1` for embedding exports, `HCI1` for
//! the index, both little-endian with `f32` payloads.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;

/// Dense row-major collection of embeddings keyed by product id.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f64>,
    by_id: HashMap<u64, usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> EmbeddingMatrix {
        EmbeddingMatrix {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            by_id: HashMap::new(),
        }
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

    pub fn push(&mut self, id: u64, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding of dimension {} pushed into a matrix of dimension {}",
                row.len(),
                self.dim
            )));
        }
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.by_id.insert(id, self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Push a row rounded through `f32`, matching what a save/load cycle
    /// would produce. Used when the matrix will also be exported.
    pub fn push_f32_rounded(&mut self, id: u64, row: &[f64]) -> Result<()> {
        let rounded: Vec<f64> = row.iter().map(|&v| v as f32 as f64).collect();
        self.push(id, &rounded)
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, id: u64) -> Option<&[f64]> {
        self.by_id.get(&id).map(|&i| self.row(i))
    }

    /// Write an `EMB1` file: magic, `N`, `D` (u32 LE), id array (u64 LE),
    /// then the row-major matrix as `f32` LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        w.write_all(b"EMB1").map_err(|e| Error::io(path, e))?;
        w.write_all(&(self.len() as u32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.write_all(&(self.dim as u32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        for &id in &self.ids {
            w.write_all(&id.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbeddingMatrix> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(path, "missing magic bytes"))?;
        if &magic != b"EMB1" {
            return Err(Error::format(path, "not an EMB1 embedding file"));
        }
        let n = read_u32(&mut r, path)? as usize;
        let dim = read_u32(&mut r, path)? as usize;
        let mut m = EmbeddingMatrix::new(dim);
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(path, "truncated id array"))?;
            ids.push(u64::from_le_bytes(buf));
        }
        let rows = read_f32s(&mut r, n * dim, path)?;
        for (i, id) in ids.into_iter().enumerate() {
            m.push(id, &rows[i * dim..(i + 1) * dim])?;
        }
        expect_eof(&mut r, path)?;
        Ok(m)
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated header"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format(path, "truncated float payload"))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::format(path, "trailing bytes")),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Rank candidates by inner product descending, ties by ascending id.
fn rank_cmp(a: &(u64, f64), b: &(u64, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

#[derive(Debug, Clone, Default)]
struct PostingList {
    ids: Vec<u64>,
    rows: Vec<f64>,
}

/// Two-level index: spherical k-means centroids over flat posting lists.
#[derive(Debug, Clone)]
pub struct HcIndex {
    dim: usize,
    /// `C x dim`, every row unit-norm.
    centroids: Vec<f64>,
    lists: Vec<PostingList>,
}

impl HcIndex {
    pub fn n_centroids(&self) -> usize {
        self.lists.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Default centroid count: `ceil(sqrt(N))`.
    pub fn default_centroids(n: usize) -> usize {
        (n as f64).sqrt().ceil().max(1.0) as usize
    }

    /// Default probe count: `ceil(sqrt(C))`.
    pub fn default_nprobe(c: usize) -> usize {
        (c as f64).sqrt().ceil().max(1.0) as usize
    }

    /// Spherical k-means: assignment by maximum inner product, centroids
    /// re-normalized after every mean update, empty clusters re-seeded from
    /// the largest cluster's farthest member. Deterministic given the seed.
    pub fn build(embs: &EmbeddingMatrix, c: usize, iters: usize, seed: u64) -> Result<HcIndex> {
        let n = embs.len();
        let dim = embs.dim();
        if c == 0 || n == 0 {
            return Err(Error::Config(format!(
                "need corpus size >= centroids >= 1, got {n} products and {c} centroids"
            )));
        }
        if c > n {
            return Err(Error::Config(format!(
                "centroid count {c} exceeds corpus size {n}"
            )));
        }

        // farthest-point initialization from a seeded start
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = vec![0.0; c * dim];
        let first = rng.gen_range(0..n);
        centroids[..dim].copy_from_slice(embs.row(first));
        let mut best_dot: Vec<f64> = (0..n)
            .map(|i| math::dot(embs.row(i), embs.row(first)))
            .collect();
        for k in 1..c {
            let mut pick = 0;
            for i in 1..n {
                if best_dot[i] < best_dot[pick] {
                    pick = i;
                }
            }
            centroids[k * dim..(k + 1) * dim].copy_from_slice(embs.row(pick));
            for i in 0..n {
                let d = math::dot(embs.row(i), embs.row(pick));
                if d > best_dot[i] {
                    best_dot[i] = d;
                }
            }
        }

        let mut assign = vec![0usize; n];
        for _ in 0..iters {
            assign_all(embs, &centroids, c, &mut assign);
            // mean update
            let mut sums = vec![0.0; c * dim];
            let mut counts = vec![0usize; c];
            for i in 0..n {
                let k = assign[i];
                counts[k] += 1;
                math::axpy(1.0, embs.row(i), &mut sums[k * dim..(k + 1) * dim]);
            }
            for k in 0..c {
                if counts[k] == 0 {
                    continue;
                }
                let sum = &sums[k * dim..(k + 1) * dim];
                if let Ok(u) = math::normalized(sum) {
                    centroids[k * dim..(k + 1) * dim].copy_from_slice(&u);
                }
            }
            // re-seed empty clusters from the largest cluster's farthest point
            for k in 0..c {
                if counts[k] > 0 {
                    continue;
                }
                let mut largest = 0;
                for j in 1..c {
                    if counts[j] > counts[largest] {
                        largest = j;
                    }
                }
                if counts[largest] == 0 {
                    continue;
                }
                let centroid = centroids[largest * dim..(largest + 1) * dim].to_vec();
                let mut far = None;
                let mut far_dot = f64::INFINITY;
                for i in 0..n {
                    if assign[i] != largest {
                        continue;
                    }
                    let d = math::dot(embs.row(i), &centroid);
                    if d < far_dot {
                        far_dot = d;
                        far = Some(i);
                    }
                }
                if let Some(i) = far {
                    centroids[k * dim..(k + 1) * dim].copy_from_slice(embs.row(i));
                    assign[i] = k;
                    counts[largest] -= 1;
                    counts[k] += 1;
                }
            }
        }

        // final assignment against the final centroids
        assign_all(embs, &centroids, c, &mut assign);
        let mut lists = vec![PostingList::default(); c];
        for i in 0..n {
            let list = &mut lists[assign[i]];
            list.ids.push(embs.id(i));
            list.rows.extend_from_slice(embs.row(i));
        }
        Ok(HcIndex {
            dim,
            centroids,
            lists,
        })
    }

    /// Top-`k` products from the `nprobe` best-scoring posting lists,
    /// ranked by inner product descending with id tie-breaks. `nprobe` is
    /// clamped to `[1, C]`.
    pub fn search(&self, query: &[f64], k: usize, nprobe: usize) -> Vec<(u64, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let c = self.n_centroids();
        let nprobe = nprobe.clamp(1, c);
        let mut order: Vec<(u64, f64)> = (0..c)
            .map(|j| {
                (
                    j as u64,
                    math::dot(query, &self.centroids[j * self.dim..(j + 1) * self.dim]),
                )
            })
            .collect();
        order.sort_by(rank_cmp);

        let mut candidates: Vec<(u64, f64)> = Vec::new();
        for &(j, _) in order.iter().take(nprobe) {
            let list = &self.lists[j as usize];
            for (r, &id) in list.ids.iter().enumerate() {
                let row = &list.rows[r * self.dim..(r + 1) * self.dim];
                candidates.push((id, math::dot(query, row)));
            }
        }
        candidates.sort_by(rank_cmp);
        candidates.truncate(k);
        candidates
    }

    /// Write an `HCI1` file: magic, `D`, `C`, `N` (u32 LE), centroid matrix
    /// (`f32`), per-list lengths (u32), then each list's `(id, embedding)`
    /// rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        w.write_all(b"HCI1").map_err(|e| Error::io(path, e))?;
        for v in [self.dim as u32, self.n_centroids() as u32, self.len() as u32] {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        for &v in &self.centroids {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        for list in &self.lists {
            w.write_all(&(list.ids.len() as u32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        for list in &self.lists {
            for (r, &id) in list.ids.iter().enumerate() {
                w.write_all(&id.to_le_bytes()).map_err(|e| Error::io(path, e))?;
                for &v in &list.rows[r * self.dim..(r + 1) * self.dim] {
                    w.write_all(&(v as f32).to_le_bytes())
                        .map_err(|e| Error::io(path, e))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HcIndex> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(path, "missing magic bytes"))?;
        if &magic != b"HCI1" {
            return Err(Error::format(path, "not an HCI1 index file"));
        }
        let dim = read_u32(&mut r, path)? as usize;
        let c = read_u32(&mut r, path)? as usize;
        let n = read_u32(&mut r, path)? as usize;
        if dim == 0 || c == 0 {
            return Err(Error::format(path, "zero dimension in header"));
        }
        let centroids = read_f32s(&mut r, c * dim, path)?;
        let mut lens = Vec::with_capacity(c);
        for _ in 0..c {
            lens.push(read_u32(&mut r, path)? as usize);
        }
        if lens.iter().sum::<usize>() != n {
            return Err(Error::format(path, "posting-list lengths do not sum to N"));
        }
        let mut lists = Vec::with_capacity(c);
        for len in lens {
            let mut list = PostingList::default();
            for _ in 0..len {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)
                    .map_err(|_| Error::format(path, "truncated posting list"))?;
                list.ids.push(u64::from_le_bytes(buf));
                list.rows.extend_from_slice(&read_f32s(&mut r, dim, path)?);
            }
            lists.push(list);
        }
        expect_eof(&mut r, path)?;
        Ok(HcIndex {
            dim,
            centroids,
            lists,
        })
    }
}

fn assign_all(embs: &EmbeddingMatrix, centroids: &[f64], c: usize, assign: &mut [usize]) {
    let dim = embs.dim();
    for i in 0..embs.len() {
        let row = embs.row(i);
        let mut best = 0;
        let mut best_dot = math::dot(row, &centroids[..dim]);
        for k in 1..c {
            let d = math::dot(row, &centroids[k * dim..(k + 1) * dim]);
            if d > best_dot {
                best_dot = d;
                best = k;
            }
        }
        assign[i] = best;
    }
}

/// Exact top-`k` by inner product with the same tie-break rule as search.
pub fn brute_force(embs: &EmbeddingMatrix, query: &[f64], k: usize) -> Vec<(u64, f64)> {
    let mut scored: Vec<(u64, f64)> = (0..embs.len())
        .map(|i| (embs.id(i), math::dot(query, embs.row(i))))
        .collect();
    scored.sort_by(rank_cmp);
    scored.truncate(k);
    scored
}

/// Fraction of the brute-force top-`k` ids recovered by `results`.
pub fn recall_against_exact(results: &[(u64, f64)], exact: &[(u64, f64)]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let got: std::collections::HashSet<u64> = results.iter().map(|r| r.0).collect();
    let hit = exact.iter().filter(|e| got.contains(&e.0)).count();
    hit as f64 / exact.len() as f64
}
