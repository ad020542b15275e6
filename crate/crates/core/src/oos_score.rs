//! OOS scores: cosine distance to the nearest neighbor in an index of
//! blended in-scope embeddings and raw out-of-scope embeddings, plus a
//! PCA reconstruction-error scorer as a linear autoencoder stand-in.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::EmbeddingVector;
use crate::simd;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerError {
    #[error("index has no entries")]
    EmptyIndex,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid scorer config: {0}")]
    InvalidConfig(String),
    #[error("requested {requested} components but the data has rank {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("need at least {needed} examples, got {got}")]
    TooFewExamples { needed: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[serde(rename = "IS")]
    InScope,
    #[serde(rename = "OOS")]
    OutOfScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OosScore {
    pub distance: f64,
    pub nearest_source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvfConfig {
    /// Number of partitions; `None` picks `ceil(sqrt(n))`.
    pub clusters: Option<usize>,
    /// Partitions scanned per query.
    pub probes: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IvfConfig {
    fn default() -> Self {
        Self {
            clusters: None,
            probes: 16,
            iterations: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    #[default]
    Exact,
    /// Inverted file over spherical k-means partitions.
    Approximate(IvfConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OosScorerConfig {
    pub blend_weight: f64,
    pub oos_penalty: f64,
    pub renormalize: bool,
    pub mode: SearchMode,
}

impl Default for OosScorerConfig {
    fn default() -> Self {
        Self {
            blend_weight: 0.5,
            oos_penalty: 0.25,
            renormalize: true,
            mode: SearchMode::Exact,
        }
    }
}

impl OosScorerConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        if !(0.0..=1.0).contains(&self.blend_weight) {
            return Err(ScorerError::InvalidConfig("blend_weight must be in [0, 1]".into()));
        }
        if !(self.oos_penalty >= 0.0 && self.oos_penalty.is_finite()) {
            return Err(ScorerError::InvalidConfig("oos_penalty must be >= 0".into()));
        }
        if let SearchMode::Approximate(ivf) = self.mode {
            if ivf.probes == 0 || ivf.clusters == Some(0) {
                return Err(ScorerError::InvalidConfig("clusters and probes must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InvertedFile {
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
    probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    dim: usize,
    config: OosScorerConfig,
    /// Row-major unit vectors; in-scope entries first.
    vectors: Vec<f32>,
    /// Intent index per in-scope entry; entries past its end are OOS.
    intents: Vec<u32>,
    intent_names: Vec<String>,
    ivf: Option<InvertedFile>,
}

/// A view of one stored entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry<'a> {
    pub vector: &'a [f32],
    pub source: Source,
    pub intent: Option<&'a str>,
}

impl NeighborIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// True when no out-of-scope examples were indexed.
    pub fn is_one_class(&self) -> bool {
        self.len() == self.intents.len()
    }

    pub fn config(&self) -> &OosScorerConfig {
        &self.config
    }

    pub fn entry(&self, i: usize) -> NeighborEntry<'_> {
        let vector = &self.vectors[i * self.dim..(i + 1) * self.dim];
        match self.intents.get(i) {
            Some(&k) => NeighborEntry {
                vector,
                source: Source::InScope,
                intent: Some(&self.intent_names[k as usize]),
            },
            None => NeighborEntry {
                vector,
                source: Source::OutOfScope,
                intent: None,
            },
        }
    }

    fn source_of(&self, i: usize) -> Source {
        if i < self.intents.len() {
            Source::InScope
        } else {
            Source::OutOfScope
        }
    }

    /// Index and cosine of the most similar entry; ties go to the lower index.
    pub fn nearest(&self, query: &EmbeddingVector) -> Result<(usize, f32), ScorerError> {
        if query.dim() != self.dim {
            return Err(ScorerError::DimMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        if self.is_empty() {
            return Err(ScorerError::EmptyIndex);
        }
        let q = query.values();
        Ok(match &self.ivf {
            None => self.scan_range(q, 0, self.len()),
            Some(ivf) => self.search_ivf(ivf, q),
        })
    }

    fn scan_range(&self, q: &[f32], lo: usize, hi: usize) -> (usize, f32) {
        const CHUNK: usize = 512;
        let mut buf = [0f32; CHUNK];
        let mut best = (lo, f32::NEG_INFINITY);
        let mut start = lo;
        while start < hi {
            let end = (start + CHUNK).min(hi);
            let out = &mut buf[..end - start];
            simd::dot_rows(&self.vectors[start * self.dim..end * self.dim], self.dim, q, out);
            for (j, &s) in out.iter().enumerate() {
                if s > best.1 {
                    best = (start + j, s);
                }
            }
            start = end;
        }
        best
    }

    fn search_ivf(&self, ivf: &InvertedFile, q: &[f32]) -> (usize, f32) {
        let k = ivf.lists.len();
        let mut sims = vec![0f32; k];
        simd::dot_rows(&ivf.centroids, self.dim, q, &mut sims);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        let mut best = (usize::MAX, f32::NEG_INFINITY);
        for &c in order.iter().take(ivf.probes) {
            for &i in &ivf.lists[c] {
                let i = i as usize;
                let s = simd::dot(&self.vectors[i * self.dim..(i + 1) * self.dim], q);
                if s > best.1 || (s == best.1 && i < best.0) {
                    best = (i, s);
                }
            }
        }
        best
    }
}

/// Builds the neighbor index. Flagged-empty embeddings carry no direction
/// and are left out of the index.
pub fn build_index(
    is_examples: &[(EmbeddingVector, String)],
    oos_examples: &[EmbeddingVector],
    config: &OosScorerConfig,
) -> Result<NeighborIndex, ScorerError> {
    config.validate()?;
    let dim = is_examples
        .first()
        .map(|(e, _)| e.dim())
        .or_else(|| oos_examples.first().map(EmbeddingVector::dim))
        .ok_or(ScorerError::EmptyIndex)?;
    for d in is_examples.iter().map(|(e, _)| e.dim()).chain(oos_examples.iter().map(EmbeddingVector::dim)) {
        if d != dim {
            return Err(ScorerError::DimMismatch { expected: dim, got: d });
        }
    }

    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (e, label) in is_examples.iter().filter(|(e, _)| !e.is_empty_text()) {
        let (sum, n) = sums.entry(label.as_str()).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, &v) in sum.iter_mut().zip(e.values()) {
            *s += f64::from(v);
        }
        *n += 1;
    }
    let intent_names: Vec<String> = sums.keys().map(|s| s.to_string()).collect();
    let means: BTreeMap<&str, (u32, Vec<f64>)> = sums
        .into_iter()
        .enumerate()
        .map(|(i, (k, (sum, n)))| (k, (i as u32, sum.into_iter().map(|s| s / n as f64).collect())))
        .collect();

    let lambda = config.blend_weight;
    let mut vectors = Vec::with_capacity((is_examples.len() + oos_examples.len()) * dim);
    let mut intents = Vec::with_capacity(is_examples.len());
    for (e, label) in is_examples.iter().filter(|(e, _)| !e.is_empty_text()) {
        let (idx, mean) = &means[label.as_str()];
        let mut blended: Vec<f32> = e
            .values()
            .iter()
            .zip(mean)
            .map(|(&v, &m)| (lambda * f64::from(v) + (1.0 - lambda) * m) as f32)
            .collect();
        if config.renormalize {
            simd::normalize_in_place(&mut blended);
        }
        vectors.extend(blended);
        intents.push(*idx);
    }
    for e in oos_examples.iter().filter(|e| !e.is_empty_text()) {
        vectors.extend_from_slice(e.values());
    }
    if vectors.is_empty() {
        return Err(ScorerError::EmptyIndex);
    }

    let mut index = NeighborIndex {
        dim,
        config: *config,
        vectors,
        intents,
        intent_names,
        ivf: None,
    };
    if let SearchMode::Approximate(ivf) = config.mode {
        index.ivf = Some(build_ivf(&index.vectors, dim, &ivf));
    }
    Ok(index)
}

fn build_ivf(vectors: &[f32], dim: usize, cfg: &IvfConfig) -> InvertedFile {
    let n = vectors.len() / dim;
    let k = cfg
        .clusters
        .unwrap_or_else(|| (n as f64).sqrt().ceil() as usize)
        .clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seeds = sample(&mut rng, n, k).into_vec();
    seeds.sort_unstable();
    let mut centroids: Vec<f32> = seeds
        .iter()
        .flat_map(|&i| vectors[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    let mut assign = vec![0usize; n];
    let mut sims = vec![0f32; k];
    for _ in 0..cfg.iterations.max(1) {
        for (i, a) in assign.iter_mut().enumerate() {
            simd::dot_rows(&centroids, dim, &vectors[i * dim..(i + 1) * dim], &mut sims);
            *a = argmax(&sims);
        }
        let mut sums = vec![0f64; k * dim];
        for (i, &a) in assign.iter().enumerate() {
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(&vectors[i * dim..(i + 1) * dim]) {
                *s += f64::from(v);
            }
        }
        for c in 0..k {
            let mut row: Vec<f32> = sums[c * dim..(c + 1) * dim].iter().map(|&s| s as f32).collect();
            // an empty cluster keeps its previous centroid
            if simd::normalize_in_place(&mut row) {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&row);
            }
        }
    }
    let mut lists = vec![Vec::new(); k];
    for (i, &a) in assign.iter().enumerate() {
        lists[a].push(i as u32);
    }
    InvertedFile {
        centroids,
        lists,
        probes: cfg.probes.min(k),
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Distance to the nearest entry, plus the OOS penalty when that entry is
/// out of scope.
pub fn score(index: &NeighborIndex, query: &EmbeddingVector) -> Result<OosScore, ScorerError> {
    let (i, cos) = index.nearest(query)?;
    let d = (1.0 - f64::from(cos)).max(0.0);
    let source = index.source_of(i);
    let distance = match source {
        Source::InScope => d,
        Source::OutOfScope => d + index.config.oos_penalty,
    };
    Ok(OosScore {
        distance,
        nearest_source: source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReconstructor {
    dim: usize,
    k: usize,
    mean: Vec<f64>,
    /// `k x dim`, orthonormal rows.
    components: Vec<f64>,
}

impl PcaReconstructor {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }
}

const RANK_TOLERANCE: f64 = 1e-9;

/// Fits the top-`k` principal directions of the centered embeddings.
/// `k` may equal the dimension when the data spans it.
pub fn fit_pca(embeddings: &[EmbeddingVector], k: usize) -> Result<PcaReconstructor, ScorerError> {
    let n = embeddings.len();
    if n < k + 1 {
        return Err(ScorerError::TooFewExamples { needed: k + 1, got: n });
    }
    let dim = embeddings[0].dim();
    if let Some(e) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(ScorerError::DimMismatch { expected: dim, got: e.dim() });
    }
    if k == 0 || k > dim {
        return Err(ScorerError::InvalidConfig(format!("components must be in 1..={dim}")));
    }

    let mut mean = vec![0f64; dim];
    for e in embeddings {
        for (m, &v) in mean.iter_mut().zip(e.values()) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |r, c| f64::from(embeddings[r].values()[c]) - mean[c]);

    // eigen-decompose whichever of the scatter and Gram matrices is smaller
    let use_gram = n < dim;
    let sym = if use_gram {
        &centered * centered.transpose()
    } else {
        centered.transpose() * &centered
    };
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_TOLERANCE * top.max(1e-300))
        .count();
    if k > rank {
        return Err(ScorerError::RankDeficient { requested: k, rank });
    }

    let mut components = Vec::with_capacity(k * dim);
    for &i in order.iter().take(k) {
        let col = eig.eigenvectors.column(i);
        let v: Vec<f64> = if use_gram {
            (centered.transpose() * col).iter().copied().collect()
        } else {
            col.iter().copied().collect()
        };
        components.extend(v);
    }
    orthonormalize(&mut components, dim);
    fix_signs(&mut components, dim);
    Ok(PcaReconstructor {
        dim,
        k,
        mean,
        components,
    })
}

/// Modified Gram-Schmidt over the rows, in order.
fn orthonormalize(rows: &mut [f64], dim: usize) {
    let k = rows.len() / dim;
    for i in 0..k {
        for j in 0..i {
            let (done, rest) = rows.split_at_mut(i * dim);
            let prev = &done[j * dim..(j + 1) * dim];
            let cur = &mut rest[..dim];
            let p: f64 = prev.iter().zip(cur.iter()).map(|(a, b)| a * b).sum();
            cur.iter_mut().zip(prev).for_each(|(c, a)| *c -= p * a);
        }
        let row = &mut rows[i * dim..(i + 1) * dim];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Makes the largest-magnitude coordinate of each row positive.
fn fix_signs(rows: &mut [f64], dim: usize) {
    for row in rows.chunks_exact_mut(dim) {
        let mut best = 0;
        for (i, x) in row.iter().enumerate() {
            if x.abs() > row[best].abs() {
                best = i;
            }
        }
        if row[best] < 0.0 {
            row.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Norm of the part of `query - mean` outside the component span.
pub fn reconstruction_score(rec: &PcaReconstructor, query: &EmbeddingVector) -> Result<OosScore, ScorerError> {
    if query.dim() != rec.dim {
        return Err(ScorerError::DimMismatch {
            expected: rec.dim,
            got: query.dim(),
        });
    }
    let mut r: Vec<f64> = query.values().iter().zip(&rec.mean).map(|(&q, m)| f64::from(q) - m).collect();
    for c in rec.components.chunks_exact(rec.dim) {
        let p: f64 = c.iter().zip(&r).map(|(a, b)| a * b).sum();
        r.iter_mut().zip(c).for_each(|(x, a)| *x -= p * a);
    }
    Ok(OosScore {
        distance: r.iter().map(|x| x * x).sum::<f64>().sqrt().max(0.0),
        nearest_source: Source::InScope,
    })
}
