//! Sentence embeddings.
//!
//! The detector only needs unit-length vectors, so the encoder is a trait.
//! Two implementations ship: a hashed word/character n-gram tf-idf model
//! that is fitted on the training utterances, and a lookup table of vectors
//! produced by any external encoder.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simd;
use crate::textnorm::NormalizedUtterance;

/// Bumped whenever hashing or weighting changes in a way that alters vectors.
pub const TFIDF_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeaturizeError {
    #[error("cannot fit a featurizer on an empty corpus")]
    EmptyCorpus,
    #[error("featurizer misconfigured: {0}")]
    ConfigError(String),
    #[error("no precomputed embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("malformed embedding file (line {line}): {reason}")]
    MalformedFile { line: usize, reason: String },
    #[error("cannot read embedding file: {0}")]
    Io(String),
}

/// Unit-length dense vector, or the flagged zero vector for text that
/// produced no features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    empty: bool,
}

impl EmbeddingVector {
    pub fn zero(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            empty: true,
        }
    }

    /// Normalizes `values`; an all-zero input becomes the flagged zero vector.
    pub fn from_values(mut values: Vec<f32>) -> Self {
        let empty = !simd::normalize_in_place(&mut values);
        if empty {
            values.iter_mut().for_each(|x| *x = 0.0);
        }
        Self { values, empty }
    }

    /// Keeps `values` as given, without normalizing. Meant for callers
    /// that work with raw geometry, such as the reconstruction scorer.
    pub fn from_raw(values: Vec<f32>) -> Self {
        let empty = values.iter().all(|&x| x == 0.0);
        Self { values, empty }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// True for the zero vector produced by featureless text.
    pub fn is_empty_text(&self) -> bool {
        self.empty
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f32 {
        simd::dot(&self.values, &other.values)
    }
}

/// Anything that turns preprocessed text into an [`EmbeddingVector`].
pub trait Featurizer {
    fn dim(&self) -> usize;
    fn embed(&self, utt: &NormalizedUtterance) -> Result<EmbeddingVector, FeaturizeError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TfidfConfig {
    /// Size of the hashed n-gram space. Power of two.
    pub buckets: usize,
    pub word_ngrams: (usize, usize),
    pub char_ngrams: (usize, usize),
    /// When set, bucket weights are folded into this many dimensions with a
    /// signed hash (count sketch). `None` keeps all `buckets` dimensions.
    pub projection_dim: Option<usize>,
    pub hash_seed: u64,
}

impl Default for TfidfConfig {
    fn default() -> Self {
        Self {
            buckets: 1 << 15,
            word_ngrams: (1, 2),
            char_ngrams: (3, 5),
            projection_dim: Some(256),
            hash_seed: 0x005e_ed0f_0005,
        }
    }
}

impl TfidfConfig {
    fn validate(&self) -> Result<(), FeaturizeError> {
        let bad = |m: &str| Err(FeaturizeError::ConfigError(m.to_string()));
        if self.buckets < 2 || !self.buckets.is_power_of_two() || self.buckets > 1 << 31 {
            return bad("buckets must be a power of two between 2 and 2^31");
        }
        if self.projection_dim == Some(0) {
            return bad("projection_dim must be positive");
        }
        for (lo, hi) in [self.word_ngrams, self.char_ngrams] {
            if lo > hi || (lo == 0 && hi != 0) {
                return bad("n-gram range must satisfy 1 <= min <= max (or 0..0 to disable)");
            }
        }
        if self.word_ngrams.1 == 0 && self.char_ngrams.1 == 0 {
            return bad("at least one n-gram family must be enabled");
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.projection_dim.unwrap_or(self.buckets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashedTfidfModel {
    pub format_version: u32,
    pub config: TfidfConfig,
    pub n_documents: usize,
    /// Smoothed idf per bucket; 0 marks a bucket never seen during fitting.
    idf: Vec<f32>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, tag: u8, parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    let mut eat = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    };
    eat(tag);
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            eat(b' ');
        }
        part.iter().for_each(|&b| eat(b));
    }
    h
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl HashedTfidfModel {
    /// Sorted `(bucket, count)` pairs for every n-gram in `text`.
    fn bucket_counts(&self, text: &str) -> Vec<(u32, u32)> {
        let cfg = &self.config;
        let mask = (cfg.buckets - 1) as u64;
        let seed = cfg.hash_seed;
        let mut hits: Vec<u32> = Vec::new();
        let bucket = |h: u64| (mix64(h) & mask) as u32;

        let words: Vec<&str> = text.split_whitespace().collect();
        let (wlo, whi) = cfg.word_ngrams;
        if whi > 0 {
            for n in wlo..=whi {
                for window in words.windows(n) {
                    let parts: Vec<&[u8]> = window.iter().map(|w| w.as_bytes()).collect();
                    hits.push(bucket(fnv1a(seed, b'w', &parts)));
                }
            }
        }

        let (clo, chi) = cfg.char_ngrams;
        if chi > 0 {
            let mut padded: Vec<char> = Vec::new();
            let mut buf = String::new();
            for w in &words {
                padded.clear();
                padded.push(' ');
                padded.extend(w.chars());
                padded.push(' ');
                for n in clo..=chi {
                    for window in padded.windows(n) {
                        buf.clear();
                        buf.extend(window.iter());
                        hits.push(bucket(fnv1a(seed, b'c', &[buf.as_bytes()])));
                    }
                }
            }
        }

        hits.sort_unstable();
        let mut counts: Vec<(u32, u32)> = Vec::with_capacity(hits.len());
        for b in hits {
            match counts.last_mut() {
                Some((last, c)) if *last == b => *c += 1,
                _ => counts.push((b, 1)),
            }
        }
        counts
    }

    fn project(&self, bucket: u32) -> (usize, f32) {
        let dim = self.config.output_dim();
        match self.config.projection_dim {
            None => (bucket as usize, 1.0),
            Some(_) => {
                let h = mix64(u64::from(bucket) ^ self.config.hash_seed.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15);
                let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
                (((h >> 1) % dim as u64) as usize, sign)
            }
        }
    }

    /// Idf of a bucket, or `None` if it never occurred in the fitted corpus.
    pub fn idf(&self, bucket: u32) -> Option<f32> {
        self.idf.get(bucket as usize).copied().filter(|&v| v > 0.0)
    }

    pub fn seen_buckets(&self) -> usize {
        self.idf.iter().filter(|&&v| v > 0.0).count()
    }

    /// Buckets touched by `text`; exposed for inspection and tests.
    pub fn buckets_of(&self, text: &str) -> Vec<u32> {
        self.bucket_counts(text).into_iter().map(|(b, _)| b).collect()
    }
}

/// Fits smoothed idf, `ln((1 + N) / (1 + df)) + 1`, over hashed buckets.
pub fn fit_tfidf<'a, I>(corpus: I, config: TfidfConfig) -> Result<HashedTfidfModel, FeaturizeError>
where
    I: IntoIterator<Item = &'a NormalizedUtterance>,
{
    config.validate()?;
    let mut model = HashedTfidfModel {
        format_version: TFIDF_FORMAT_VERSION,
        idf: Vec::new(),
        n_documents: 0,
        config,
    };
    let mut df = vec![0u32; model.config.buckets];
    for utt in corpus {
        for (b, _) in model.bucket_counts(&utt.text) {
            df[b as usize] += 1;
        }
        model.n_documents += 1;
    }
    if model.n_documents == 0 {
        return Err(FeaturizeError::EmptyCorpus);
    }
    let n = model.n_documents as f64;
    model.idf = df
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { (((1.0 + n) / (1.0 + f64::from(d))).ln() + 1.0) as f32 })
        .collect();
    Ok(model)
}

impl Featurizer for HashedTfidfModel {
    fn dim(&self) -> usize {
        self.config.output_dim()
    }

    fn embed(&self, utt: &NormalizedUtterance) -> Result<EmbeddingVector, FeaturizeError> {
        self.config.validate()?;
        if self.idf.len() != self.config.buckets {
            return Err(FeaturizeError::ConfigError(format!(
                "idf table has {} entries for {} buckets",
                self.idf.len(),
                self.config.buckets
            )));
        }
        let mut out = vec![0f32; self.dim()];
        for (bucket, tf) in self.bucket_counts(&utt.text) {
            let idf = self.idf[bucket as usize];
            if idf > 0.0 {
                let (slot, sign) = self.project(bucket);
                out[slot] += sign * tf as f32 * idf;
            }
        }
        Ok(EmbeddingVector::from_values(out))
    }
}

/// Vectors from an external encoder, keyed by exact preprocessed text.
///
/// File format: one row per line, `text<TAB>v1,v2,...,vd`, UTF-8. The text
/// is everything before the last tab. Vectors are scaled to unit length on
/// load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedEmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f32>>,
}

impl PrecomputedEmbeddingStore {
    pub fn parse(contents: &str) -> Result<Self, FeaturizeError> {
        let mut dim = None;
        let mut vectors = BTreeMap::new();
        for (idx, line) in contents.lines().enumerate() {
            let line_no = idx + 1;
            let malformed = |reason: String| FeaturizeError::MalformedFile { line: line_no, reason };
            if line.trim().is_empty() {
                continue;
            }
            let (text, nums) = line
                .rsplit_once('\t')
                .ok_or_else(|| malformed("missing tab separator".into()))?;
            let values = nums
                .split(',')
                .map(|v| v.trim().parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| malformed(format!("bad number: {e}")))?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(malformed("non-finite value".into()));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(malformed(format!("dimension {} differs from {}", values.len(), d)))
                }
                _ => {}
            }
            let v = EmbeddingVector::from_values(values);
            if v.is_empty_text() {
                return Err(malformed("zero vector".into()));
            }
            if vectors.insert(text.to_string(), v.into_values()).is_some() {
                return Err(malformed(format!("duplicate text `{text}`")));
            }
        }
        let dim = dim.ok_or(FeaturizeError::MalformedFile {
            line: 0,
            reason: "no rows".into(),
        })?;
        Ok(Self { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self, FeaturizeError> {
        let contents = std::fs::read_to_string(path).map_err(|e| FeaturizeError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&contents)
    }

    pub fn lookup(&self, text: &str) -> Result<EmbeddingVector, FeaturizeError> {
        self.vectors
            .get(text)
            .map(|v| EmbeddingVector { values: v.clone(), empty: false })
            .ok_or_else(|| FeaturizeError::MissingEmbedding(text.to_string()))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl Featurizer for PrecomputedEmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, utt: &NormalizedUtterance) -> Result<EmbeddingVector, FeaturizeError> {
        self.lookup(&utt.text)
    }
}

/// The featurizer persisted inside a model container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeaturizerModel {
    HashedTfidf(HashedTfidfModel),
    Precomputed(PrecomputedEmbeddingStore),
}

impl Featurizer for FeaturizerModel {
    fn dim(&self) -> usize {
        match self {
            FeaturizerModel::HashedTfidf(m) => m.dim(),
            FeaturizerModel::Precomputed(s) => s.dim(),
        }
    }

    fn embed(&self, utt: &NormalizedUtterance) -> Result<EmbeddingVector, FeaturizeError> {
        match self {
            FeaturizerModel::HashedTfidf(m) => m.embed(utt),
            FeaturizerModel::Precomputed(s) => s.embed(utt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(s: &str) -> NormalizedUtterance {
        NormalizedUtterance {
            text: s.to_string(),
            applied_substitutions: vec![],
        }
    }

    fn fit(docs: &[&str], cfg: TfidfConfig) -> HashedTfidfModel {
        let corpus: Vec<_> = docs.iter().map(|d| utt(d)).collect();
        fit_tfidf(&corpus, cfg).unwrap()
    }

    #[test]
    fn single_document_idf_is_one() {
        let m = fit(&["book a flight to paris"], TfidfConfig::default());
        let buckets = m.buckets_of("book a flight to paris");
        assert!(!buckets.is_empty());
        for b in buckets {
            // ln((1 + 1) / (1 + 1)) + 1
            assert_eq!(m.idf(b), Some(1.0));
        }
    }

    #[test]
    fn smoothed_idf_by_hand() {
        // N = 3; "alpha" in 2 docs => ln(4/3) + 1, "gamma" in 1 doc => ln(4/2) + 1
        let cfg = TfidfConfig {
            char_ngrams: (0, 0),
            word_ngrams: (1, 1),
            projection_dim: None,
            ..TfidfConfig::default()
        };
        let m = fit(&["alpha beta", "alpha", "gamma"], cfg);
        let alpha = m.buckets_of("alpha")[0];
        let gamma = m.buckets_of("gamma")[0];
        assert!((f64::from(m.idf(alpha).unwrap()) - ((4.0f64 / 3.0).ln() + 1.0)).abs() < 1e-6);
        assert!((f64::from(m.idf(gamma).unwrap()) - (2.0f64.ln() + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn fit_is_deterministic_and_rejects_empty() {
        let docs = ["hello there", "how are you", "book me a table"];
        assert_eq!(fit(&docs, TfidfConfig::default()), fit(&docs, TfidfConfig::default()));
        let empty: Vec<NormalizedUtterance> = vec![];
        assert_eq!(fit_tfidf(&empty, TfidfConfig::default()), Err(FeaturizeError::EmptyCorpus));
    }

    #[test]
    fn repeated_single_token_embeds_identically() {
        let m = fit(&["abc", "xyz def"], TfidfConfig::default());
        let one = m.embed(&utt("abc")).unwrap();
        let two = m.embed(&utt("abc abc")).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn unseen_or_empty_text_gives_flagged_zero() {
        let m = fit(&["abc"], TfidfConfig::default());
        let e = m.embed(&utt("")).unwrap();
        assert!(e.is_empty_text());
        assert!(e.values().iter().all(|&v| v == 0.0));
        assert_eq!(e.dim(), 256);
        assert!(m.embed(&utt("qqq")).unwrap().is_empty_text());
    }

    #[test]
    fn bad_configs_are_rejected() {
        for cfg in [
            TfidfConfig { buckets: 1000, ..TfidfConfig::default() },
            TfidfConfig { buckets: 1, ..TfidfConfig::default() },
            TfidfConfig { projection_dim: Some(0), ..TfidfConfig::default() },
            TfidfConfig { word_ngrams: (2, 1), ..TfidfConfig::default() },
            TfidfConfig { word_ngrams: (0, 0), char_ngrams: (0, 0), ..TfidfConfig::default() },
        ] {
            assert!(matches!(fit_tfidf(&[utt("a b")], cfg), Err(FeaturizeError::ConfigError(_))));
        }
    }

    #[test]
    fn unprojected_cosines_are_non_negative() {
        let cfg = TfidfConfig { projection_dim: None, buckets: 1 << 12, ..TfidfConfig::default() };
        let m = fit(&["play some jazz", "what is the weather", "play the weather report"], cfg);
        let a = m.embed(&utt("play jazz")).unwrap();
        let b = m.embed(&utt("weather today")).unwrap();
        let c = a.cosine(&b);
        assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn precomputed_store() {
        let store = PrecomputedEmbeddingStore::parse("hello world\t3,4\nbye\t0,2\n").unwrap();
        assert_eq!(store.dim(), 2);
        assert_eq!(store.lookup("hello world").unwrap().values(), &[0.6, 0.8]);
        assert_eq!(store.lookup("bye").unwrap().values(), &[0.0, 1.0]);
        assert_eq!(
            store.lookup("absent"),
            Err(FeaturizeError::MissingEmbedding("absent".into()))
        );

        let mixed = format!("a\t{}\nb\t{}\n", vec!["1"; 64].join(","), vec!["1"; 128].join(","));
        assert!(matches!(
            PrecomputedEmbeddingStore::parse(&mixed),
            Err(FeaturizeError::MalformedFile { line: 2, .. })
        ));
        assert!(PrecomputedEmbeddingStore::parse("a\t0,0\n").is_err());
        assert!(PrecomputedEmbeddingStore::parse("a 1,2\n").is_err());
        assert!(PrecomputedEmbeddingStore::parse("a\t1,2\na\t2,1\n").is_err());
        assert!(PrecomputedEmbeddingStore::parse("").is_err());
    }

    proptest! {
        #[test]
        fn embeddings_are_unit_or_flagged_zero(words in proptest::collection::vec("[a-e]{1,6}", 0..8)) {
            let m = fit(&["abc abd", "eed ace", "a b c d e", "dab cab"], TfidfConfig::default());
            let e = m.embed(&utt(&words.join(" "))).unwrap();
            let n = simd::norm(e.values());
            if e.is_empty_text() {
                prop_assert_eq!(n, 0.0);
            } else {
                prop_assert!((n - 1.0).abs() < 1e-6);
                let again = m.embed(&utt(&words.join(" "))).unwrap();
                let other = m.embed(&utt("dab abc")).unwrap();
                // signed hashing lets features go negative, so only the
                // general bound applies
                let c = e.cosine(&other);
                prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c), "{}", c);
                prop_assert_eq!(e, again);
            }
        }
    }
}
