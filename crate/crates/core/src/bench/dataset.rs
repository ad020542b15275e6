//! Dataset manifests and split construction.
//!
//! A manifest names the source files of one benchmark dataset, how to read
//! them, which intents become in-domain OOS, how dev/test splits are carved
//! and, optionally, the split sizes the result must reproduce.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::metrics::Scope;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid manifest {name}: {message}")]
    Manifest { name: String, message: String },
    #[error("manifest names intent `{0}` which does not occur in the data")]
    UnknownIntentInManifest(String),
    #[error("{dataset}: split sizes differ from the manifest: {details}")]
    CountMismatch { dataset: String, details: String },
    #[error("missing data files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
    /// Rows to be divided by `split.ratio`.
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum SourceFormat {
    /// CSV/TSV with one utterance per row.
    Delimited {
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default = "default_true")]
        has_header: bool,
        text_column: Column,
        label_column: Column,
        /// Rows where any of these columns is blank are dropped.
        #[serde(default)]
        drop_if_empty: Vec<Column>,
    },
    /// A directory with parallel text and label files, one item per line.
    Lines {
        #[serde(default = "default_text_file")]
        text_file: String,
        #[serde(default = "default_label_file")]
        label_file: String,
    },
    /// A JSON object whose `key` holds `[text, intent]` pairs.
    ClincJson { key: String },
    /// A directory of `<intent>.txt` files, one utterance per line.
    DirPerClass,
}

fn default_delimiter() -> char {
    ','
}
fn default_true() -> bool {
    true
}
fn default_text_file() -> String {
    "seq.in".into()
}
fn default_label_file() -> String {
    "label".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub split: SplitName,
    /// Relative to the data root.
    pub path: PathBuf,
    #[serde(flatten)]
    pub format: SourceFormat,
    /// Forces the scope of every row, e.g. a file of OOD queries.
    #[serde(default)]
    pub scope: Option<Scope>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdOosSpec {
    /// Intents listed by name.
    Intents(Vec<String>),
    /// Seeded random intents whose training rows total about `fraction`.
    Auto { fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelTransform {
    #[default]
    None,
    /// Keep the part before the first `/`.
    Coarse,
}

impl LabelTransform {
    pub fn apply(self, label: &str) -> String {
        match self {
            LabelTransform::None => label.to_string(),
            LabelTransform::Coarse => label.split('/').next().unwrap_or(label).to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SplitRules {
    /// Stratified share of train moved to dev when no dev source exists.
    pub dev_fraction: Option<f64>,
    /// `[train, dev, test]` shares for `all` sources.
    pub ratio: Option<[f64; 3]>,
}

/// Rows are `[IS, ID-OOS, OOD-OOS]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SplitCounts {
    pub train: [usize; 3],
    pub dev: [usize; 3],
    pub test: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Datasets sharing a group can be aggregated together.
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub label_transform: LabelTransform,
    /// Source intents (after the transform) that are OOD-OOS.
    #[serde(default)]
    pub ood_labels: Vec<String>,
    #[serde(default)]
    pub idoos: Option<IdOosSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitRules,
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub expected: Option<SplitCounts>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let m: DatasetManifest = toml::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |message: &str| {
            Err(DatasetError::Manifest {
                name: self.name.clone(),
                message: message.into(),
            })
        };
        let frac_ok = |f: f64| f > 0.0 && f < 1.0;
        if self.sources.is_empty() {
            return bad("no sources");
        }
        if let Some(f) = self.split.dev_fraction {
            if !frac_ok(f) {
                return bad("dev_fraction must be in (0, 1)");
            }
        }
        if let Some(r) = self.split.ratio {
            if r.iter().any(|&x| !frac_ok(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("ratio entries must be in (0, 1) and sum to 1");
            }
        }
        if let Some(IdOosSpec::Auto { fraction, .. }) = self.idoos {
            if !frac_ok(fraction) {
                return bad("idoos fraction must be in (0, 1)");
            }
        }
        let has = |s: SplitName| self.sources.iter().any(|x| x.split == s);
        if has(SplitName::All) && self.split.ratio.is_none() {
            return bad("`all` sources need split.ratio");
        }
        if !has(SplitName::All) && !has(SplitName::Train) {
            return bad("no training source");
        }
        Ok(())
    }

    /// Source paths under `root` that do not exist.
    pub fn missing_files(&self, root: &Path) -> Vec<PathBuf> {
        self.sources
            .iter()
            .map(|s| root.join(&s.path))
            .filter(|p| !p.exists())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub intent: String,
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SplitBundle {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

fn count(rows: &[LabeledExample]) -> [usize; 3] {
    let mut c = [0; 3];
    for r in rows {
        c[match r.scope {
            Scope::InScope => 0,
            Scope::IdOos => 1,
            Scope::OodOos => 2,
        }] += 1;
    }
    c
}

impl SplitBundle {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: count(&self.train),
            dev: count(&self.dev),
            test: count(&self.test),
        }
    }

    /// Hex SHA-256 over every row of every split, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, rows) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for r in rows {
                h.update(format!("{name}\t{:?}\t{}\t{}\n", r.scope, r.intent, r.text).as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A row as read from disk, before scopes are assigned.
#[derive(Debug, Clone)]
struct RawRow {
    text: String,
    label: String,
    forced: Option<Scope>,
}

/// Reads `(text, label)` pairs from one file or directory.
pub fn read_rows(path: &Path, format: &SourceFormat) -> Result<Vec<(String, String)>, DatasetError> {
    let path = path.to_path_buf();
    match format {
        SourceFormat::Delimited {
            delimiter,
            has_header,
            text_column,
            label_column,
            drop_if_empty,
        } => read_delimited(&path, *delimiter, *has_header, text_column, label_column, drop_if_empty),
        SourceFormat::Lines { text_file, label_file } => {
            let read = |f: &str| {
                let p = path.join(f);
                std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))
            };
            let texts = read(text_file)?;
            let labels = read(label_file)?;
            let t: Vec<&str> = texts.lines().collect();
            let l: Vec<&str> = labels.lines().collect();
            if t.len() != l.len() {
                return Err(parse_err(&path, format!("{} texts but {} labels", t.len(), l.len())));
            }
            Ok(t.into_iter().zip(l).map(|(a, b)| (a.to_string(), b.trim().to_string())).collect())
        }
        SourceFormat::ClincJson { key } => {
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let mut doc: BTreeMap<String, Vec<(String, String)>> =
                serde_json::from_str(&text).map_err(|e| parse_err(&path, e.to_string()))?;
            doc.remove(key).ok_or_else(|| parse_err(&path, format!("no key `{key}`")))
        }
        SourceFormat::DirPerClass => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&path)
                .map_err(|e| io_err(&path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let mut rows = Vec::new();
            for f in files {
                let label = f
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| parse_err(&f, "file name is not UTF-8"))?
                    .to_string();
                let text = std::fs::read_to_string(&f).map_err(|e| io_err(&f, e))?;
                rows.extend(text.lines().map(|l| (l.to_string(), label.clone())));
            }
            Ok(rows)
        }
    }
}

fn read_delimited(
    path: &Path,
    delimiter: char,
    has_header: bool,
    text: &Column,
    label: &Column,
    drop_if_empty: &[Column],
) -> Result<Vec<(String, String)>, DatasetError> {
    let delim = u8::try_from(delimiter).map_err(|_| parse_err(path, "delimiter must be ASCII"))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let headers: Vec<String> = if has_header {
        reader
            .headers()
            .map_err(|e| parse_err(path, e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect()
    } else {
        Vec::new()
    };
    let resolve = |c: &Column| -> Result<usize, DatasetError> {
        match c {
            Column::Index(i) => Ok(*i),
            Column::Name(n) => headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| parse_err(path, format!("no column `{n}`"))),
        }
    };
    let ti = resolve(text)?;
    let li = resolve(label)?;
    let drops = drop_if_empty.iter().map(resolve).collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        let get = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        if drops.iter().any(|&c| get(c).is_empty()) {
            continue;
        }
        if rec.get(ti).is_none() || rec.get(li).is_none() {
            return Err(parse_err(path, format!("row {} is missing a column", i + 1)));
        }
        rows.push((get(ti).to_string(), get(li).to_string()));
    }
    Ok(rows)
}

/// Greedy pick from a seeded shuffle of `counts`: keep adding intents while
/// that moves the total strictly closer to `fraction` of all rows.
pub fn choose_auto_idoos(counts: &BTreeMap<String, usize>, fraction: f64, seed: u64) -> Vec<String> {
    let total: usize = counts.values().sum();
    let target = fraction * total as f64;
    let mut intents: Vec<&String> = counts.keys().collect();
    intents.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = Vec::new();
    let mut sum = 0usize;
    for intent in intents {
        let next = sum + counts[intent];
        if (next as f64 - target).abs() < (sum as f64 - target).abs() {
            sum = next;
            chosen.push(intent.clone());
        } else {
            break;
        }
    }
    chosen.sort();
    chosen
}

/// Per-class sample sizes summing to `n_take`: floors of the proportional
/// share, then leftover units to the largest remainders, ties broken by a
/// seeded random order.
pub fn allocate(counts: &[usize], n_take: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let exact: Vec<f64> = counts.iter().map(|&c| n_take as f64 * c as f64 / n as f64).collect();
    let mut take: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n_take.saturating_sub(take.iter().sum());
    let tiebreak: Vec<u64> = counts.iter().map(|_| rng.gen()).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - take[a] as f64;
        let fb = exact[b] - take[b] as f64;
        fb.total_cmp(&fa).then(tiebreak[a].cmp(&tiebreak[b]))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if take[i] < counts[i] {
            take[i] += 1;
            left -= 1;
        }
    }
    take
}

/// Moves a stratified `n_take` rows out of `rows`; both parts keep their
/// original order.
pub fn stratified_take<T: Clone>(
    rows: &[T],
    key: impl Fn(&T) -> &str,
    n_take: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<T>, Vec<T>) {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_class.entry(key(r)).or_default().push(i);
    }
    let counts: Vec<usize> = by_class.values().map(Vec::len).collect();
    let take = allocate(&counts, n_take.min(rows.len()), rng);
    let mut picked = vec![false; rows.len()];
    for (idx, k) in by_class.values_mut().zip(take) {
        idx.shuffle(rng);
        for &i in &idx[..k] {
            picked[i] = true;
        }
    }
    let mut taken = Vec::with_capacity(n_take);
    let mut rest = Vec::with_capacity(rows.len() - n_take.min(rows.len()));
    for (r, p) in rows.iter().zip(picked) {
        if p {
            taken.push(r.clone());
        } else {
            rest.push(r.clone());
        }
    }
    (taken, rest)
}

fn ceil_share(fraction: f64, n: usize) -> usize {
    // guard against 0.1 * 8000 = 800.0000000000001
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Reads every source under `root` and builds the train/dev/test splits.
pub fn load_dataset(manifest: &DatasetManifest, root: &Path) -> Result<SplitBundle, DatasetError> {
    manifest.validate()?;
    let missing = manifest.missing_files(root);
    if !missing.is_empty() {
        return Err(DatasetError::MissingFiles(missing));
    }
    let mut raw: BTreeMap<SplitName, Vec<RawRow>> = BTreeMap::new();
    for src in &manifest.sources {
        let rows = read_rows(&root.join(&src.path), &src.format)?;
        raw.entry(src.split).or_default().extend(
            rows.into_iter()
                .filter(|(t, _)| !t.trim().is_empty())
                .map(|(text, label)| RawRow {
                    text,
                    label: manifest.label_transform.apply(&label),
                    forced: src.scope,
                }),
        );
    }

    let ood: BTreeSet<&str> = manifest.ood_labels.iter().map(String::as_str).collect();
    let is_candidate = |r: &RawRow| r.forced.is_none() && !ood.contains(r.label.as_str());
    let all_labels: BTreeSet<&str> = raw.values().flatten().filter(|r| is_candidate(r)).map(|r| r.label.as_str()).collect();

    let idoos: BTreeSet<String> = match &manifest.idoos {
        None => BTreeSet::new(),
        Some(IdOosSpec::Intents(list)) => {
            if let Some(unknown) = list.iter().find(|i| !all_labels.contains(i.as_str())) {
                return Err(DatasetError::UnknownIntentInManifest(unknown.clone()));
            }
            list.iter().cloned().collect()
        }
        Some(IdOosSpec::Auto { fraction, seed }) => {
            let pool = raw.get(&SplitName::Train).or_else(|| raw.get(&SplitName::All)).into_iter().flatten();
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for r in pool.filter(|r| is_candidate(r)) {
                *counts.entry(r.label.clone()).or_default() += 1;
            }
            choose_auto_idoos(&counts, *fraction, *seed).into_iter().collect()
        }
    };

    let finish = |rows: Vec<RawRow>| -> Vec<LabeledExample> {
        rows.into_iter()
            .map(|r| {
                let scope = r.forced.unwrap_or(if ood.contains(r.label.as_str()) {
                    Scope::OodOos
                } else if idoos.contains(&r.label) {
                    Scope::IdOos
                } else {
                    Scope::InScope
                });
                LabeledExample {
                    text: r.text,
                    intent: r.label,
                    scope,
                }
            })
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let mut train = finish(raw.remove(&SplitName::Train).unwrap_or_default());
    let mut dev = finish(raw.remove(&SplitName::Dev).unwrap_or_default());
    let mut test = finish(raw.remove(&SplitName::Test).unwrap_or_default());
    if let Some(all) = raw.remove(&SplitName::All) {
        let all = finish(all);
        let [r_train, r_dev, r_test] = manifest.split.ratio.expect("validated");
        let n_test = ceil_share(r_test, all.len());
        let (t, rest) = stratified_take(&all, |r| r.intent.as_str(), n_test, &mut rng);
        let n_dev = ceil_share(r_dev / (r_dev + r_train), rest.len());
        let (d, tr) = stratified_take(&rest, |r| r.intent.as_str(), n_dev, &mut rng);
        train.extend(tr);
        dev.extend(d);
        test.extend(t);
    }
    if dev.is_empty() {
        if let Some(f) = manifest.split.dev_fraction {
            let n_dev = ceil_share(f, train.len());
            let (d, tr) = stratified_take(&train, |r| r.intent.as_str(), n_dev, &mut rng);
            dev = d;
            train = tr;
        }
    }

    let bundle = SplitBundle { train, dev, test };
    if let Some(expected) = &manifest.expected {
        check_counts(&manifest.name, expected, &bundle.counts())?;
    }
    Ok(bundle)
}

pub fn check_counts(dataset: &str, expected: &SplitCounts, got: &SplitCounts) -> Result<(), DatasetError> {
    let mut details = Vec::new();
    let scopes = ["IS", "ID-OOS", "OOD-OOS"];
    for (split, e, g) in [("train", expected.train, got.train), ("dev", expected.dev, got.dev), ("test", expected.test, got.test)] {
        for i in 0..3 {
            if e[i] != g[i] {
                details.push(format!("{split} {}: expected {}, got {} ({:+})", scopes[i], e[i], g[i], g[i] as i64 - e[i] as i64));
            }
        }
    }
    if details.is_empty() {
        Ok(())
    } else {
        Err(DatasetError::CountMismatch {
            dataset: dataset.to_string(),
            details: details.join("; "),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_idoos_reaches_quarter_of_clinc_like_data() {
        let counts: BTreeMap<String, usize> = (0..150).map(|i| (format!("intent_{i:03}"), 100)).collect();
        let chosen = choose_auto_idoos(&counts, 0.25, 0);
        // 37 intents give 3700 (off by 50); a 38th would not get closer
        assert_eq!(chosen.len(), 37);
        assert_eq!(choose_auto_idoos(&counts, 0.25, 0), chosen);
        assert_ne!(choose_auto_idoos(&counts, 0.25, 1), chosen);
    }

    #[test]
    fn allocation_sums_and_stays_proportional() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let counts = [50, 30, 20, 1];
        let take = allocate(&counts, 11, &mut rng);
        assert_eq!(take.iter().sum::<usize>(), 11);
        for (t, c) in take.iter().zip(counts) {
            let exact = 11.0 * c as f64 / 101.0;
            assert!((*t as f64 - exact).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn stratified_take_preserves_order_and_size() {
        let rows: Vec<(usize, String)> = (0..100).map(|i| (i, format!("c{}", i % 4))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = stratified_take(&rows, |r| r.1.as_str(), 10, &mut rng);
        assert_eq!(a.len(), 10);
        assert_eq!(b.len(), 90);
        assert!(a.windows(2).all(|w| w[0].0 < w[1].0));
        for c in 0..4 {
            let n = a.iter().filter(|r| r.1 == format!("c{c}")).count();
            assert!(n == 2 || n == 3);
        }
    }

    #[test]
    fn ceil_share_ignores_float_noise() {
        assert_eq!(ceil_share(0.1, 8000), 800);
        assert_eq!(ceil_share(0.1, 328), 33);
        assert_eq!(ceil_share(0.1, 25607), 2561);
        assert_eq!(ceil_share(0.1 / 0.9, 23046), 2561);
    }

    fn write(dir: &Path, rel: &str, contents: &str) {
        let p = dir.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, contents).unwrap();
    }

    fn toy_manifest(extra: &str) -> DatasetManifest {
        toml::from_str(&format!(
            r#"
            name = "toy"
            seed = 3
            ood_labels = ["oos"]
            {extra}
            [split]
            dev_fraction = 0.25
            [[sources]]
            split = "train"
            path = "toy/train.tsv"
            format = "delimited"
            delimiter = "\t"
            text_column = "text"
            label_column = "intent"
            [[sources]]
            split = "test"
            path = "toy/test"
            format = "lines"
            "#
        ))
        .unwrap()
    }

    fn toy_root() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let mut train = String::from("text\tintent\n");
        for i in 0..8 {
            train.push_str(&format!("hello there {i}\tgreet\nbye now {i}\tbye\nweather today {i}\tweather\n"));
        }
        train.push_str("what is love\toos\n");
        write(dir.path(), "toy/train.tsv", &train);
        write(dir.path(), "toy/test/seq.in", "hi\nsee you\nrain?\nsing me a song\n");
        write(dir.path(), "toy/test/label", "greet\nbye\nweather\noos\n");
        dir
    }

    #[test]
    fn loads_and_splits_a_toy_dataset() {
        let root = toy_root();
        let m = toy_manifest(r#"idoos = { intents = ["weather"] }"#);
        let b = load_dataset(&m, root.path()).unwrap();
        let c = b.counts();
        // 25 train rows: dev = ceil(6.25) = 7
        assert_eq!(c.dev.iter().sum::<usize>(), 7);
        assert_eq!(c.train.iter().sum::<usize>() + c.dev.iter().sum::<usize>(), 25);
        assert_eq!(c.test, [2, 1, 1]);
        assert_eq!(b.digest(), load_dataset(&m, root.path()).unwrap().digest());

        let mut m2 = m.clone();
        m2.expected = Some(SplitCounts { train: c.train, dev: c.dev, test: [2, 1, 0] });
        match load_dataset(&m2, root.path()) {
            Err(DatasetError::CountMismatch { details, .. }) => assert!(details.contains("test OOD-OOS: expected 0, got 1 (+1)"), "{details}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_idoos_intent_and_missing_files() {
        let root = toy_root();
        let m = toy_manifest(r#"idoos = { intents = ["nope"] }"#);
        assert_eq!(load_dataset(&m, root.path()), Err(DatasetError::UnknownIntentInManifest("nope".into())));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(&m, empty.path()), Err(DatasetError::MissingFiles(v)) if v.len() == 2));
    }

    #[test]
    fn coarse_labels() {
        assert_eq!(LabelTransform::Coarse.apply("reminder/set_reminder"), "reminder");
        assert_eq!(LabelTransform::Coarse.apply("weather"), "weather");
    }

    proptest::proptest! {
        #[test]
        fn splits_are_deterministic_and_partition(labels in proptest::collection::vec(0u8..6, 1..200), take in 0usize..200, seed in 0u64..1000) {
            let rows: Vec<(usize, String)> = labels.iter().enumerate().map(|(i, l)| (i, format!("c{l}"))).collect();
            let take = take.min(rows.len());
            let run = || stratified_take(&rows, |r| r.1.as_str(), take, &mut ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = run();
            proptest::prop_assert_eq!((a.clone(), b.clone()), run());
            proptest::prop_assert_eq!(a.len(), take);
            let mut all: Vec<usize> = a.iter().chain(&b).map(|r| r.0).collect();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..rows.len()).collect::<Vec<_>>());
        }
    }
}
