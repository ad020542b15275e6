//! Training config file.
//!
//! ```toml
//! output = "model.oosd"
//! lexicon = "entities.toml"     # optional
//!
//! [data]
//! path = "train.csv"
//! format = "delimited"
//! text_column = "text"
//! label_column = "intent"
//! oos_label = "oos"             # rows with this label train the OOS side
//! oos_path = "oos.txt"          # optional, one utterance per line
//!
//! [system]
//! formulation = "discounting"
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use oosd::bench::dataset::{read_rows, SourceFormat};
use oosd::pipeline::{FeaturizerConfig, SystemConfig, TrainingData};
use oosd::textnorm::EntityLexicon;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub output: PathBuf,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    pub data: DataSpec,
    #[serde(default)]
    pub system: SystemConfig,
}

#[derive(Debug, Deserialize)]
pub struct DataSpec {
    pub path: PathBuf,
    #[serde(flatten)]
    pub format: SourceFormat,
    #[serde(default)]
    pub oos_label: Option<String>,
    #[serde(default)]
    pub oos_path: Option<PathBuf>,
}

pub struct TrainJob {
    pub output: PathBuf,
    pub lexicon: EntityLexicon,
    pub data: TrainingData,
    pub system: SystemConfig,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load(path: &Path) -> Result<TrainJob> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut file: TrainFile = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));

    if let FeaturizerConfig::Precomputed { path } = &mut file.system.featurizer {
        *path = resolve(base, path);
    }
    let lexicon = match &file.lexicon {
        Some(p) => EntityLexicon::load(&resolve(base, p))?,
        None => EntityLexicon::default(),
    };

    let mut data = TrainingData::default();
    for (text, label) in read_rows(&resolve(base, &file.data.path), &file.data.format)? {
        if text.trim().is_empty() {
            continue;
        }
        if file.data.oos_label.as_deref() == Some(label.as_str()) {
            data.oos_examples.push(text);
        } else {
            data.is_examples.push((text, label));
        }
    }
    if let Some(p) = &file.data.oos_path {
        let p = resolve(base, p);
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        data.oos_examples.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }

    Ok(TrainJob {
        output: resolve(base, &file.output),
        lexicon,
        data,
        system: file.system,
    })
}
