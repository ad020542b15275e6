//! Discounting of in-scope confidences by the OOS score, the decision rule,
//! and end-to-end training and prediction for the four OOS formulations.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, ClassifierError, ConfidenceVector, IntentModel, ModelKind, TrainConfig, IN_SCOPE_LABEL, OOS_LABEL};
use crate::featurize::{self, EmbeddingVector, FeaturizeError, Featurizer, FeaturizerModel, PrecomputedEmbeddingStore, TfidfConfig};
use crate::oos_score::{self, NeighborIndex, OosScore, OosScorerConfig, PcaReconstructor, ScorerError, SearchMode};
use crate::simd;
use crate::textnorm::{self, EntityLexicon, NormalizedUtterance, TextError};

/// Product limits on training data size.
pub const MAX_IS_EXAMPLES: usize = 25_000;
pub const MAX_OOS_EXAMPLES: usize = 25_000;
pub const MAX_IS_CLASSES: usize = 2_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("confidence vector is empty")]
    EmptyConf,
    #[error("{what}: {got} exceeds the limit of {limit}")]
    LimitExceeded { what: &'static str, got: usize, limit: usize },
    #[error("no in-scope training examples")]
    NoInScopeExamples,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training example {index}: {source}")]
    Example { index: usize, source: TextError },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FormulationKind {
    /// IS classifier discounted by the nearest-neighbor OOS score.
    #[default]
    #[serde(rename = "discounting")]
    Discounting,
    /// IS/OOS gate first, then the IS argmax.
    #[serde(rename = "binary-gate")]
    BinaryGate,
    /// OOS as one more class.
    #[serde(rename = "k-plus-1")]
    KPlusOne,
    /// IS classifier with a threshold on its top confidence.
    #[serde(rename = "max-conf")]
    MaxConf,
}

impl FormulationKind {
    pub const ALL: [FormulationKind; 4] = [
        FormulationKind::Discounting,
        FormulationKind::BinaryGate,
        FormulationKind::KPlusOne,
        FormulationKind::MaxConf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FormulationKind::Discounting => "discounting",
            FormulationKind::BinaryGate => "binary-gate",
            FormulationKind::KPlusOne => "k-plus-1",
            FormulationKind::MaxConf => "max-conf",
        }
    }

    /// Whether the formulation yields a scalar score per query for the
    /// threshold-independent metrics.
    pub fn has_scalar_score(self) -> bool {
        self != FormulationKind::KPlusOne
    }
}

impl std::str::FromStr for FormulationKind {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PipelineError::InvalidConfig(format!("unknown formulation `{s}`")))
    }
}

impl std::fmt::Display for FormulationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombinerConfig {
    /// Steepness of the sigmoid branch of the discount function.
    pub a: f64,
    pub threshold: f64,
    /// Clip the discount factor to `[0, 1]`.
    pub clamp_factor: bool,
    /// Gate probability below which the binary gate says OOS.
    pub gate_threshold: f64,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            a: 10.0,
            threshold: 0.2,
            clamp_factor: true,
            gate_threshold: 0.5,
        }
    }
}

impl CombinerConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(PipelineError::InvalidConfig("a must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PipelineError::InvalidConfig("threshold must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(PipelineError::InvalidConfig("gate_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Identity at and above 0.5, a sigmoid centred on 0.5 below it.
pub fn discount_f(x: f64, a: f64) -> f64 {
    if x >= 0.5 {
        x
    } else {
        simd::sigmoid(a * (x - 0.5))
    }
}

/// Multiplier applied to the whole confidence vector for an OOS score.
pub fn discount_factor(distance: f64, cfg: &CombinerConfig) -> f64 {
    let factor = 1.0 - discount_f(distance.max(0.0), cfg.a);
    if cfg.clamp_factor {
        factor.clamp(0.0, 1.0)
    } else {
        factor
    }
}

pub fn combine(conf: &ConfidenceVector, score: &OosScore, cfg: &CombinerConfig) -> ConfidenceVector {
    conf.scaled(discount_factor(score.distance, cfg))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Intent(String),
    Oos,
}

impl Verdict {
    pub fn is_oos(&self) -> bool {
        matches!(self, Verdict::Oos)
    }

    pub fn intent(&self) -> Option<&str> {
        match self {
            Verdict::Intent(s) => Some(s),
            Verdict::Oos => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub top_confidence: f64,
    pub final_conf: ConfidenceVector,
    pub oos_score: Option<OosScore>,
    /// Per-query scalar for threshold-independent metrics, higher meaning
    /// more in scope. Absent for the K+1 formulation.
    pub score: Option<f64>,
}

/// OOS iff the top final confidence is below the threshold, otherwise the
/// argmax intent.
pub fn decide(final_conf: ConfidenceVector, cfg: &CombinerConfig) -> Result<Decision, PipelineError> {
    let best = final_conf.argmax().ok_or(PipelineError::EmptyConf)?;
    let top = final_conf.values()[best];
    let verdict = if top < cfg.threshold {
        Verdict::Oos
    } else {
        Verdict::Intent(final_conf.labels()[best].clone())
    };
    Ok(Decision {
        verdict,
        top_confidence: top,
        final_conf,
        oos_score: None,
        score: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeaturizerConfig {
    Tfidf(TfidfConfig),
    /// Externally computed vectors, keyed by preprocessed text.
    Precomputed { path: PathBuf },
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig::Tfidf(TfidfConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Neighbor,
    /// PCA reconstruction error, standing in for an autoencoder.
    Reconstruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub blend_weight: f64,
    pub oos_penalty: f64,
    pub renormalize: bool,
    pub mode: SearchMode,
    /// Principal components for the reconstruction scorer.
    pub components: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        let n = OosScorerConfig::default();
        Self {
            kind: ScorerKind::Neighbor,
            blend_weight: n.blend_weight,
            oos_penalty: n.oos_penalty,
            renormalize: n.renormalize,
            mode: n.mode,
            components: 32,
        }
    }
}

impl ScorerConfig {
    pub fn neighbor(&self) -> OosScorerConfig {
        OosScorerConfig {
            blend_weight: self.blend_weight,
            oos_penalty: self.oos_penalty,
            renormalize: self.renormalize,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SystemConfig {
    pub formulation: FormulationKind,
    pub featurizer: FeaturizerConfig,
    pub classifier: TrainConfig,
    pub scorer: ScorerConfig,
    pub combiner: CombinerConfig,
}

/// Raw training text. OOS examples carry no intent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    pub is_examples: Vec<(String, String)>,
    pub oos_examples: Vec<String>,
}

impl TrainingData {
    pub fn n_classes(&self) -> usize {
        self.is_examples
            .iter()
            .map(|(_, l)| l.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    }

    pub fn check_limits(&self) -> Result<(), PipelineError> {
        let checks = [
            ("in-scope examples", self.is_examples.len(), MAX_IS_EXAMPLES),
            ("out-of-scope examples", self.oos_examples.len(), MAX_OOS_EXAMPLES),
            ("in-scope classes", self.n_classes(), MAX_IS_CLASSES),
        ];
        for (what, got, limit) in checks {
            if got > limit {
                return Err(PipelineError::LimitExceeded { what, got, limit });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum OosModel {
    None,
    Neighbor(NeighborIndex),
    Reconstruction(PcaReconstructor),
    Gate(IntentModel),
    /// Gate probability from neighbor distance when no OOS data exists.
    OneClassGate(NeighborIndex),
}

/// Every trained component needed to answer a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OosSystem {
    formulation: FormulationKind,
    lexicon: EntityLexicon,
    featurizer: FeaturizerModel,
    classifier: IntentModel,
    oos_model: OosModel,
    combiner: CombinerConfig,
}

fn preprocess_all(texts: &[&str], lexicon: &EntityLexicon) -> Result<Vec<NormalizedUtterance>, PipelineError> {
    texts
        .par_iter()
        .enumerate()
        .map(|(index, t)| textnorm::preprocess(t, lexicon).map_err(|source| PipelineError::Example { index, source }))
        .collect()
}

fn embed_all(f: &FeaturizerModel, utts: &[NormalizedUtterance]) -> Result<Vec<EmbeddingVector>, PipelineError> {
    utts.par_iter().map(|u| f.embed(u).map_err(PipelineError::from)).collect()
}

impl OosSystem {
    pub fn train(data: &TrainingData, config: &SystemConfig, lexicon: EntityLexicon) -> Result<Self, PipelineError> {
        data.check_limits()?;
        config.combiner.validate()?;
        config.scorer.neighbor().validate()?;
        if data.is_examples.is_empty() {
            return Err(PipelineError::NoInScopeExamples);
        }
        let kind = config.formulation;

        let is_texts: Vec<&str> = data.is_examples.iter().map(|(t, _)| t.as_str()).collect();
        let oos_texts: Vec<&str> = data.oos_examples.iter().map(String::as_str).collect();
        let is_utts = preprocess_all(&is_texts, &lexicon)?;
        let oos_utts = preprocess_all(&oos_texts, &lexicon).map_err(|e| match e {
            PipelineError::Example { index, source } => PipelineError::Example {
                index: index + is_texts.len(),
                source,
            },
            other => other,
        })?;
        // the gate sees every entity synonym as in-scope vocabulary
        let synthetic = if kind == FormulationKind::BinaryGate && !lexicon.is_empty() {
            Some(lexicon.synthesize_synonym_example()?)
        } else {
            None
        };

        let featurizer = match &config.featurizer {
            FeaturizerConfig::Tfidf(cfg) => FeaturizerModel::HashedTfidf(featurize::fit_tfidf(
                is_utts.iter().chain(&oos_utts).chain(synthetic.iter()),
                cfg.clone(),
            )?),
            FeaturizerConfig::Precomputed { path } => FeaturizerModel::Precomputed(PrecomputedEmbeddingStore::load(path)?),
        };

        let is_emb = embed_all(&featurizer, &is_utts)?;
        let oos_emb = embed_all(&featurizer, &oos_utts)?;
        let is_labelled: Vec<(EmbeddingVector, String)> = is_emb
            .iter()
            .cloned()
            .zip(data.is_examples.iter().map(|(_, l)| l.clone()))
            .collect();

        let classifier = match kind {
            FormulationKind::KPlusOne if !oos_emb.is_empty() => {
                let mut all = is_labelled.clone();
                all.extend(oos_emb.iter().cloned().map(|e| (e, OOS_LABEL.to_string())));
                classifier::train(&all, ModelKind::KPlusOne, &config.classifier)?
            }
            // without OOS data the extra class cannot be trained and the
            // model reduces to the in-scope classes
            _ => classifier::train(&is_labelled, ModelKind::OvrIs, &config.classifier)?,
        };

        let oos_model = match kind {
            FormulationKind::Discounting => match config.scorer.kind {
                ScorerKind::Neighbor => OosModel::Neighbor(oos_score::build_index(&is_labelled, &oos_emb, &config.scorer.neighbor())?),
                ScorerKind::Reconstruction => OosModel::Reconstruction(oos_score::fit_pca(&is_emb, config.scorer.components)?),
            },
            FormulationKind::BinaryGate if oos_emb.is_empty() => {
                OosModel::OneClassGate(oos_score::build_index(&is_labelled, &[], &config.scorer.neighbor())?)
            }
            FormulationKind::BinaryGate => {
                let mut gate_data: Vec<(EmbeddingVector, String)> =
                    is_emb.iter().cloned().map(|e| (e, IN_SCOPE_LABEL.to_string())).collect();
                if let Some(s) = &synthetic {
                    gate_data.push((featurizer.embed(s)?, IN_SCOPE_LABEL.to_string()));
                }
                gate_data.extend(oos_emb.iter().cloned().map(|e| (e, OOS_LABEL.to_string())));
                OosModel::Gate(classifier::train(&gate_data, ModelKind::BinaryGate, &config.classifier)?)
            }
            FormulationKind::KPlusOne | FormulationKind::MaxConf => OosModel::None,
        };

        Ok(Self {
            formulation: kind,
            lexicon,
            featurizer,
            classifier,
            oos_model,
            combiner: config.combiner,
        })
    }

    pub fn formulation(&self) -> FormulationKind {
        self.formulation
    }

    pub fn combiner(&self) -> &CombinerConfig {
        &self.combiner
    }

    /// Replaces the combiner settings (threshold, steepness, clamping).
    pub fn set_combiner(&mut self, cfg: CombinerConfig) -> Result<(), PipelineError> {
        cfg.validate()?;
        self.combiner = cfg;
        Ok(())
    }

    pub fn lexicon(&self) -> &EntityLexicon {
        &self.lexicon
    }

    pub fn classifier(&self) -> &IntentModel {
        &self.classifier
    }

    pub fn neighbor_index(&self) -> Option<&NeighborIndex> {
        match &self.oos_model {
            OosModel::Neighbor(i) | OosModel::OneClassGate(i) => Some(i),
            _ => None,
        }
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, PipelineError> {
        let utt = textnorm::preprocess(text, &self.lexicon)?;
        Ok(self.featurizer.embed(&utt)?)
    }

    pub fn predict(&self, text: &str) -> Result<Decision, PipelineError> {
        self.predict_embedding(&self.embed(text)?)
    }

    /// Decisions in input order.
    pub fn predict_batch<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Vec<Result<Decision, PipelineError>> {
        texts.par_iter().map(|t| self.predict(t.as_ref())).collect()
    }

    pub fn predict_embedding(&self, emb: &EmbeddingVector) -> Result<Decision, PipelineError> {
        let conf = self.classifier.predict_conf(emb)?;
        let cfg = &self.combiner;
        match (&self.formulation, &self.oos_model) {
            (FormulationKind::Discounting, model) => {
                let s = match model {
                    OosModel::Neighbor(index) => oos_score::score(index, emb)?,
                    OosModel::Reconstruction(rec) => oos_score::reconstruction_score(rec, emb)?,
                    _ => unreachable!("discounting is trained with a scorer"),
                };
                let mut d = decide(combine(&conf, &s, cfg), cfg)?;
                d.oos_score = Some(s);
                d.score = Some(d.top_confidence);
                Ok(d)
            }
            (FormulationKind::BinaryGate, model) => {
                let (p_in, s) = match model {
                    OosModel::Gate(gate) => (gate.predict_conf(emb)?.values()[0], None),
                    OosModel::OneClassGate(index) => {
                        let s = oos_score::score(index, emb)?;
                        (1.0 - s.distance.min(1.0), Some(s))
                    }
                    _ => unreachable!("binary gate is trained with a gate"),
                };
                let best = conf.argmax().ok_or(PipelineError::EmptyConf)?;
                let top = conf.values()[best];
                let verdict = if p_in < cfg.gate_threshold {
                    Verdict::Oos
                } else {
                    Verdict::Intent(conf.labels()[best].clone())
                };
                Ok(Decision {
                    verdict,
                    top_confidence: top,
                    final_conf: conf,
                    oos_score: s,
                    score: Some(p_in),
                })
            }
            (FormulationKind::KPlusOne, _) => {
                let best = conf.argmax().ok_or(PipelineError::EmptyConf)?;
                let label = &conf.labels()[best];
                let verdict = if label == OOS_LABEL {
                    Verdict::Oos
                } else {
                    Verdict::Intent(label.clone())
                };
                Ok(Decision {
                    verdict,
                    top_confidence: conf.values()[best],
                    final_conf: conf,
                    oos_score: None,
                    score: None,
                })
            }
            (FormulationKind::MaxConf, _) => {
                let mut d = decide(conf, cfg)?;
                d.score = Some(d.top_confidence);
                Ok(d)
            }
        }
    }

    /// Restores caches skipped during serialization.
    pub(crate) fn prepare(&mut self) {
        self.classifier.prepare();
        if let OosModel::Gate(g) = &mut self.oos_model {
            g.prepare();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::EntityDefinition;

    const A: f64 = 10.0;

    #[test]
    fn discount_examples() {
        for a in [1.0, 10.0, 100.0] {
            assert_eq!(discount_f(0.5, a), 0.5);
        }
        assert_eq!(discount_f(0.9, A), 0.9);
        assert!((discount_f(0.2, A) - 0.047_425_873_177_566_78).abs() < 1e-12);
    }

    #[test]
    fn discount_is_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let f = discount_f(i as f64 / 1000.0, A);
            assert!(f >= prev);
            prev = f;
        }
    }

    #[test]
    fn discount_is_sublinear_except_near_zero() {
        // sigmoid(-5) > 0, so f(x) > x on [0, ~0.00719); below linear after that
        let root = {
            let (mut lo, mut hi) = (0.0f64, 0.1f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if discount_f(mid, A) > mid { lo = mid } else { hi = mid }
            }
            lo
        };
        assert!((root - 0.007_19).abs() < 1e-4, "{root}");
        for i in 0..500 {
            let x = i as f64 / 1000.0;
            assert_eq!(discount_f(x, A) <= x, x > root, "x = {x}");
        }
    }

    fn conf(pairs: &[(&str, f64)]) -> ConfidenceVector {
        ConfidenceVector::from_pairs(pairs.iter().map(|(l, v)| (l.to_string(), *v)))
    }

    fn dist(d: f64) -> OosScore {
        OosScore {
            distance: d,
            nearest_source: oos_score::Source::InScope,
        }
    }

    #[test]
    fn combine_examples() {
        let cfg = CombinerConfig::default();
        let c = combine(&conf(&[("x", 0.8), ("y", 0.4)]), &dist(0.6), &cfg);
        assert!((c.values()[0] - 0.32).abs() < 1e-12 && (c.values()[1] - 0.16).abs() < 1e-12);

        let f0 = 1.0 - simd::sigmoid(-5.0);
        assert!((f0 - 0.993_307_149_075_715).abs() < 1e-12);
        let c = combine(&conf(&[("x", 0.5)]), &dist(0.0), &cfg);
        assert_eq!(c.values()[0], 0.5 * f0);

        for d in [1.0, 1.25, 2.25] {
            let c = combine(&conf(&[("x", 0.9), ("y", 0.1)]), &dist(d), &cfg);
            assert_eq!(c.values(), &[0.0, 0.0]);
        }
        let raw = CombinerConfig { clamp_factor: false, ..cfg };
        assert!(combine(&conf(&[("x", 0.9)]), &dist(1.25), &raw).values()[0] < 0.0);
    }

    #[test]
    fn decide_examples() {
        let cfg = CombinerConfig::default();
        assert!(decide(conf(&[("a", 0.19), ("b", 0.05)]), &cfg).unwrap().verdict.is_oos());
        assert_eq!(decide(conf(&[("a", 0.21), ("b", 0.05)]), &cfg).unwrap().verdict, Verdict::Intent("a".into()));
        assert_eq!(decide(conf(&[("z", 0.3), ("m", 0.3)]), &cfg).unwrap().verdict, Verdict::Intent("m".into()));
        assert!(matches!(decide(conf(&[]), &cfg), Err(PipelineError::EmptyConf)));
    }

    #[test]
    fn top_confidence_nonincreasing_in_distance() {
        let cfg = CombinerConfig::default();
        let c = conf(&[("a", 0.7), ("b", 0.2)]);
        let mut prev = f64::INFINITY;
        for i in 0..=300 {
            let top = combine(&c, &dist(i as f64 / 100.0), &cfg).max().unwrap();
            assert!(top <= prev);
            prev = top;
        }
    }

    #[test]
    fn formulation_names_round_trip() {
        for k in FormulationKind::ALL {
            assert_eq!(k.name().parse::<FormulationKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("k+1".parse::<FormulationKind>().is_err());
    }

    fn toy_data() -> TrainingData {
        let is = [
            ("book a flight to paris", "travel"),
            ("book a flight to rome", "travel"),
            ("find me a flight tomorrow", "travel"),
            ("what is my account balance", "banking"),
            ("show my balance please", "banking"),
            ("how much money is in my account", "banking"),
        ];
        TrainingData {
            is_examples: is.iter().map(|(t, l)| (t.to_string(), l.to_string())).collect(),
            oos_examples: vec!["tell me a joke".into(), "what is the meaning of life".into()],
        }
    }

    #[test]
    fn every_formulation_trains_and_predicts() {
        let data = toy_data();
        for kind in FormulationKind::ALL {
            let cfg = SystemConfig { formulation: kind, ..Default::default() };
            let sys = OosSystem::train(&data, &cfg, EntityLexicon::default()).unwrap();
            let d = sys.predict("book a flight to paris").unwrap();
            assert_eq!(d.score.is_some(), kind.has_scalar_score(), "{kind}");
            assert!((d.top_confidence - d.final_conf.max().unwrap()).abs() == 0.0);
            if kind == FormulationKind::KPlusOne {
                assert!(d.final_conf.get(OOS_LABEL).is_some());
            }
        }
    }

    #[test]
    fn training_query_is_in_scope_under_raw_blend() {
        let data = toy_data();
        let mut cfg = SystemConfig::default();
        cfg.scorer.blend_weight = 1.0;
        let sys = OosSystem::train(&data, &cfg, EntityLexicon::default()).unwrap();
        let d = sys.predict("what is my account balance").unwrap();
        assert!(d.oos_score.unwrap().distance < 1e-6);
        assert_eq!(d.verdict, Verdict::Intent("banking".into()));
    }

    #[test]
    fn one_class_gate_fallback() {
        let mut data = toy_data();
        data.oos_examples.clear();
        let cfg = SystemConfig { formulation: FormulationKind::BinaryGate, ..Default::default() };
        let sys = OosSystem::train(&data, &cfg, EntityLexicon::default()).unwrap();
        let d = sys.predict("show my balance please").unwrap();
        assert!(d.score.unwrap() > 0.5);
        assert!(!d.verdict.is_oos());
    }

    #[test]
    fn limits_are_enforced() {
        let data = TrainingData {
            is_examples: (0..=MAX_IS_EXAMPLES).map(|i| (format!("t{i}"), "a".into())).collect(),
            oos_examples: Vec::new(),
        };
        assert!(matches!(
            OosSystem::train(&data, &SystemConfig::default(), EntityLexicon::default()),
            Err(PipelineError::LimitExceeded { got: 25_001, .. })
        ));
        let data = TrainingData {
            is_examples: (0..=MAX_IS_CLASSES).map(|i| (format!("t{i}"), format!("c{i}"))).collect(),
            oos_examples: Vec::new(),
        };
        assert!(matches!(data.check_limits(), Err(PipelineError::LimitExceeded { what: "in-scope classes", .. })));
    }

    #[test]
    fn synonyms_give_identical_decisions() {
        let lexicon = EntityLexicon::new(vec![EntityDefinition {
            name: "cell phone".into(),
            proxy_token: "<cell_phone>".into(),
            synonyms: vec!["iphone 11".into(), "iphone xr".into(), "galaxy".into()],
        }])
        .unwrap();
        let mut data = toy_data();
        data.is_examples.push(("i want an iphone 11".into(), "shopping".into()));
        for kind in FormulationKind::ALL {
            let cfg = SystemConfig { formulation: kind, ..Default::default() };
            let sys = OosSystem::train(&data, &cfg, lexicon.clone()).unwrap();
            let a = sys.predict("i want an iphone 11").unwrap();
            let b = sys.predict("i want an iphone xr").unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg: SystemConfig = toml::from_str(
            r#"
            formulation = "k-plus-1"
            [featurizer]
            kind = "tfidf"
            projection_dim = 128
            [scorer]
            blend_weight = 0.3
            mode = { approximate = { probes = 4 } }
            [combiner]
            threshold = 0.4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.formulation, FormulationKind::KPlusOne);
        assert_eq!(cfg.scorer.blend_weight, 0.3);
        assert!(matches!(cfg.scorer.mode, SearchMode::Approximate(ivf) if ivf.probes == 4));
        assert!(matches!(cfg.featurizer, FeaturizerConfig::Tfidf(ref t) if t.projection_dim == Some(128)));
        assert_eq!(cfg.combiner.a, 10.0);
    }

    proptest::proptest! {
        #[test]
        fn argmax_survives_discounting(
            values in proptest::collection::vec(0.0f64..1.0, 1..40),
            distance in -0.5f64..2.0,
            a in 0.1f64..100.0,
        ) {
            let conf = ConfidenceVector::from_pairs(values.iter().enumerate().map(|(i, v)| (format!("i{i:02}"), *v)));
            let cfg = CombinerConfig { a, ..Default::default() };
            let s = OosScore { distance, nearest_source: crate::oos_score::Source::InScope };
            proptest::prop_assert_eq!(discount_f(0.5, a), 0.5);
            let factor = discount_factor(distance, &cfg);
            proptest::prop_assert!((0.0..=1.0).contains(&factor));
            if factor > 0.0 {
                proptest::prop_assert_eq!(combine(&conf, &s, &cfg).argmax(), conf.argmax());
            }
        }
    }
}
