//! Experiment configuration: one TOML document, dotted-path overrides,
//! validation with key paths, and a content hash that names the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::ReportFormat;
use crate::classifiers::{ClassifierKind, TrainConfig};
use crate::digest::json_hash;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::image::IMAGE_SHAPE;
use crate::projectors::{EncoderConfig, InitKind, InversionConfig, ProjectorKind, VqConfig};
use crate::world::{ForgeryMethod, ForgeryParams, PerturbationParams, StorageLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Parent of the run directory. Not part of the hash.
    #[serde(skip_serializing)]
    pub output: PathBuf,
    pub generator: GeneratorConfig,
    pub dataset: DatasetConfig,
    pub inversion: InversionConfig,
    /// Used only when `inversion.init = "encoder"`.
    pub encoder: EncoderConfig,
    pub pca: PcaConfig,
    /// `vq.seed` is replaced by each replicate seed.
    pub vq: VqConfig,
    pub classifiers: ClassifiersConfig,
    pub decision: DecisionConfig,
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Genuine images, and fakes, each; fake `i` shares source id `i`.
    pub n_per_class: usize,
    /// Fraction of source ids assigned to training.
    pub train_fraction: f64,
    pub seed: u64,
    pub storage: StorageLayout,
    /// Fake `i` uses `forgeries[i % len]`.
    pub forgeries: Vec<ForgeryParams>,
    pub perturbation: PerturbationParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_per_class: 700,
            train_fraction: 0.715,
            seed: 0,
            storage: StorageLayout::Packed,
            forgeries: vec![ForgeryParams::splice(0.25, 0.05), ForgeryParams::style_swap(vec![2, 3])],
            perturbation: PerturbationParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub n_components: usize,
    pub batch_size: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            n_components: 64,
            batch_size: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifiersConfig {
    pub kinds: Vec<ClassifierKind>,
    /// `train.seed` is replaced by each replicate seed.
    pub train: TrainConfig,
}

impl Default for ClassifiersConfig {
    fn default() -> Self {
        Self {
            kinds: ClassifierKind::ALL.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionConfig {
    /// Prior probability of the fake class.
    pub pi_m: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self { pi_m: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub projectors: Vec<ProjectorKind>,
    /// Replicate seeds: each one draws its own split, projector fits and classifiers.
    pub seeds: Vec<u64>,
    pub ablation_sizes: Vec<usize>,
    pub ablation_projector: ProjectorKind,
    pub ablation_classifier: ClassifierKind,
    pub channel_classifier: ClassifierKind,
    /// Images entering the channel study.
    pub channel_forgery: ChannelSelection,
    /// Genuine images used by the reconstruction benchmark.
    pub reconstruction_samples: usize,
    pub formats: Vec<ReportFormat>,
}

/// `all` keeps every image; a method keeps its fakes and the genuines of the
/// same source ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSelection {
    All,
    Splice,
    StyleSwap,
}

impl ChannelSelection {
    pub fn method(self) -> Option<ForgeryMethod> {
        match self {
            ChannelSelection::All => None,
            ChannelSelection::Splice => Some(ForgeryMethod::Splice),
            ChannelSelection::StyleSwap => Some(ForgeryMethod::StyleSwap),
        }
    }
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            projectors: vec![ProjectorKind::GanInversion, ProjectorKind::Pca, ProjectorKind::Vq],
            seeds: vec![0, 1, 2, 3, 4],
            ablation_sizes: vec![50, 200, 800],
            ablation_projector: ProjectorKind::GanInversion,
            ablation_classifier: ClassifierKind::Rf,
            channel_classifier: ClassifierKind::Rf,
            channel_forgery: ChannelSelection::StyleSwap,
            reconstruction_samples: 250,
            formats: vec![ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Plotdata],
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs"),
            generator: GeneratorConfig::default(),
            dataset: DatasetConfig::default(),
            inversion: InversionConfig::default(),
            encoder: EncoderConfig::default(),
            pca: PcaConfig::default(),
            vq: VqConfig::default(),
            classifiers: ClassifiersConfig::default(),
            decision: DecisionConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn nested(prefix: &str, r: std::result::Result<(), (String, String)>) -> Result<()> {
    r.map_err(|(k, m)| config_err(format!("{prefix}.{k}"), m))
}

/// Sets `path` (dot separated) inside `root`, creating tables on the way.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(assignment, "override must look like key.path=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(path, "empty key segment"));
    }
    let (last, parents) = keys.split_last().expect("split yields one segment");
    let mut table = root;
    for (depth, k) in parents.iter().enumerate() {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(keys[..=depth].join("."), "is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// A TOML value when `raw` parses as one, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("<file>", e.message()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            config_err(
                if path == "." { "<root>".into() } else { path },
                e.inner().to_string().lines().next().unwrap_or_default(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_err(p.display().to_string(), e.to_string()))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Images on the training side of every split.
    pub fn train_images(&self) -> usize {
        let n = self.dataset.n_per_class;
        let sources = ((self.dataset.train_fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(2) - 1);
        2 * sources
    }

    pub fn validate(&self) -> Result<()> {
        nested("generator", self.generator.validate())?;
        let d = &self.dataset;
        if d.n_per_class < 2 {
            return Err(config_err("dataset.n_per_class", "must be at least 2"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(config_err("dataset.train_fraction", "must be in (0, 1)"));
        }
        if d.forgeries.is_empty() {
            return Err(config_err("dataset.forgeries", "at least one forgery is required"));
        }
        for (i, f) in d.forgeries.iter().enumerate() {
            nested(&format!("dataset.forgeries[{i}]"), f.validate(self.generator.channels))?;
        }
        nested("dataset.perturbation", d.perturbation.validate())?;
        nested("inversion", self.inversion.validate())?;
        if self.inversion.init == InitKind::Encoder {
            let e = &self.encoder;
            if e.n_pairs == 0 || e.epochs == 0 || e.batch_size == 0 {
                return Err(config_err("encoder", "n_pairs, epochs and batch_size must be positive"));
            }
            if !(e.learning_rate > 0.0) {
                return Err(config_err("encoder.learning_rate", "must be > 0"));
            }
        }
        let train = self.train_images();
        let dim: usize = IMAGE_SHAPE.iter().product();
        if self.pca.n_components == 0 || self.pca.n_components > train.min(dim) {
            return Err(config_err(
                "pca.n_components",
                format!("must be in [1, {}] for {train} training images", train.min(dim)),
            ));
        }
        if self.pca.batch_size == 0 {
            return Err(config_err("pca.batch_size", "must be positive"));
        }
        nested("vq", self.vq.validate())?;
        nested("classifiers.train", self.classifiers.train.validate())?;
        if self.classifiers.kinds.is_empty() {
            return Err(config_err("classifiers.kinds", "at least one classifier is required"));
        }
        let pi = self.decision.pi_m;
        if !(pi > 0.0 && pi < 1.0) {
            return Err(config_err("decision.pi_m", format!("must be in (0, 1), got {pi}")));
        }
        let a = &self.analysis;
        if a.seeds.is_empty() {
            return Err(config_err("analysis.seeds", "at least one seed is required"));
        }
        let mut seen = a.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != a.seeds.len() {
            return Err(config_err("analysis.seeds", "seeds must be distinct"));
        }
        if let Some(p) = a.projectors.iter().find(|p| matches!(p, ProjectorKind::Identity)) {
            return Err(config_err(
                "analysis.projectors",
                format!("`{p}` cannot feed a classifier"),
            ));
        }
        if matches!(a.ablation_projector, ProjectorKind::Identity) {
            return Err(config_err(
                "analysis.ablation_projector",
                "`identity` cannot feed a classifier",
            ));
        }
        if let Some(&s) = a.ablation_sizes.iter().find(|&&s| s < 2 || s > train) {
            return Err(config_err(
                "analysis.ablation_sizes",
                format!("size {s} outside [2, {train}] training images"),
            ));
        }
        if let Some(m) = a.channel_forgery.method() {
            if !d.forgeries.iter().any(|f| f.method == m) {
                return Err(config_err(
                    "analysis.channel_forgery",
                    "no configured forgery uses this method",
                ));
            }
        }
        if a.reconstruction_samples == 0 || a.reconstruction_samples > d.n_per_class {
            return Err(config_err(
                "analysis.reconstruction_samples",
                format!("must be in [1, {}]", d.n_per_class),
            ));
        }
        Ok(())
    }

    /// Hash of everything that affects results; the output location is excluded.
    pub fn hash(&self) -> String {
        json_hash(self)
    }

    /// `output/<hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output.join(self.hash())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config serialization: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.train_images(), 1000);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::from_toml("", &["decision.pi_m=0.3".into(), "analysis.seeds=[7]".into()]).unwrap();
        assert_eq!(cfg.decision.pi_m, 0.3);
        assert_eq!(cfg.analysis.seeds, vec![7]);
        let cfg = ExperimentConfig::from_toml("", &["classifiers.kinds=[\"rf\"]".into()]).unwrap();
        assert_eq!(cfg.classifiers.kinds, vec![ClassifierKind::Rf]);
    }

    #[test]
    fn invalid_prior_names_its_key() {
        let err = ExperimentConfig::from_toml("[decision]\npi_m = 1.5\n", &[]).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("decision.pi_m"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = ExperimentConfig::from_toml("[dataset]\nn_per_class = 10\nbogus = 1\n", &[]).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("dataset"), "{err}");
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn hash_ignores_output_but_not_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml("", &["dataset.seed=3".into()]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn ablation_size_must_fit_the_training_split() {
        let err = ExperimentConfig::from_toml("", &["analysis.ablation_sizes=[5000]".into()]).unwrap_err();
        assert!(err.to_string().contains("analysis.ablation_sizes"), "{err}");
    }
}
