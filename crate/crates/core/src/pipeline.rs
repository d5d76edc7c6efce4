//! Staged experiment runner. Each stage reads and writes fixed paths inside
//! the run directory `output/<config hash>`, and every artifact records the
//! hash of the config that produced it.

use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    channel_importance, emit_report, training_size_ablation, BenchmarkResult, BenchmarkRow, ChannelReport, CodeSource,
    Confusion, DecisionSummary, ExperimentReport, GridOptions,
};
use crate::classifiers::{self, Classifier, TrainConfig};
use crate::config::ExperimentConfig;
use crate::container::Container;
use crate::decision::{calibrate_threshold, Priors};
use crate::error::{Error, Result};
use crate::generator::{GeneratorModel, StyleCode};
use crate::image::Image;
use crate::perceptual::{mean_ci95, reconstruction_benchmark, FeatureExtractor, ReconstructionSummary, DEFAULT_SEED};
use crate::projectors::{
    pca_fit_incremental, train_encoder, vq_train, Code, EncoderModel, IdentityProjector, InitKind, InversionResult,
    Inverter, PcaModel, Projector, ProjectorKind, VqConfig, VqModel,
};
use crate::tensor::Tensor;
use crate::world::{
    fake_params_hash, generate_fake_with, generate_genuine_with, read_dataset, read_dataset_meta, split_indices,
    write_dataset, Label, LabeledImage, MANIFEST_FILE,
};

pub const HASH_KEY: &str = "config_hash";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Invert,
    FitProjector,
    TrainClassifier,
    Evaluate,
    ChannelImportance,
    AblateSize,
    Report,
}

impl Stage {
    /// Order used by `full`.
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::Invert,
        Stage::FitProjector,
        Stage::TrainClassifier,
        Stage::Evaluate,
        Stage::ChannelImportance,
        Stage::AblateSize,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Invert => "invert",
            Stage::FitProjector => "fit-projector",
            Stage::TrainClassifier => "train-classifier",
            Stage::Evaluate => "evaluate",
            Stage::ChannelImportance => "channel-importance",
            Stage::AblateSize => "ablate-size",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct Tagged<T> {
    config_hash: String,
    data: T,
}

/// One run directory bound to one config.
pub struct Run {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(config: ExperimentConfig) -> Self {
        let hash = config.hash();
        let dir = config.run_dir();
        Self { config, hash, dir }
    }

    pub fn execute(&self, stage: Stage) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let header = format!("# {HASH_KEY} {}\n", self.hash);
        std::fs::write(self.dir.join(CONFIG_FILE), header + &self.config.to_toml()?)?;
        info!("{stage}: {}", self.dir.display());
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::Invert => self.invert(),
            Stage::FitProjector => self.fit_projectors(),
            Stage::TrainClassifier => self.train_classifiers(),
            Stage::Evaluate => self.evaluate(),
            Stage::ChannelImportance => self.channels(),
            Stage::AblateSize => self.ablate(),
            Stage::Report => self.report(),
        }
        .map_err(|e| e.context(stage.as_str()))
    }

    pub fn full(&self) -> Result<()> {
        Stage::ALL.iter().try_for_each(|&s| self.execute(s))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    pub fn gan_codes_path(&self) -> PathBuf {
        self.dir.join("codes").join("gan_inversion.lfl")
    }

    pub fn codes_path(&self, kind: ProjectorKind, seed: u64) -> PathBuf {
        match kind {
            ProjectorKind::GanInversion => self.gan_codes_path(),
            _ => self.dir.join("codes").join(format!("{kind}_seed{seed}.lfl")),
        }
    }

    pub fn projector_path(&self, kind: ProjectorKind, seed: u64) -> PathBuf {
        self.dir.join("projectors").join(format!("{kind}_seed{seed}.lfl"))
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.dir.join("projectors").join("encoder.lfl")
    }

    pub fn classifier_path(&self, p: ProjectorKind, c: classifiers::ClassifierKind, seed: u64) -> PathBuf {
        self.dir.join("classifiers").join(format!("{p}_{c}_seed{seed}.lfl"))
    }

    pub fn result_path(&self, name: &str) -> PathBuf {
        self.dir.join("results").join(format!("{name}.json"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }

    fn save(&self, mut c: Container, path: &Path) -> Result<()> {
        c.set_meta(HASH_KEY, &self.hash);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        c.save(path)
    }

    fn check_hash(&self, path: &Path, found: Option<&str>) -> Result<()> {
        match found {
            Some(h) if h == self.hash => Ok(()),
            other => Err(Error::HashMismatch {
                path: path.display().to_string(),
                found: other.unwrap_or("<none>").to_string(),
                expected: self.hash.clone(),
            }),
        }
    }

    fn missing(path: &Path, producer: Stage) -> Error {
        Error::MissingArtifact {
            path: path.display().to_string(),
            producer: producer.to_string(),
        }
    }

    fn load(&self, path: &Path, producer: Stage) -> Result<Container> {
        if !path.exists() {
            return Err(Self::missing(path, producer));
        }
        let c = Container::load(path)?;
        self.check_hash(path, c.meta(HASH_KEY))?;
        Ok(c)
    }

    fn write_json<T: Serialize>(&self, name: &str, data: T) -> Result<()> {
        let path = self.result_path(name);
        std::fs::create_dir_all(path.parent().expect("results dir"))?;
        let doc = Tagged {
            config_hash: self.hash.clone(),
            data,
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str, producer: Stage) -> Result<T> {
        let path = self.result_path(name);
        if !path.exists() {
            return Err(Self::missing(&path, producer));
        }
        let doc: Tagged<T> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        self.check_hash(&path, Some(&doc.config_hash))?;
        Ok(doc.data)
    }

    pub fn load_dataset(&self) -> Result<Vec<LabeledImage>> {
        let dir = self.data_dir();
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Self::missing(&dir.join(MANIFEST_FILE), Stage::GenData));
        }
        let meta = read_dataset_meta(&dir)?;
        self.check_hash(&dir.join(MANIFEST_FILE), meta.get(HASH_KEY).map(String::as_str))?;
        read_dataset(&dir)
    }

    /// Classifier features of every dataset image for one projector and seed.
    pub fn load_codes(&self, kind: ProjectorKind, seed: u64) -> Result<Vec<Vec<f64>>> {
        let producer = match kind {
            ProjectorKind::GanInversion => Stage::Invert,
            _ => Stage::FitProjector,
        };
        let c = self.load(&self.codes_path(kind, seed), producer)?;
        let t = c.require("codes")?;
        let width: usize = t.shape()[1..].iter().product();
        Ok(t.data().chunks(width).map(<[f64]>::to_vec).collect())
    }

    pub fn load_style_codes(&self) -> Result<Vec<StyleCode>> {
        let c = self.load(&self.gan_codes_path(), Stage::Invert)?;
        let t = c.require("codes")?;
        let (channels, dim) = (t.shape()[1], t.shape()[2]);
        t.data()
            .chunks(channels * dim)
            .map(|r| StyleCode::new(Tensor::new(vec![channels, dim], r.to_vec())?))
            .collect()
    }

    pub fn inversion_losses(&self) -> Result<Vec<f64>> {
        Ok(self
            .load(&self.gan_codes_path(), Stage::Invert)?
            .require("loss")?
            .data()
            .to_vec())
    }

    fn generator(&self) -> Result<GeneratorModel> {
        GeneratorModel::new(self.config.generator)
    }

    pub fn grid_options(&self) -> Result<GridOptions> {
        Ok(GridOptions {
            train: self.config.classifiers.train,
            priors: Priors::new(self.config.decision.pi_m)?,
            train_fraction: self.config.dataset.train_fraction,
        })
    }

    fn split(&self, data: &[LabeledImage], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        let sources: Vec<u64> = data.iter().map(|d| d.source_id).collect();
        split_indices(&sources, self.config.dataset.train_fraction, seed)
    }

    /// Projectors that need fitting on each split.
    fn fitted_projectors(&self) -> Vec<ProjectorKind> {
        let a = &self.config.analysis;
        let mut kinds: Vec<ProjectorKind> = a
            .projectors
            .iter()
            .chain(std::iter::once(&a.ablation_projector))
            .copied()
            .filter(|k| matches!(k, ProjectorKind::Pca | ProjectorKind::Vq))
            .collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    fn gen_data(&self) -> Result<()> {
        let data = build_dataset(&self.config)?;
        write_dataset(
            &self.data_dir(),
            &data,
            self.config.dataset.storage,
            &[(HASH_KEY, &self.hash)],
        )?;
        info!("wrote {} images", data.len());
        Ok(())
    }

    fn invert(&self) -> Result<()> {
        let data = self.load_dataset()?;
        let g = self.generator()?;
        let (results, encoder) = invert_all(&self.config, &g, &data)?;
        if let Some(e) = encoder {
            self.save(e.to_container(), &self.encoder_path())?;
        }
        let [c, w] = g.code_shape();
        let mut out = Container::new();
        out.set_meta("kind", "gan_codes");
        out.push(
            "codes",
            Tensor::new(
                vec![results.len(), c, w],
                results
                    .iter()
                    .flat_map(|r| r.code.tensor().data().iter().copied())
                    .collect(),
            )?,
        );
        out.push(
            "loss",
            Tensor::new(vec![results.len()], results.iter().map(|r| r.final_loss).collect())?,
        );
        self.save(out, &self.gan_codes_path())?;
        info!("inverted {} images", results.len());
        Ok(())
    }

    fn fit_projectors(&self) -> Result<()> {
        let data = self.load_dataset()?;
        for &seed in &self.config.analysis.seeds {
            let (train, _) = self.split(&data, seed)?;
            for kind in self.fitted_projectors() {
                let (model, codes) = self
                    .fit_one(kind, &data, &train, seed)
                    .map_err(|e| e.context(format!("fitting {kind} projector (seed {seed})")))?;
                self.save(model, &self.projector_path(kind, seed))?;
                let mut c = Container::new();
                c.set_meta("kind", "codes");
                let width = codes[0].len();
                c.push("codes", Tensor::new(vec![codes.len(), width], codes.concat())?);
                self.save(c, &self.codes_path(kind, seed))?;
            }
        }
        Ok(())
    }

    fn fit_one(
        &self,
        kind: ProjectorKind,
        data: &[LabeledImage],
        train: &[usize],
        seed: u64,
    ) -> Result<(Container, Vec<Vec<f64>>)> {
        match kind {
            ProjectorKind::Pca => {
                let rows: Vec<Vec<f64>> = train.iter().map(|&i| data[i].image.data().to_vec()).collect();
                let p = &self.config.pca;
                let model = pca_fit_incremental(rows.chunks(p.batch_size), p.n_components)?;
                let codes = data
                    .par_iter()
                    .map(|d| model.transform(d.image.data()))
                    .collect::<Result<_>>()?;
                Ok((model.to_container(), codes))
            }
            ProjectorKind::Vq => {
                let images: Vec<Image> = train.iter().map(|&i| data[i].image.clone()).collect();
                let model = vq_train(&images, &VqConfig { seed, ..self.config.vq })?;
                let codes = data
                    .par_iter()
                    .map(|d| Ok(model.project(&d.image)?.features()))
                    .collect::<Result<_>>()?;
                Ok((model.to_container(), codes))
            }
            other => Err(Error::invalid(format!("projector `{other}` is not fitted per split"))),
        }
    }

    fn train_classifiers(&self) -> Result<()> {
        let data = self.load_dataset()?;
        let labels: Vec<Label> = data.iter().map(|d| d.label).collect();
        let a = &self.config.analysis;
        for &seed in &a.seeds {
            let (train, _) = self.split(&data, seed)?;
            let y: Vec<Label> = train.iter().map(|&i| labels[i]).collect();
            for &p in &a.projectors {
                let codes = self.load_codes(p, seed)?;
                let x: Vec<Vec<f64>> = train.iter().map(|&i| codes[i].clone()).collect();
                let cfg = TrainConfig {
                    seed,
                    ..self.config.classifiers.train
                };
                let models = self
                    .config
                    .classifiers
                    .kinds
                    .par_iter()
                    .map(|&k| {
                        classifiers::train(k, &x, &y, &cfg)
                            .map_err(|e| e.context(format!("{k} on {p} codes (seed {seed})")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for m in models {
                    let mut c = m.to_container();
                    c.set_meta("projector", p.as_str());
                    c.set_meta("seed", &seed.to_string());
                    self.save(c, &self.classifier_path(p, m.kind, seed))?;
                }
            }
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        let data = self.load_dataset()?;
        let labels: Vec<Label> = data.iter().map(|d| d.label).collect();
        let rule = calibrate_threshold(&Priors::new(self.config.decision.pi_m)?);
        let a = &self.config.analysis;
        let mut rows = Vec::new();
        for &seed in &a.seeds {
            let (train, test) = self.split(&data, seed)?;
            let truth: Vec<Label> = test.iter().map(|&i| labels[i]).collect();
            for &p in &a.projectors {
                let codes = self.load_codes(p, seed)?;
                let x: Vec<Vec<f64>> = test.iter().map(|&i| codes[i].clone()).collect();
                for &k in &self.config.classifiers.kinds {
                    let model = Classifier::from_container(
                        &self.load(&self.classifier_path(p, k, seed), Stage::TrainClassifier)?,
                    )?;
                    let predicted: Vec<Label> = model.predict_scores(&x)?.into_iter().map(|s| rule.decide(s)).collect();
                    let confusion = Confusion::from_labels(&predicted, &truth)?;
                    rows.push(BenchmarkRow {
                        projector: p,
                        classifier: k,
                        train_size: train.len(),
                        seed,
                        accuracy: confusion.accuracy(),
                        confusion,
                    });
                }
            }
        }
        self.write_json("benchmark", BenchmarkResult { rows })?;
        self.write_json("reconstruction", self.reconstruction(&data)?)
    }

    /// Perceptual reconstruction distance on the first genuine images, using
    /// projectors fitted on the first seed's split.
    fn reconstruction(&self, data: &[LabeledImage]) -> Result<Vec<ReconstructionSummary>> {
        let n = self.config.analysis.reconstruction_samples;
        let seed = self.config.analysis.seeds[0];
        let fe = FeatureExtractor::new(DEFAULT_SEED);
        let genuine: Vec<usize> = (0..data.len())
            .filter(|&i| data[i].label == Label::Genuine)
            .take(n)
            .collect();
        let images: Vec<Image> = genuine.iter().map(|&i| data[i].image.clone()).collect();
        let mut out = vec![reconstruction_benchmark(&fe, &IdentityProjector, &images, n)?];
        let g = self.generator()?;
        let styles = self.load_style_codes()?;
        let distances = genuine
            .par_iter()
            .map(|&i| fe.distance(&data[i].image, &g.synthesize(&styles[i])?))
            .collect::<Result<Vec<_>>>()?;
        let (mean, half) = mean_ci95(&distances);
        out.push(ReconstructionSummary {
            projector: ProjectorKind::GanInversion.to_string(),
            n,
            mean,
            ci_low: mean - half,
            ci_high: mean + half,
        });
        for kind in self.fitted_projectors() {
            let c = self.load(&self.projector_path(kind, seed), Stage::FitProjector)?;
            let projector: Box<dyn Projector> = match kind {
                ProjectorKind::Pca => Box::new(PcaModel::from_container(&c)?),
                _ => Box::new(VqModel::from_container(&c)?),
            };
            out.push(reconstruction_benchmark(&fe, projector.as_ref(), &images, n)?);
        }
        Ok(out)
    }

    fn channels(&self) -> Result<()> {
        let data = self.load_dataset()?;
        let styles = self.load_style_codes()?;
        let subset = channel_subset(&self.config, &data);
        let codes: Vec<Code> = subset.iter().map(|&i| Code::Style(styles[i].clone())).collect();
        let labels: Vec<Label> = subset.iter().map(|&i| data[i].label).collect();
        let sources: Vec<u64> = subset.iter().map(|&i| data[i].source_id).collect();
        let a = &self.config.analysis;
        let reports = channel_importance(
            &codes,
            &labels,
            &sources,
            a.channel_classifier,
            &a.seeds,
            &self.grid_options()?,
        )?;
        self.write_json("channels", reports)
    }

    fn ablate(&self) -> Result<()> {
        let data = self.load_dataset()?;
        let a = &self.config.analysis;
        let source = StoredCodes {
            run: self,
            kind: a.ablation_projector,
        };
        let result = training_size_ablation(
            &data,
            &a.ablation_sizes,
            &source,
            a.ablation_classifier,
            &a.seeds,
            &self.grid_options()?,
        )?;
        self.write_json("ablation", result)
    }

    pub fn collect_report(&self) -> Result<ExperimentReport> {
        let pi_m = self.config.decision.pi_m;
        Ok(ExperimentReport {
            config_hash: self.hash.clone(),
            benchmark: self.read_json("benchmark", Stage::Evaluate)?,
            ablation: self.read_json("ablation", Stage::AblateSize)?,
            channels: self.read_json::<Vec<ChannelReport>>("channels", Stage::ChannelImportance)?,
            reconstruction: self.read_json("reconstruction", Stage::Evaluate)?,
            decision: Some(DecisionSummary {
                pi_m,
                rule: calibrate_threshold(&Priors::new(pi_m)?),
            }),
        })
    }

    fn report(&self) -> Result<()> {
        let report = self.collect_report()?;
        let paths = emit_report(&self.report_dir(), &report, &self.config.analysis.formats)?;
        info!("wrote {} report files", paths.len());
        Ok(())
    }
}

/// Genuine images `0..n` followed by fakes `0..n`, as configured.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Vec<LabeledImage>> {
    let g = GeneratorModel::new(cfg.generator)?;
    let d = &cfg.dataset;
    let mut data = generate_genuine_with(&g, d.n_per_class, &d.perturbation, d.seed)?;
    data.extend(generate_fake_with(
        &g,
        d.n_per_class,
        &d.forgeries,
        &d.perturbation,
        d.seed,
    )?);
    Ok(data)
}

/// Inverts every image with the configured objective. Encoder initialisation
/// trains the encoder first and returns it.
pub fn invert_all(
    cfg: &ExperimentConfig,
    g: &GeneratorModel,
    data: &[LabeledImage],
) -> Result<(Vec<InversionResult>, Option<EncoderModel>)> {
    let fe = FeatureExtractor::new(DEFAULT_SEED);
    let inv = cfg.inversion;
    let encoder = match inv.init {
        InitKind::Encoder => Some(train_encoder(g, &cfg.encoder)?),
        _ => None,
    };
    let inverter = Inverter::new(g, &fe, inv.alpha)?;
    let results = data
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            inverter
                .invert(&d.image, &inv, encoder.as_ref())
                .map_err(|e| e.context(format!("inverting image {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((results, encoder))
}

/// Indices entering the channel study: everything, or the fakes of the
/// selected method together with the genuines sharing their source ids.
pub fn channel_subset(cfg: &ExperimentConfig, data: &[LabeledImage]) -> Vec<usize> {
    let Some(method) = cfg.analysis.channel_forgery.method() else {
        return (0..data.len()).collect();
    };
    let d = &cfg.dataset;
    let tags: Vec<String> = d
        .forgeries
        .iter()
        .filter(|f| f.method == method)
        .map(|f| fake_params_hash(f, &d.perturbation))
        .collect();
    let sources: std::collections::BTreeSet<u64> = data
        .iter()
        .filter(|x| x.label == Label::Fake && tags.contains(&x.params_hash))
        .map(|x| x.source_id)
        .collect();
    (0..data.len())
        .filter(|&i| {
            let x = &data[i];
            sources.contains(&x.source_id) && (x.label == Label::Genuine || tags.contains(&x.params_hash))
        })
        .collect()
}

/// Codes read back from the run directory.
struct StoredCodes<'a> {
    run: &'a Run,
    kind: ProjectorKind,
}

impl CodeSource for StoredCodes<'_> {
    fn kind(&self) -> ProjectorKind {
        self.kind
    }

    fn codes(&self, data: &[LabeledImage], _train: &[usize], seed: u64) -> Result<Vec<Vec<f64>>> {
        let codes = self.run.load_codes(self.kind, seed)?;
        if codes.len() != data.len() {
            return Err(Error::invalid("stored codes do not match the dataset"));
        }
        Ok(codes)
    }
}
