//! Code classifiers mapping a flattened code to a fake probability.

pub mod dense;
pub mod forest;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::tensor::Tensor;
use crate::world::Label;

pub use dense::{DenseNet, TrainHistory, MLP2_HIDDEN, MLP5_HIDDEN};
pub use forest::{RandomForestModel, Tree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Rf,
    Lr,
    Mlp2,
    Mlp5,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 4] = [Self::Rf, Self::Lr, Self::Mlp2, Self::Mlp5];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rf => "rf",
            Self::Lr => "lr",
            Self::Mlp2 => "mlp2",
            Self::Mlp5 => "mlp5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown classifier `{s}`")))
    }

    pub fn hidden(self) -> &'static [usize] {
        match self {
            Self::Mlp2 => &MLP2_HIDDEN,
            Self::Mlp5 => &MLP5_HIDDEN,
            Self::Rf | Self::Lr => &[],
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    pub validation_fraction: f64,
    pub n_estimators: usize,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            patience: 20,
            validation_fraction: 0.1,
            n_estimators: 200,
            standardize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if !(self.learning_rate > 0.0) {
            return Err(("learning_rate".into(), "must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(("momentum".into(), "must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(("batch_size".into(), "must be positive".into()));
        }
        if self.n_estimators == 0 {
            return Err(("n_estimators".into(), "must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(("validation_fraction".into(), "must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Constant features keep scale 1.
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    /// Zero-weight model.
    pub fn zero(d: usize) -> Self {
        Self {
            weights: vec![0.0; d],
            bias: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpModel {
    pub net: DenseNet,
}

impl MlpModel {
    pub fn hidden(&self) -> &[usize] {
        &self.net.hidden
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    RandomForest(RandomForestModel),
    Logistic(LogisticModel),
    Mlp(MlpModel),
}

/// A fitted model together with the feature standardisation it was fit on.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub kind: ClassifierKind,
    pub input_dim: usize,
    pub standardizer: Standardizer,
    pub model: Model,
    pub history: Option<TrainHistory>,
}

fn check_training_set(codes: &[Vec<f64>], labels: &[Label]) -> Result<Vec<bool>> {
    if codes.len() != labels.len() {
        return Err(Error::invalid("codes and labels differ in length"));
    }
    if codes.len() < 2 {
        return Err(Error::invalid("training needs at least two samples"));
    }
    let d = codes[0].len();
    if d == 0 || codes.iter().any(|c| c.len() != d) {
        return Err(Error::invalid("codes must share one positive length"));
    }
    if codes.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("codes contain non-finite values"));
    }
    let y: Vec<bool> = labels.iter().map(|l| l.is_fake()).collect();
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::invalid("training data must contain both classes"));
    }
    Ok(y)
}

pub fn train_random_forest(codes: &[Vec<f64>], labels: &[Label], cfg: &TrainConfig) -> Result<Classifier> {
    train(ClassifierKind::Rf, codes, labels, cfg)
}

pub fn train_logistic(codes: &[Vec<f64>], labels: &[Label], cfg: &TrainConfig) -> Result<Classifier> {
    train(ClassifierKind::Lr, codes, labels, cfg)
}

/// `kind` must be [`ClassifierKind::Mlp2`] or [`ClassifierKind::Mlp5`].
pub fn train_mlp(codes: &[Vec<f64>], labels: &[Label], kind: ClassifierKind, cfg: &TrainConfig) -> Result<Classifier> {
    if !matches!(kind, ClassifierKind::Mlp2 | ClassifierKind::Mlp5) {
        return Err(Error::invalid(format!("`{kind}` is not an MLP architecture")));
    }
    train(kind, codes, labels, cfg)
}

pub fn train(kind: ClassifierKind, codes: &[Vec<f64>], labels: &[Label], cfg: &TrainConfig) -> Result<Classifier> {
    cfg.validate().map_err(|(key, message)| Error::Config {
        key: format!("classifier.{key}"),
        message,
    })?;
    let y = check_training_set(codes, labels)?;
    let d = codes[0].len();
    let standardizer = if cfg.standardize {
        Standardizer::fit(codes)
    } else {
        Standardizer::identity(d)
    };
    let x: Vec<Vec<f64>> = codes.iter().map(|c| standardizer.apply(c)).collect();
    let (model, history) = match kind {
        ClassifierKind::Rf => (
            Model::RandomForest(forest::fit_forest(&x, &y, cfg.n_estimators, cfg.seed)),
            None,
        ),
        ClassifierKind::Lr => {
            let mut net = DenseNet::init(d, &[], cfg.seed, true);
            let h = dense::train_sgd(&mut net, &x, &y, cfg)?;
            let w = net.params.require("w0")?.data().to_vec();
            let b = net.params.require("b0")?.data()[0];
            (Model::Logistic(LogisticModel { weights: w, bias: b }), Some(h))
        }
        ClassifierKind::Mlp2 | ClassifierKind::Mlp5 => {
            let mut net = DenseNet::init(d, kind.hidden(), cfg.seed, false);
            let h = dense::train_sgd(&mut net, &x, &y, cfg)?;
            (Model::Mlp(MlpModel { net }), Some(h))
        }
    };
    Ok(Classifier {
        kind,
        input_dim: d,
        standardizer,
        model,
        history,
    })
}

impl Classifier {
    fn check_dim(&self, code: &[f64]) -> Result<()> {
        if code.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "classifier expects codes of length {}, got {}",
                self.input_dim,
                code.len()
            )));
        }
        Ok(())
    }

    /// Probability that `code` is fake.
    pub fn predict_score(&self, code: &[f64]) -> Result<f64> {
        Ok(self.predict_scores(std::slice::from_ref(&code.to_vec()))?[0])
    }

    pub fn predict_scores(&self, codes: &[Vec<f64>]) -> Result<Vec<f64>> {
        for c in codes {
            self.check_dim(c)?;
        }
        let x: Vec<Vec<f64>> = codes.iter().map(|c| self.standardizer.apply(c)).collect();
        Ok(match &self.model {
            Model::RandomForest(f) => x.iter().map(|v| f.score(v)).collect(),
            Model::Logistic(l) => x.iter().map(|v| l.score(v)).collect(),
            Model::Mlp(m) => {
                if x.is_empty() {
                    return Ok(Vec::new());
                }
                let t = Tensor::new(vec![x.len(), self.input_dim], x.concat())?;
                m.net.logits(&t)?.into_iter().map(sigmoid).collect()
            }
        })
    }

    /// Decides fake when the score strictly exceeds `threshold`.
    pub fn predict_labels(&self, codes: &[Vec<f64>], threshold: f64) -> Result<Vec<Label>> {
        Ok(self
            .predict_scores(codes)?
            .into_iter()
            .map(|s| if s > threshold { Label::Fake } else { Label::Genuine })
            .collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "classifier");
        c.set_meta("model", self.kind.as_str());
        c.set_meta("input_dim", &self.input_dim.to_string());
        c.push("std.mean", Tensor::from_vec(self.standardizer.mean.clone()));
        c.push("std.scale", Tensor::from_vec(self.standardizer.scale.clone()));
        match &self.model {
            Model::RandomForest(f) => {
                let lens = f.trees.iter().map(|t| t.len() as f64).collect();
                let cat = |sel: &dyn Fn(&Tree) -> Vec<f64>| Tensor::from_vec(f.trees.iter().flat_map(sel).collect());
                c.push("rf.tree_len", Tensor::from_vec(lens));
                c.push("rf.feature", cat(&|t| t.feature.iter().map(|&v| v as f64).collect()));
                c.push("rf.threshold", cat(&|t| t.threshold.clone()));
                c.push("rf.left", cat(&|t| t.left.iter().map(|&v| v as f64).collect()));
                c.push("rf.right", cat(&|t| t.right.iter().map(|&v| v as f64).collect()));
                c.push("rf.count_genuine", cat(&|t| t.counts.iter().map(|v| v[0]).collect()));
                c.push("rf.count_fake", cat(&|t| t.counts.iter().map(|v| v[1]).collect()));
            }
            Model::Logistic(l) => {
                c.push("lr.weights", Tensor::from_vec(l.weights.clone()));
                c.push("lr.bias", Tensor::scalar(l.bias));
            }
            Model::Mlp(m) => c.push_params("mlp.", &m.net.params),
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.require_meta("kind")? != "classifier" {
            return Err(Error::Container("not a classifier container".into()));
        }
        let kind = ClassifierKind::parse(c.require_meta("model")?)?;
        let input_dim: usize = c
            .require_meta("input_dim")?
            .parse()
            .map_err(|_| Error::Container("bad input_dim".into()))?;
        let standardizer = Standardizer {
            mean: c.require("std.mean")?.data().to_vec(),
            scale: c.require("std.scale")?.data().to_vec(),
        };
        let model = match kind {
            ClassifierKind::Rf => {
                let get = |k: &str| c.require(k).map(|t| t.data().to_vec());
                let (feature, threshold, left, right) = (
                    get("rf.feature")?,
                    get("rf.threshold")?,
                    get("rf.left")?,
                    get("rf.right")?,
                );
                let (cg, cf) = (get("rf.count_genuine")?, get("rf.count_fake")?);
                let mut trees = Vec::new();
                let mut at = 0usize;
                for len in get("rf.tree_len")? {
                    let r = at..at + len as usize;
                    trees.push(Tree {
                        feature: feature[r.clone()].iter().map(|&v| v as i64).collect(),
                        threshold: threshold[r.clone()].to_vec(),
                        left: left[r.clone()].iter().map(|&v| v as i64).collect(),
                        right: right[r.clone()].iter().map(|&v| v as i64).collect(),
                        counts: cg[r.clone()].iter().zip(&cf[r]).map(|(&g, &f)| [g, f]).collect(),
                    });
                    at += len as usize;
                }
                Model::RandomForest(RandomForestModel { trees, input_dim })
            }
            ClassifierKind::Lr => Model::Logistic(LogisticModel {
                weights: c.require("lr.weights")?.data().to_vec(),
                bias: c.require("lr.bias")?.item(),
            }),
            ClassifierKind::Mlp2 | ClassifierKind::Mlp5 => Model::Mlp(MlpModel {
                net: DenseNet::from_params(input_dim, kind.hidden().to_vec(), c.params("mlp.")),
            }),
        };
        Ok(Self {
            kind,
            input_dim,
            standardizer,
            model,
            history: None,
        })
    }
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predicted: &[Label], truth: &[Label]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}
