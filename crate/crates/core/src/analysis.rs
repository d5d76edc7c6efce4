//! Experiment harness: projector x classifier accuracy grids, training-size
//! ablation, per-channel importance and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{self, ClassifierKind, TrainConfig};
use crate::decision::{calibrate_threshold, DecisionRule, Priors};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::perceptual::{summaries_to_csv, ReconstructionSummary};
use crate::projectors::{pca_fit_incremental, vq_train, Code, Projector, ProjectorKind, VqConfig};
use crate::rng;
use crate::world::{split_indices, Label, LabeledImage};

pub const CSV_HEADER: &str = "projector,classifier,train_size,seed,accuracy,tp,fp,tn,fn";

/// Confusion counts with fake as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(predicted: &[Label], truth: &[Label]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::invalid("prediction and truth lengths differ"));
        }
        let mut c = Confusion::default();
        for (p, t) in predicted.iter().zip(truth) {
            match (p.is_fake(), t.is_fake()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub projector: ProjectorKind,
    pub classifier: ClassifierKind,
    pub train_size: usize,
    pub seed: u64,
    pub accuracy: f64,
    #[serde(flatten)]
    pub confusion: Confusion,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkResult {
    /// Median accuracy over the rows accepted by `keep`; `None` when no row matches.
    pub fn median_where(&self, keep: impl Fn(&BenchmarkRow) -> bool) -> Option<f64> {
        median(
            &self
                .rows
                .iter()
                .filter(|r| keep(r))
                .map(|r| r.accuracy)
                .collect::<Vec<_>>(),
        )
    }

    pub fn median_accuracy(&self, projector: ProjectorKind, classifier: ClassifierKind) -> Option<f64> {
        self.median_where(|r| r.projector == projector && r.classifier == classifier)
    }

    /// Distinct `(projector, classifier)` pairs in first-seen order.
    pub fn cells(&self) -> Vec<(ProjectorKind, ClassifierKind)> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&(r.projector, r.classifier)) {
                seen.push((r.projector, r.classifier));
            }
        }
        seen
    }
}

/// Per-channel test accuracies of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub classifier: ClassifierKind,
    pub seed: u64,
    pub accuracies: Vec<f64>,
    /// Accuracy of the same classifier on the whole code.
    pub full_accuracy: f64,
}

/// Median of each channel's accuracy across reports.
pub fn median_channel_accuracies(reports: &[ChannelReport]) -> Vec<f64> {
    let c = reports.first().map_or(0, |r| r.accuracies.len());
    (0..c)
        .map(|k| median(&reports.iter().map(|r| r.accuracies[k]).collect::<Vec<_>>()).unwrap_or(f64::NAN))
        .collect()
}

/// Median of the values; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Supplies classifier features for every image of a dataset, given the
/// training indices of one split.
pub trait CodeSource: Sync {
    fn kind(&self) -> ProjectorKind;
    fn codes(&self, data: &[LabeledImage], train: &[usize], seed: u64) -> Result<Vec<Vec<f64>>>;
}

/// Codes computed once for the whole dataset, such as generator inversions.
#[derive(Clone, Debug)]
pub struct FixedCodes {
    pub kind: ProjectorKind,
    pub codes: Vec<Vec<f64>>,
}

impl CodeSource for FixedCodes {
    fn kind(&self) -> ProjectorKind {
        self.kind
    }

    fn codes(&self, data: &[LabeledImage], _train: &[usize], _seed: u64) -> Result<Vec<Vec<f64>>> {
        if self.codes.len() != data.len() {
            return Err(Error::invalid(format!(
                "{} codes for {} images",
                self.codes.len(),
                data.len()
            )));
        }
        Ok(self.codes.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PcaSource {
    pub n_components: usize,
    pub batch_size: usize,
}

impl CodeSource for PcaSource {
    fn kind(&self) -> ProjectorKind {
        ProjectorKind::Pca
    }

    fn codes(&self, data: &[LabeledImage], train: &[usize], _seed: u64) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<Vec<f64>> = train.iter().map(|&i| data[i].image.data().to_vec()).collect();
        let model = pca_fit_incremental(rows.chunks(self.batch_size.max(1)), self.n_components)?;
        data.par_iter().map(|d| model.transform(d.image.data())).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VqSource {
    pub config: VqConfig,
}

impl CodeSource for VqSource {
    fn kind(&self) -> ProjectorKind {
        ProjectorKind::Vq
    }

    fn codes(&self, data: &[LabeledImage], train: &[usize], seed: u64) -> Result<Vec<Vec<f64>>> {
        let images: Vec<Image> = train.iter().map(|&i| data[i].image.clone()).collect();
        let model = vq_train(&images, &VqConfig { seed, ..self.config })?;
        data.par_iter()
            .map(|d| Ok(model.project(&d.image)?.features()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GridOptions {
    pub train: TrainConfig,
    pub priors: Priors,
    pub train_fraction: f64,
}

impl GridOptions {
    pub fn rule(&self) -> DecisionRule {
        calibrate_threshold(&self.priors)
    }
}

fn gather<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Trains one classifier on `train` and scores it on `test` at the rule's threshold.
pub fn evaluate_cell(
    codes: &[Vec<f64>],
    labels: &[Label],
    train: &[usize],
    test: &[usize],
    kind: ClassifierKind,
    cfg: &TrainConfig,
    rule: &DecisionRule,
) -> Result<Confusion> {
    let model = classifiers::train(kind, &gather(codes, train), &gather(labels, train), cfg)?;
    let scores = model.predict_scores(&gather(codes, test))?;
    let predicted: Vec<Label> = scores.iter().map(|&s| rule.decide(s)).collect();
    Confusion::from_labels(&predicted, &gather(labels, test))
}

fn sources_and_labels(data: &[LabeledImage]) -> (Vec<u64>, Vec<Label>) {
    (
        data.iter().map(|d| d.source_id).collect(),
        data.iter().map(|d| d.label).collect(),
    )
}

fn require_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        Err(Error::invalid("at least one seed is required"))
    } else {
        Ok(())
    }
}

/// Every `(projector, classifier, seed)` cell: fit the projector on the
/// training split, encode both splits, train, and score the test split.
/// Rows come out ordered by seed, then projector, then classifier.
pub fn benchmark_grid(
    data: &[LabeledImage],
    projectors: &[&dyn CodeSource],
    classifiers: &[ClassifierKind],
    seeds: &[u64],
    opts: &GridOptions,
) -> Result<BenchmarkResult> {
    require_seeds(seeds)?;
    let (sources, labels) = sources_and_labels(data);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = seeds
        .iter()
        .map(|&s| split_indices(&sources, opts.train_fraction, s))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..projectors.len()).map(move |p| (s, p)))
        .collect();
    let encoded: Vec<Vec<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(s, p)| {
            projectors[p].codes(data, &splits[s].0, seeds[s]).map_err(|e| {
                e.context(format!(
                    "fitting {} projector (seed {})",
                    projectors[p].kind(),
                    seeds[s]
                ))
            })
        })
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..jobs.len())
        .flat_map(|j| (0..classifiers.len()).map(move |c| (j, c)))
        .collect();
    let rule = opts.rule();
    let rows = cells
        .par_iter()
        .map(|&(j, c)| {
            let (s, p) = jobs[j];
            let (train, test) = &splits[s];
            let cfg = TrainConfig {
                seed: seeds[s],
                ..opts.train
            };
            let confusion =
                evaluate_cell(&encoded[j], &labels, train, test, classifiers[c], &cfg, &rule).map_err(|e| {
                    e.context(format!(
                        "{} on {} codes (seed {})",
                        classifiers[c],
                        projectors[p].kind(),
                        seeds[s]
                    ))
                })?;
            Ok(BenchmarkRow {
                projector: projectors[p].kind(),
                classifier: classifiers[c],
                train_size: train.len(),
                seed: seeds[s],
                accuracy: confusion.accuracy(),
                confusion,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BenchmarkResult { rows })
}

/// The first `size` training images when sources are visited in a shuffled
/// order, returned in ascending index order. The full size returns `train`.
pub fn subsample_sources(train: &[usize], source_ids: &[u64], size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > train.len() {
        return Err(Error::invalid(format!(
            "training size {size} exceeds the {} available training images",
            train.len()
        )));
    }
    let mut ids: Vec<u64> = train
        .iter()
        .map(|&i| source_ids[i])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut rng::rng(rng::derive(seed, "ablation", size as u64)));
    let rank: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(k, &s)| (s, k)).collect();
    let mut order = train.to_vec();
    order.sort_by_key(|&i| (rank[&source_ids[i]], i));
    let mut keep = order[..size].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// One row per `(size, seed)`; the projector sees the whole training split and
/// only the classifier's training set shrinks.
pub fn training_size_ablation(
    data: &[LabeledImage],
    sizes: &[usize],
    projector: &dyn CodeSource,
    classifier: ClassifierKind,
    seeds: &[u64],
    opts: &GridOptions,
) -> Result<BenchmarkResult> {
    require_seeds(seeds)?;
    let (sources, labels) = sources_and_labels(data);
    let rule = opts.rule();
    let mut rows = Vec::new();
    for &seed in seeds {
        let (train, test) = split_indices(&sources, opts.train_fraction, seed)?;
        if let Some(&too_big) = sizes.iter().find(|&&s| s > train.len()) {
            return Err(Error::invalid(format!(
                "training size {too_big} exceeds the {} available training images",
                train.len()
            )));
        }
        let codes = projector
            .codes(data, &train, seed)
            .map_err(|e| e.context(format!("fitting {} projector (seed {seed})", projector.kind())))?;
        let per_size: Vec<BenchmarkRow> = sizes
            .par_iter()
            .map(|&size| {
                let subset = subsample_sources(&train, &sources, size, seed)?;
                let cfg = TrainConfig { seed, ..opts.train };
                let confusion = evaluate_cell(&codes, &labels, &subset, &test, classifier, &cfg, &rule)
                    .map_err(|e| e.context(format!("training size {size} (seed {seed})")))?;
                Ok(BenchmarkRow {
                    projector: projector.kind(),
                    classifier,
                    train_size: size,
                    seed,
                    accuracy: confusion.accuracy(),
                    confusion,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(per_size);
    }
    Ok(BenchmarkResult { rows })
}

/// Trains a fresh classifier on each channel slice of the style codes and on
/// the whole code, once per seed.
pub fn channel_importance(
    codes: &[Code],
    labels: &[Label],
    source_ids: &[u64],
    classifier: ClassifierKind,
    seeds: &[u64],
    opts: &GridOptions,
) -> Result<Vec<ChannelReport>> {
    require_seeds(seeds)?;
    if codes.len() != labels.len() || codes.len() != source_ids.len() {
        return Err(Error::invalid("codes, labels and source ids must have equal lengths"));
    }
    let styles = codes
        .iter()
        .map(|c| match c {
            Code::Style(s) => Ok(s),
            other => Err(Error::invalid(format!(
                "channel importance needs generator style codes, got code shape {:?}",
                other.shape()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = styles.first() else {
        return Err(Error::invalid("channel importance needs at least one code"));
    };
    let (channels, dim) = (first.channels(), first.dim());
    if styles.iter().any(|s| s.channels() != channels || s.dim() != dim) {
        return Err(Error::invalid("style codes differ in shape"));
    }
    let full: Vec<Vec<f64>> = styles.iter().map(|s| s.tensor().data().to_vec()).collect();
    let slices: Vec<Vec<Vec<f64>>> = (0..channels)
        .map(|c| styles.iter().map(|s| s.row(c).to_vec()).collect())
        .collect();
    let rule = opts.rule();
    seeds
        .iter()
        .map(|&seed| {
            let (train, test) = split_indices(source_ids, opts.train_fraction, seed)?;
            let cfg = TrainConfig { seed, ..opts.train };
            let run =
                |x: &[Vec<f64>]| evaluate_cell(x, labels, &train, &test, classifier, &cfg, &rule).map(|c| c.accuracy());
            let accuracies = slices.par_iter().map(|x| run(x)).collect::<Result<Vec<_>>>()?;
            Ok(ChannelReport {
                classifier,
                seed,
                accuracies,
                full_accuracy: run(&full)?,
            })
        })
        .collect()
}

/// Reconstruction distances for each projector over the first `n` images.
pub fn reconstruction_report(
    extractor: &crate::perceptual::FeatureExtractor,
    projectors: &[&dyn Projector],
    images: &[Image],
    n: usize,
) -> Result<Vec<ReconstructionSummary>> {
    projectors
        .iter()
        .map(|p| crate::perceptual::reconstruction_benchmark(extractor, *p, images, n))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Plotdata,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" => Ok(Self::Markdown),
            "plotdata" => Ok(Self::Plotdata),
            other => Err(Error::invalid(format!(
                "unknown report format `{other}` (expected csv, markdown or plotdata)"
            ))),
        }
    }
}

/// Everything a finished run reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub benchmark: BenchmarkResult,
    pub ablation: BenchmarkResult,
    pub channels: Vec<ChannelReport>,
    pub reconstruction: Vec<ReconstructionSummary>,
    pub decision: Option<DecisionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub pi_m: f64,
    pub rule: DecisionRule,
}

impl ExperimentReport {
    fn is_empty(&self) -> bool {
        self.benchmark.rows.is_empty()
            && self.ablation.rows.is_empty()
            && self.channels.is_empty()
            && self.reconstruction.is_empty()
    }
}

pub fn benchmark_csv(result: &BenchmarkResult) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in &result.rows {
        let c = r.confusion;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.projector, r.classifier, r.train_size, r.seed, r.accuracy, c.tp, c.fp, c.tn, c.fn_
        );
    }
    out
}

pub fn channels_csv(reports: &[ChannelReport]) -> String {
    let mut out = String::from("classifier,seed,channel,accuracy\n");
    for r in reports {
        for (c, a) in r.accuracies.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c},{a}", r.classifier, r.seed);
        }
        let _ = writeln!(out, "{},{},full,{}", r.classifier, r.seed, r.full_accuracy);
    }
    out
}

/// Markdown table with one line per row after the header and rule lines.
pub fn benchmark_markdown(result: &BenchmarkResult) -> String {
    let mut out = String::from("| projector | classifier | train_size | seed | accuracy | tp | fp | tn | fn |\n");
    out.push_str("|---|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in &result.rows {
        let c = r.confusion;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.4} | {} | {} | {} | {} |",
            r.projector, r.classifier, r.train_size, r.seed, r.accuracy, c.tp, c.fp, c.tn, c.fn_
        );
    }
    out
}

fn markdown(report: &ExperimentReport) -> String {
    let mut out = format!("# Experiment report\n\nconfig hash `{}`\n", report.config_hash);
    if let Some(d) = &report.decision {
        let _ = writeln!(
            out,
            "\nDecision: fake iff score > {} (pi_m = {}).",
            d.rule.threshold, d.pi_m
        );
    }
    if !report.benchmark.rows.is_empty() {
        out.push_str(
            "\n## Median accuracy over seeds\n\n| projector | classifier | median accuracy |\n|---|---|---:|\n",
        );
        for (p, c) in report.benchmark.cells() {
            let m = report.benchmark.median_accuracy(p, c).unwrap_or(f64::NAN);
            let _ = writeln!(out, "| {p} | {c} | {m:.4} |");
        }
        out.push_str("\n## Benchmark\n\n");
        out.push_str(&benchmark_markdown(&report.benchmark));
    }
    if !report.ablation.rows.is_empty() {
        out.push_str("\n## Training-size ablation\n\n");
        out.push_str(&benchmark_markdown(&report.ablation));
    }
    if !report.channels.is_empty() {
        let medians = median_channel_accuracies(&report.channels);
        out.push_str("\n## Channel importance (median over seeds)\n\n| channel | accuracy |\n|---:|---:|\n");
        for (c, a) in medians.iter().enumerate() {
            let _ = writeln!(out, "| {c} | {a:.4} |");
        }
        let full = median(&report.channels.iter().map(|r| r.full_accuracy).collect::<Vec<_>>()).unwrap_or(f64::NAN);
        let _ = writeln!(out, "| full | {full:.4} |");
    }
    if !report.reconstruction.is_empty() {
        out.push_str("\n## Reconstruction distance\n\n| projector | n | mean | 95% CI |\n|---|---:|---:|---|\n");
        for r in &report.reconstruction {
            let _ = writeln!(
                out,
                "| {} | {} | {:.5} | [{:.5}, {:.5}] |",
                r.projector, r.n, r.mean, r.ci_low, r.ci_high
            );
        }
    }
    out
}

#[derive(Serialize)]
struct Series {
    label: String,
    x: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Serialize)]
struct Figure {
    name: &'static str,
    x_label: &'static str,
    y_label: &'static str,
    series: Vec<Series>,
}

fn plotdata(report: &ExperimentReport) -> Result<String> {
    let mut figures = Vec::new();
    if !report.benchmark.rows.is_empty() {
        let series = report
            .benchmark
            .cells()
            .into_iter()
            .map(|(p, c)| {
                let rows: Vec<_> = report
                    .benchmark
                    .rows
                    .iter()
                    .filter(|r| r.projector == p && r.classifier == c)
                    .collect();
                Series {
                    label: format!("{p} {c}"),
                    x: rows.iter().map(|r| r.seed as f64).collect(),
                    y: rows.iter().map(|r| r.accuracy).collect(),
                }
            })
            .collect();
        figures.push(Figure {
            name: "benchmark",
            x_label: "seed",
            y_label: "accuracy",
            series,
        });
    }
    if !report.ablation.rows.is_empty() {
        let seeds: BTreeSet<u64> = report.ablation.rows.iter().map(|r| r.seed).collect();
        let series = seeds
            .into_iter()
            .map(|s| {
                let rows: Vec<_> = report.ablation.rows.iter().filter(|r| r.seed == s).collect();
                Series {
                    label: format!("seed {s}"),
                    x: rows.iter().map(|r| r.train_size as f64).collect(),
                    y: rows.iter().map(|r| r.accuracy).collect(),
                }
            })
            .collect();
        figures.push(Figure {
            name: "training_size",
            x_label: "training images",
            y_label: "accuracy",
            series,
        });
    }
    if !report.channels.is_empty() {
        let series = report
            .channels
            .iter()
            .map(|r| Series {
                label: format!("{} seed {}", r.classifier, r.seed),
                x: (0..r.accuracies.len()).map(|c| c as f64).collect(),
                y: r.accuracies.clone(),
            })
            .collect();
        figures.push(Figure {
            name: "channel_importance",
            x_label: "channel",
            y_label: "accuracy",
            series,
        });
    }
    if !report.reconstruction.is_empty() {
        let series = report
            .reconstruction
            .iter()
            .enumerate()
            .map(|(k, r)| Series {
                label: r.projector.clone(),
                x: vec![k as f64; 3],
                y: vec![r.ci_low, r.mean, r.ci_high],
            })
            .collect();
        figures.push(Figure {
            name: "reconstruction",
            x_label: "projector",
            y_label: "perceptual distance",
            series,
        });
    }
    let doc = serde_json::json!({ "config_hash": report.config_hash, "figures": figures });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// File name and contents of each output for one format.
pub fn render(report: &ExperimentReport, format: ReportFormat) -> Result<Vec<(String, String)>> {
    if report.is_empty() {
        return Err(Error::invalid("nothing to report"));
    }
    Ok(match format {
        ReportFormat::Csv => {
            let mut files = Vec::new();
            if !report.benchmark.rows.is_empty() {
                files.push(("benchmark.csv".into(), benchmark_csv(&report.benchmark)));
            }
            if !report.ablation.rows.is_empty() {
                files.push(("ablation.csv".into(), benchmark_csv(&report.ablation)));
            }
            if !report.channels.is_empty() {
                files.push(("channels.csv".into(), channels_csv(&report.channels)));
            }
            if !report.reconstruction.is_empty() {
                files.push(("reconstruction.csv".into(), summaries_to_csv(&report.reconstruction)));
            }
            files
        }
        ReportFormat::Markdown => vec![("report.md".into(), markdown(report))],
        ReportFormat::Plotdata => vec![("plotdata.json".into(), plotdata(report)?)],
    })
}

/// Writes every rendered file under `dir` and returns their paths.
pub fn emit_report(dir: &Path, report: &ExperimentReport, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for &f in formats {
        for (name, body) in render(report, f)? {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: ProjectorKind, c: ClassifierKind, seed: u64, acc_tp: usize) -> BenchmarkRow {
        let confusion = Confusion {
            tp: acc_tp,
            fp: 10 - acc_tp,
            tn: 5,
            fn_: 5,
        };
        BenchmarkRow {
            projector: p,
            classifier: c,
            train_size: 40,
            seed,
            accuracy: confusion.accuracy(),
            confusion,
        }
    }

    fn sample_report() -> ExperimentReport {
        ExperimentReport {
            config_hash: "abc".into(),
            benchmark: BenchmarkResult {
                rows: vec![
                    row(ProjectorKind::Pca, ClassifierKind::Rf, 0, 7),
                    row(ProjectorKind::Pca, ClassifierKind::Rf, 1, 9),
                    row(ProjectorKind::Vq, ClassifierKind::Lr, 0, 3),
                ],
            },
            channels: vec![ChannelReport {
                classifier: ClassifierKind::Rf,
                seed: 0,
                accuracies: vec![0.5, 0.9, 0.6],
                full_accuracy: 0.9,
            }],
            ..Default::default()
        }
    }

    #[test]
    fn confusion_counts() {
        use Label::*;
        let c = Confusion::from_labels(
            &[Fake, Fake, Genuine, Genuine, Fake],
            &[Fake, Genuine, Genuine, Fake, Fake],
        )
        .unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 2,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!(c.accuracy(), 0.6);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn csv_schema_and_rows() {
        let csv = benchmark_csv(&sample_report().benchmark);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "projector,classifier,train_size,seed,accuracy,tp,fp,tn,fn");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "pca,rf,40,0,0.6,7,3,5,5");
    }

    #[test]
    fn markdown_table_has_row_per_result_plus_header() {
        let md = benchmark_markdown(&sample_report().benchmark);
        let table: Vec<&str> = md
            .lines()
            .filter(|l| l.starts_with('|') && !l.starts_with("|---"))
            .collect();
        assert_eq!(table.len(), 3 + 1);
    }

    #[test]
    fn plotdata_channel_series_has_one_point_per_channel() {
        let json = render(&sample_report(), ReportFormat::Plotdata).unwrap().remove(0).1;
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let fig = v["figures"]
            .as_array()
            .unwrap()
            .iter()
            .find(|f| f["name"] == "channel_importance")
            .unwrap();
        assert_eq!(fig["series"][0]["x"].as_array().unwrap().len(), 3);
        assert_eq!(fig["series"][0]["y"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn rendering_is_deterministic_and_rejects_bad_input() {
        let r = sample_report();
        for f in [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Plotdata] {
            assert_eq!(render(&r, f).unwrap(), render(&r, f).unwrap());
        }
        assert!(render(&ExperimentReport::default(), ReportFormat::Csv).is_err());
        assert!(ReportFormat::parse("pdf").is_err());
    }

    #[test]
    fn full_size_subsample_is_identity_and_oversize_fails() {
        let sources: Vec<u64> = (0..20).map(|i| i / 2).collect();
        let train: Vec<usize> = (0..14).collect();
        assert_eq!(subsample_sources(&train, &sources, 14, 3).unwrap(), train);
        assert!(subsample_sources(&train, &sources, 15, 3).is_err());
        let two = subsample_sources(&train, &sources, 2, 3).unwrap();
        assert_eq!(sources[two[0]], sources[two[1]]);
    }
}
