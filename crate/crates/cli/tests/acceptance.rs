//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use latent_forensics::analysis::{
    benchmark_grid, channel_importance, median, median_channel_accuracies, BenchmarkResult, CodeSource, FixedCodes,
    GridOptions, PcaSource, VqSource,
};
use latent_forensics::classifiers::ClassifierKind;
use latent_forensics::config::ExperimentConfig;
use latent_forensics::decision::{
    criterion_boundary, empirical_mean_error, fit_density_histogram_on, DecisionRule, Priors, Support,
};
use latent_forensics::generator::{GeneratorModel, StyleCode};
use latent_forensics::image::Image;
use latent_forensics::perceptual::{mean_ci95, reconstruction_benchmark, FeatureExtractor, DEFAULT_SEED};
use latent_forensics::pipeline::{build_dataset, channel_subset, invert_all};
use latent_forensics::projectors::{
    pca_fit_incremental, vq_train, Code, IdentityProjector, InversionConfig, InversionResult, Inverter, ProjectorKind,
    VqConfig,
};
use latent_forensics::rng;
use latent_forensics::world::{split_indices, ForgeryMethod, Label, LabeledImage};
use nalgebra::DMatrix;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Suite {
    results: Vec<(usize, &'static str, Outcome, f64)>,
}

impl Suite {
    fn run(&mut self, id: usize, name: &'static str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {id:>2} [{}] {name}: {} ({secs:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        self.results.push((id, name, o, secs));
    }
}

/// Desk benchmark built from the default config, shared by several criteria.
struct Desk {
    cfg: ExperimentConfig,
    generator: GeneratorModel,
    data: Vec<LabeledImage>,
    inversions: Vec<InversionResult>,
    build_secs: f64,
}

impl Desk {
    fn new() -> Self {
        let t = Instant::now();
        let cfg = ExperimentConfig::default();
        let generator = GeneratorModel::new(cfg.generator).unwrap();
        let data = build_dataset(&cfg).unwrap();
        let (inversions, _) = invert_all(&cfg, &generator, &data).unwrap();
        Self {
            cfg,
            generator,
            data,
            inversions,
            build_secs: t.elapsed().as_secs_f64(),
        }
    }

    fn sg_codes(&self) -> Vec<Vec<f64>> {
        self.inversions
            .iter()
            .map(|r| r.code.tensor().data().to_vec())
            .collect()
    }

    fn options(&self) -> GridOptions {
        GridOptions {
            train: self.cfg.classifiers.train,
            priors: Priors::new(self.cfg.decision.pi_m).unwrap(),
            train_fraction: self.cfg.dataset.train_fraction,
        }
    }

    /// Fakes `0, k, 2k, ...` use the forgery at position 0 of the list, and so on.
    fn fakes_of(&self, method: ForgeryMethod) -> Vec<usize> {
        let forgeries = &self.cfg.dataset.forgeries;
        (0..self.data.len())
            .filter(|&i| {
                let d = &self.data[i];
                d.label == Label::Fake && forgeries[d.source_id as usize % forgeries.len()].method == method
            })
            .collect()
    }
}

fn random_code(g: &GeneratorModel, seed: u64, label: &str, i: u64) -> StyleCode {
    g.map(&g.sample_z(rng::derive(seed, label, i))).unwrap()
}

fn criterion_gradients() -> Outcome {
    let g = GeneratorModel::new(Default::default()).unwrap();
    let fe = FeatureExtractor::new(DEFAULT_SEED);
    let inv = Inverter::new(&g, &fe, 1.0).unwrap();
    let target = g.synthesize(&random_code(&g, 1, "gradcheck.target", 0)).unwrap();
    let target = inv.target(&target).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let w = random_code(&g, 1, "gradcheck.code", i);
        let (_, analytic) = inv.loss_and_gradient(&target, &w).unwrap();
        let mut numeric = vec![0.0; w.tensor().len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let at = |delta: f64| {
                let mut t = w.tensor().clone();
                t.data_mut()[k] += delta;
                inv.loss(&target, &StyleCode::new(t).unwrap()).unwrap()
            };
            *slot = (at(h) - at(-h)) / (2.0 * h);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
            / scale;
        worst = worst.max(err);
    }
    outcome(worst < 1e-4, format!("worst relative error {worst:.2e} over 20 codes"))
}

/// Synthetic data with a decaying spectrum in a random basis.
fn pca_data(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::rng(seed);
    let basis = DMatrix::from_vec(d, d, rng::normal_vec(&mut r, d * d)).qr().q();
    let offset: Vec<f64> = rng::normal_vec(&mut r, d);
    (0..n)
        .map(|_| {
            let z = rng::normal_vec(&mut r, d);
            (0..d)
                .map(|j| {
                    offset[j]
                        + (0..d)
                            .map(|k| basis[(j, k)] * z[k] * 3.0 / (1.0 + k as f64))
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Top-k eigenvectors of the sample covariance, as columns, plus the mean.
fn pca_oracle(x: &[Vec<f64>], k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let cov = xc.transpose() * &xc / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    (DMatrix::from_fn(d, k, |i, j| eig.eigenvectors[(i, order[j])]), mean)
}

fn oracle_error(u: &DMatrix<f64>, mean: &[f64], x: &[Vec<f64>]) -> f64 {
    x.iter()
        .map(|r| {
            let c = DMatrix::from_fn(r.len(), 1, |i, _| r[i] - mean[i]);
            let proj = u * (u.transpose() * &c);
            (c - proj).norm_squared()
        })
        .sum::<f64>()
        / x.len() as f64
}

fn criterion_incremental_pca() -> Outcome {
    let (d, k) = (96, 8);
    let all = pca_data(900, d, 42);
    let (train, held) = all.split_at(600);
    let (oracle, mean) = pca_oracle(train, k);

    let single = pca_fit_incremental(std::iter::once(train), k).unwrap();
    let u = DMatrix::from_fn(d, k, |i, j| single.component(j)[i]);
    // sine of the largest principal angle
    let residual = &u - &oracle * (oracle.transpose() * &u);
    let sin_max = residual.singular_values().max();
    let angle = sin_max.min(1.0).asin();

    let multi = pca_fit_incremental(train.chunks(50), k).unwrap();
    let multi_err = held
        .iter()
        .map(|x| {
            let back = multi.inverse_transform(&multi.transform(x).unwrap()).unwrap();
            x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / held.len() as f64;
    let oracle_err = oracle_error(&oracle, &mean, held);
    let ratio = multi_err / oracle_err;
    outcome(
        angle < 1e-6 && (ratio - 1.0).abs() <= 0.05,
        format!("largest principal angle {angle:.2e} rad; held-out error ratio multi/oracle {ratio:.4}"),
    )
}

fn criterion_inversion_recovery() -> Outcome {
    let g = GeneratorModel::new(Default::default()).unwrap();
    let fe = FeatureExtractor::new(DEFAULT_SEED);
    let inv = Inverter::new(&g, &fe, 1.0).unwrap();
    let cfg = InversionConfig::default();
    let init_image = g.synthesize(inv.mean_code()).unwrap();
    use rayon::prelude::*;
    let ratios: Vec<f64> = (0..50u64)
        .into_par_iter()
        .map(|i| {
            let x = g.synthesize(&random_code(&g, 3, "recovery", i)).unwrap();
            let before = fe.distance(&x, &init_image).unwrap();
            let r = inv.invert(&x, &cfg, None).unwrap();
            let after = fe.distance(&x, &g.synthesize(&r.code).unwrap()).unwrap();
            before / after
        })
        .collect();
    let good = ratios.iter().filter(|&&q| q >= 10.0).count();
    let x = g.synthesize(&random_code(&g, 3, "recovery", 0)).unwrap();
    let zero = inv.invert(&x, &InversionConfig { steps: 0, ..cfg }, None).unwrap();
    let exact = zero.code == *inv.mean_code();
    outcome(
        good >= 45 && exact,
        format!(
            "{good}/50 reach a 10x reduction (median {:.1}x); zero steps returns the init exactly: {exact}",
            median(&ratios).unwrap()
        ),
    )
}

fn criterion_manifold(desk: &Desk) -> Outcome {
    let losses: Vec<f64> = desk.inversions.iter().map(|r| r.final_loss).collect();
    let genuine: Vec<f64> = (0..desk.data.len())
        .filter(|&i| desk.data[i].label == Label::Genuine)
        .map(|i| losses[i])
        .collect();
    let med = median(&genuine).unwrap();
    let spliced: Vec<usize> = desk.fakes_of(ForgeryMethod::Splice).into_iter().take(100).collect();
    let above = spliced.iter().filter(|&&i| losses[i] > med).count();
    outcome(
        spliced.len() == 100 && above >= 90,
        format!(
            "{above}/{} spliced fakes above the genuine median loss {med:.4}",
            spliced.len()
        ),
    )
}

fn medians(result: &BenchmarkResult) -> BTreeMap<String, f64> {
    result
        .cells()
        .into_iter()
        .map(|(p, c)| (format!("{p}/{c}"), result.median_accuracy(p, c).unwrap()))
        .collect()
}

fn criterion_projector_ordering(desk: &Desk, rf: &BenchmarkResult) -> Outcome {
    let m = |p| rf.median_accuracy(p, ClassifierKind::Rf).unwrap();
    let (sg, pca, vq) = (
        m(ProjectorKind::GanInversion),
        m(ProjectorKind::Pca),
        m(ProjectorKind::Vq),
    );
    let sizes: Vec<usize> = rf.rows.iter().map(|r| r.train_size + r.confusion.total()).collect();
    let split_ok = rf
        .rows
        .iter()
        .all(|r| r.train_size == 1000 && r.confusion.total() == 400);
    let secs = desk.build_secs + rf_secs();
    outcome(
        split_ok && sg - pca >= 0.02 && pca - vq >= 0.02 && secs < 900.0,
        format!(
            "median RF accuracy SG {sg:.4} > PCA {pca:.4} > VQ {vq:.4}; 1000/400 split on every row: {split_ok} ({} images); benchmark wall time {secs:.0}s",
            sizes[0]
        ),
    )
}

static RF_SECS: std::sync::OnceLock<f64> = std::sync::OnceLock::new();

fn rf_secs() -> f64 {
    *RF_SECS.get().unwrap_or(&0.0)
}

fn criterion_family(rf: &BenchmarkResult, family: &BenchmarkResult) -> Outcome {
    let sg = ProjectorKind::GanInversion;
    let m = |r: &BenchmarkResult, c| r.median_accuracy(sg, c).unwrap();
    let (rf_m, lr, mlp2, mlp5) = (
        m(rf, ClassifierKind::Rf),
        m(family, ClassifierKind::Lr),
        m(family, ClassifierKind::Mlp2),
        m(family, ClassifierKind::Mlp5),
    );
    outcome(
        mlp5 >= lr - 0.01 && mlp5 >= rf_m - 0.01,
        format!("SG medians MLP-5 {mlp5:.4}, MLP-2 {mlp2:.4}, LR {lr:.4}, RF {rf_m:.4}"),
    )
}

fn criterion_bayes() -> Outcome {
    let n = 20_000;
    let mut r = rng::rng(rng::derive(0, "gauss", 0));
    let g: Vec<Vec<f64>> = rng::normal_vec(&mut r, n).into_iter().map(|v| vec![v - 1.0]).collect();
    let m: Vec<Vec<f64>> = rng::normal_vec(&mut r, n).into_iter().map(|v| vec![v + 1.0]).collect();
    let support = Support::covering(&[&g, &m], 50, 0.05).unwrap();
    let p_g = fit_density_histogram_on(&g, &support).unwrap();
    let p_m = fit_density_histogram_on(&m, &support).unwrap();
    let scores: Vec<f64> = g.iter().chain(&m).map(|v| v[0]).collect();
    let labels: Vec<Label> = (0..2 * n)
        .map(|i| if i < n { Label::Genuine } else { Label::Fake })
        .collect();
    let (lo, hi) = (support.lo[0], support.hi[0]);
    let step = (hi - lo) / 199.0;
    let mut ok = true;
    let mut boundaries = Vec::new();
    let mut parts = Vec::new();
    for pi in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let priors = Priors::new(pi).unwrap();
        let t = criterion_boundary(&p_m, &p_g, &priors).unwrap();
        let (mut best_t, mut best_j) = (lo, f64::INFINITY);
        for k in 0..200 {
            let th = lo + k as f64 * step;
            let j = empirical_mean_error(&DecisionRule::above(th).unwrap(), &scores, &labels, &priors).unwrap();
            if j < best_j {
                best_j = j;
                best_t = th;
            }
        }
        let off = (t - best_t).abs() / step;
        ok &= off <= 1.0;
        boundaries.push(t);
        parts.push(format!(
            "pi_m {pi}: F=0 at {t:.3}, grid argmin {best_t:.3} ({off:.2} steps)"
        ));
    }
    let monotone = boundaries.windows(2).all(|w| w[1] < w[0]);
    outcome(
        ok && monotone,
        format!("{}; boundary decreasing in pi_m: {monotone}", parts.join("; ")),
    )
}

fn criterion_channels(desk: &Desk) -> Outcome {
    let subset = channel_subset(&desk.cfg, &desk.data);
    let codes: Vec<Code> = subset
        .iter()
        .map(|&i| Code::Style(desk.inversions[i].code.clone()))
        .collect();
    let labels: Vec<Label> = subset.iter().map(|&i| desk.data[i].label).collect();
    let sources: Vec<u64> = subset.iter().map(|&i| desk.data[i].source_id).collect();
    let seeds = &desk.cfg.analysis.seeds;
    let reports = channel_importance(&codes, &labels, &sources, ClassifierKind::Rf, seeds, &desk.options()).unwrap();
    let med = median_channel_accuracies(&reports);
    let mut order: Vec<usize> = (0..med.len()).collect();
    order.sort_by(|&a, &b| med[b].total_cmp(&med[a]));
    let mut top2 = [order[0], order[1]];
    top2.sort_unstable();
    let swapped = &desk
        .cfg
        .dataset
        .forgeries
        .iter()
        .find(|f| f.method == ForgeryMethod::StyleSwap)
        .unwrap()
        .swap_channels;
    let untouched_ok = (0..med.len())
        .filter(|c| !swapped.contains(c))
        .all(|c| (med[c] - 0.5).abs() <= 0.07);
    let full = median(&reports.iter().map(|r| r.full_accuracy).collect::<Vec<_>>()).unwrap();
    let shown: Vec<String> = med.iter().enumerate().map(|(c, a)| format!("{c}:{a:.3}")).collect();
    outcome(
        top2.to_vec() == *swapped && untouched_ok,
        format!(
            "median per-channel accuracy [{}], top-2 {top2:?}, full code {full:.3} ({} images)",
            shown.join(" "),
            subset.len()
        ),
    )
}

fn criterion_reconstruction(desk: &Desk) -> Outcome {
    let n = 250;
    let fe = FeatureExtractor::new(DEFAULT_SEED);
    let genuine: Vec<usize> = (0..desk.data.len())
        .filter(|&i| desk.data[i].label == Label::Genuine)
        .take(n)
        .collect();
    let images: Vec<Image> = genuine.iter().map(|&i| desk.data[i].image.clone()).collect();
    let identity = reconstruction_benchmark(&fe, &IdentityProjector, &images, n).unwrap();

    let sources: Vec<u64> = desk.data.iter().map(|d| d.source_id).collect();
    let (train, _) = split_indices(&sources, desk.cfg.dataset.train_fraction, 0).unwrap();
    let rows: Vec<Vec<f64>> = train.iter().map(|&i| desk.data[i].image.data().to_vec()).collect();
    let pca = pca_fit_incremental(rows.chunks(desk.cfg.pca.batch_size), desk.cfg.pca.n_components).unwrap();
    let train_images: Vec<Image> = train.iter().map(|&i| desk.data[i].image.clone()).collect();
    let vq = vq_train(&train_images, &VqConfig { seed: 0, ..desk.cfg.vq }).unwrap();
    let pca_r = reconstruction_benchmark(&fe, &pca, &images, n).unwrap();
    let vq_r = reconstruction_benchmark(&fe, &vq, &images, n).unwrap();
    let sg: Vec<f64> = genuine
        .iter()
        .map(|&i| {
            fe.distance(
                &desk.data[i].image,
                &desk.generator.synthesize(&desk.inversions[i].code).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let (sg_mean, sg_half) = mean_ci95(&sg);
    let counts_ok = [identity.n, pca_r.n, vq_r.n, sg.len()].iter().all(|&c| c == n);
    let zero = identity.mean == 0.0 && identity.ci_low == 0.0 && identity.ci_high == 0.0;
    outcome(
        counts_ok && zero,
        format!(
            "n = {n}; identity ({}, {}); SG {sg_mean:.5} +/- {sg_half:.5}; PCA {:.5} +/- {:.5}; VQ {:.5} +/- {:.5}",
            identity.mean,
            identity.half_width(),
            pca_r.mean,
            pca_r.half_width(),
            vq_r.mean,
            vq_r.half_width()
        ),
    )
}

const SMALL_CONFIG: &str = r#"
[dataset]
n_per_class = 40
train_fraction = 0.7

[inversion]
steps = 20

[pca]
n_components = 8
batch_size = 20

[vq]
epochs = 1
codebook_size = 16

[classifiers.train]
n_estimators = 20
epochs = 10

[analysis]
seeds = [0, 1]
ablation_sizes = [4, 20, 56]
reconstruction_samples = 20
"#;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let run = |workers: &str, out: &str| {
        let done = Command::new(env!("CARGO_BIN_EXE_lfl"))
            .args(["full", "--config"])
            .arg(&config)
            .args(["--out", tmp.path().join(out).to_str().unwrap(), "--workers", workers])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(
            done.status.success(),
            "lfl full failed: {}",
            String::from_utf8_lossy(&done.stderr)
        );
        snapshot(&tmp.path().join(out))
    };
    let a = run("1", "a");
    let b = run("2", "b");
    let c = run("1", "c");
    let has_table = a.keys().any(|k| k.ends_with("report/benchmark.csv"));
    outcome(
        a == b && a == c && has_table,
        format!(
            "{} files; workers 1 vs 2 identical: {}; rerun identical: {}",
            a.len(),
            a == b,
            a == c
        ),
    )
}

fn main() {
    let mut suite = Suite { results: Vec::new() };
    suite.run(1, "gradient correctness", criterion_gradients);
    suite.run(2, "incremental PCA oracle", criterion_incremental_pca);
    suite.run(3, "inversion recovery", criterion_inversion_recovery);
    suite.run(7, "Bayes criterion optimality", criterion_bayes);
    suite.run(10, "determinism", criterion_determinism);

    let desk = Desk::new();
    println!(
        "desk benchmark: {} images generated and inverted in {:.0}s",
        desk.data.len(),
        desk.build_secs
    );
    let sg = FixedCodes {
        kind: ProjectorKind::GanInversion,
        codes: desk.sg_codes(),
    };
    let pca = PcaSource {
        n_components: desk.cfg.pca.n_components,
        batch_size: desk.cfg.pca.batch_size,
    };
    let vq = VqSource { config: desk.cfg.vq };
    let projectors: [&dyn CodeSource; 3] = [&sg, &pca, &vq];
    let seeds = &desk.cfg.analysis.seeds;
    let t = Instant::now();
    let rf = benchmark_grid(&desk.data, &projectors, &[ClassifierKind::Rf], seeds, &desk.options()).unwrap();
    RF_SECS.set(t.elapsed().as_secs_f64()).unwrap();
    let family = benchmark_grid(
        &desk.data,
        &[&sg],
        &[ClassifierKind::Lr, ClassifierKind::Mlp2, ClassifierKind::Mlp5],
        seeds,
        &desk.options(),
    )
    .unwrap();
    for (cell, acc) in medians(&rf).into_iter().chain(medians(&family)) {
        println!("  median accuracy {cell}: {acc:.4}");
    }

    suite.run(4, "manifold separation premise", || criterion_manifold(&desk));
    suite.run(5, "projector ordering", || criterion_projector_ordering(&desk, &rf));
    suite.run(6, "classifier-family ordering", || criterion_family(&rf, &family));
    suite.run(8, "channel-importance localization", || criterion_channels(&desk));
    suite.run(9, "reconstruction benchmark contract", || {
        criterion_reconstruction(&desk)
    });

    suite.results.sort_by_key(|r| r.0);
    let passed = suite.results.iter().filter(|r| r.2.passed).count();
    println!("acceptance summary: {passed}/{} criteria passed", suite.results.len());
    for (id, name, o, _) in &suite.results {
        println!("  {id:>2} {} {name}", if o.passed { "PASS" } else { "FAIL" });
    }
    if passed != suite.results.len() {
        std::process::exit(1);
    }
}
