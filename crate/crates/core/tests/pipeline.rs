use std::fs;

use latent_forensics::analysis::{benchmark_grid, BenchmarkResult, CodeSource, FixedCodes, PcaSource, VqSource};
use latent_forensics::config::ExperimentConfig;
use latent_forensics::generator::GeneratorModel;
use latent_forensics::pipeline::{build_dataset, invert_all, Run, Stage};
use latent_forensics::projectors::ProjectorKind;
use latent_forensics::world::{read_dataset, read_dataset_meta, write_dataset, Label, StorageLayout};
use latent_forensics::Error;

const TINY: &str = r#"
[dataset]
n_per_class = 16
train_fraction = 0.75

[inversion]
steps = 4

[pca]
n_components = 4
batch_size = 8

[vq]
epochs = 1
codebook_size = 8

[classifiers]
kinds = ["rf", "lr"]

[classifiers.train]
n_estimators = 8
epochs = 4

[analysis]
seeds = [0, 3]
ablation_sizes = [4, 12]
reconstruction_samples = 6
"#;

fn tiny(out: &std::path::Path, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let mut cfg = ExperimentConfig::from_toml(TINY, &overrides).unwrap();
    cfg.output = out.to_path_buf();
    cfg
}

#[test]
fn dataset_round_trips_in_both_layouts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build_dataset(&tiny(tmp.path(), &[])).unwrap();
    assert_eq!(data.iter().filter(|d| d.label == Label::Fake).count(), 16);
    for (name, layout) in [("packed", StorageLayout::Packed), ("loose", StorageLayout::PerImage)] {
        let dir = tmp.path().join(name);
        write_dataset(&dir, &data, layout, &[("origin", "test")]).unwrap();
        assert_eq!(read_dataset(&dir).unwrap(), data);
        assert_eq!(read_dataset_meta(&dir).unwrap()["origin"], "test");
    }
}

#[test]
fn staged_run_matches_in_memory_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), &[]);
    let run = Run::new(cfg.clone());
    run.full().unwrap();
    let text = fs::read_to_string(run.result_path("benchmark")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["config_hash"], run.hash.as_str());
    let staged: BenchmarkResult = serde_json::from_value(doc["data"].clone()).unwrap();

    let g = GeneratorModel::new(cfg.generator).unwrap();
    let data = build_dataset(&cfg).unwrap();
    let (inversions, _) = invert_all(&cfg, &g, &data).unwrap();
    let sg = FixedCodes {
        kind: ProjectorKind::GanInversion,
        codes: inversions.iter().map(|r| r.code.tensor().data().to_vec()).collect(),
    };
    let pca = PcaSource {
        n_components: cfg.pca.n_components,
        batch_size: cfg.pca.batch_size,
    };
    let vq = VqSource { config: cfg.vq };
    let sources: [&dyn CodeSource; 3] = [&sg, &pca, &vq];
    let direct = benchmark_grid(
        &data,
        &sources,
        &cfg.classifiers.kinds,
        &cfg.analysis.seeds,
        &run.grid_options().unwrap(),
    )
    .unwrap();
    let key = |r: &latent_forensics::analysis::BenchmarkRow| (r.seed, r.projector, r.classifier);
    let mut a = staged.rows.clone();
    let mut b = direct.rows;
    a.sort_by_key(key);
    b.sort_by_key(key);
    assert_eq!(a, b);

    for name in ["benchmark.csv", "report.md", "plotdata.json"] {
        assert!(run.report_dir().join(name).exists(), "{name}");
    }
}

#[test]
fn missing_and_foreign_artifacts_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::new(tiny(tmp.path(), &[]));
    let err = run.execute(Stage::Evaluate).unwrap_err();
    assert!(err.to_string().contains("gen-data"), "{err}");

    run.full().unwrap();
    let other = Run::new(tiny(tmp.path(), &["decision.pi_m=0.4"]));
    assert_ne!(other.hash, run.hash);
    other.full().unwrap();
    fs::copy(other.result_path("benchmark"), run.result_path("benchmark")).unwrap();
    let err = run.execute(Stage::Report).unwrap_err();
    fn mismatch(e: &Error) -> bool {
        match e {
            Error::HashMismatch { .. } => true,
            Error::Context { inner, .. } => mismatch(inner),
            _ => false,
        }
    }
    assert!(mismatch(&err), "{err}");
}
