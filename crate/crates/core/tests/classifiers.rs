use latent_forensics::classifiers::{
    accuracy, forest::grow_tree, train, train_logistic, train_mlp, train_random_forest, Classifier, ClassifierKind,
    DenseNet, TrainConfig,
};
use latent_forensics::gradcheck::check_gradients;
use latent_forensics::graph::Bindings;
use latent_forensics::rng;
use latent_forensics::tensor::Tensor;
use latent_forensics::world::Label;
use proptest::prelude::*;

fn label(fake: bool) -> Label {
    if fake {
        Label::Fake
    } else {
        Label::Genuine
    }
}

/// Noisy XOR: fake iff the two coordinates share a sign.
fn xor(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Label>) {
    let mut r = rng::rng(seed);
    let noise = rng::normal_vec(&mut r, 2 * n);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let (a, b) = (i % 2 == 0, (i / 2) % 2 == 0);
        let s = |v: bool| if v { 1.0 } else { -1.0 };
        x.push(vec![s(a) + 0.2 * noise[2 * i], s(b) + 0.2 * noise[2 * i + 1]]);
        y.push(label(a == b));
    }
    (x, y)
}

fn fast() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        epochs: 150,
        n_estimators: 25,
        ..TrainConfig::default()
    }
}

fn fit_accuracy(model: &Classifier, x: &[Vec<f64>], y: &[Label]) -> f64 {
    accuracy(&model.predict_labels(x, 0.5).unwrap(), y)
}

#[test]
fn forest_and_mlp_solve_xor_where_logistic_cannot() {
    let (x, y) = xor(400, 1);
    let (tx, ty) = xor(200, 2);
    let rf = train_random_forest(&x, &y, &fast()).unwrap();
    let mlp = train_mlp(&x, &y, ClassifierKind::Mlp2, &fast()).unwrap();
    let lr = train_logistic(&x, &y, &fast()).unwrap();
    assert!(fit_accuracy(&rf, &tx, &ty) > 0.97);
    assert!(fit_accuracy(&mlp, &tx, &ty) > 0.97);
    assert!(fit_accuracy(&lr, &tx, &ty) < 0.75);
}

#[test]
fn logistic_separates_separable_data() {
    let mut r = rng::rng(5);
    let z = rng::normal_vec(&mut r, 600);
    let x: Vec<Vec<f64>> = z.chunks(3).map(|c| c.to_vec()).collect();
    let y: Vec<Label> = x.iter().map(|v| label(v[0] - 0.5 * v[1] > 0.0)).collect();
    let lr = train_logistic(
        &x,
        &y,
        &TrainConfig {
            validation_fraction: 0.0,
            ..fast()
        },
    )
    .unwrap();
    assert!(fit_accuracy(&lr, &x, &y) >= 0.98);
}

#[test]
fn zero_initialised_logistic_scores_one_half() {
    let net = DenseNet::init(4, &[], 9, true);
    let x = Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap();
    assert!(net.logits(&x).unwrap().iter().all(|&l| l == 0.0));
    let (x, y) = xor(20, 3);
    let untrained = train_logistic(&x, &y, &TrainConfig { epochs: 0, ..fast() }).unwrap();
    for s in untrained.predict_scores(&x).unwrap() {
        assert_eq!(s, 0.5);
    }
}

#[test]
fn unanimous_training_rows_get_certain_leaves() {
    let (x, y) = xor(64, 4);
    let yb: Vec<bool> = y.iter().map(|l| l.is_fake()).collect();
    let mut r = rng::rng(0);
    let tree = grow_tree(&x, &yb, (0..x.len()).collect(), 2, &mut r);
    for (row, &fake) in x.iter().zip(&yb) {
        assert_eq!(tree.leaf_probability(row), if fake { 1.0 } else { 0.0 });
    }
}

#[test]
fn swapping_classes_mirrors_logistic_scores() {
    let (x, y) = xor(120, 6);
    let swapped: Vec<Label> = y.iter().map(|l| label(!l.is_fake())).collect();
    let cfg = TrainConfig { epochs: 20, ..fast() };
    let a = train_logistic(&x, &y, &cfg).unwrap().predict_scores(&x).unwrap();
    let b = train_logistic(&x, &swapped, &cfg).unwrap().predict_scores(&x).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!((p + q - 1.0).abs() < 1e-9, "{p} + {q}");
    }
}

#[test]
fn mlp_loss_gradients_match_finite_differences() {
    let net = DenseNet::init(3, &[5, 4], 2, false);
    let mut r = rng::rng(8);
    let x = Tensor::new(vec![6, 3], rng::normal_vec(&mut r, 18)).unwrap();
    let y = Tensor::new(vec![6, 1], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let (graph, loss) = net.loss_graph();
    let fixed = Bindings::new().bind("x", &x).bind("y", &y);
    let report = check_gradients(graph, &fixed, &net.params, loss, 1e-6, 1e-6).unwrap();
    assert!(report.all_passed(), "{report:?}");
}

#[test]
fn training_rejects_bad_inputs() {
    let (x, y) = xor(10, 0);
    let one_class = vec![Label::Fake; 10];
    assert!(train(ClassifierKind::Rf, &x, &one_class, &fast()).is_err());
    assert!(train(ClassifierKind::Lr, &x[..3], &y, &fast()).is_err());
    assert!(train_mlp(&x, &y, ClassifierKind::Lr, &fast()).is_err());
    let bad = TrainConfig {
        learning_rate: 0.0,
        ..fast()
    };
    assert!(train(ClassifierKind::Mlp2, &x, &y, &bad).unwrap_err().is_validation());
    let rf = train_random_forest(&x, &y, &fast()).unwrap();
    assert!(rf.predict_score(&[0.0]).is_err());
}

#[test]
fn container_round_trip_preserves_scores() {
    let (x, y) = xor(60, 7);
    for kind in ClassifierKind::ALL {
        let cfg = TrainConfig { epochs: 3, ..fast() };
        let model = train(kind, &x, &y, &cfg).unwrap();
        let back = Classifier::from_container(&model.to_container()).unwrap();
        assert_eq!(back.kind, kind);
        assert_eq!(model.predict_scores(&x).unwrap(), back.predict_scores(&x).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_are_probabilities(seed in 0u64..1000, kind in 0usize..4) {
        let (x, y) = xor(24, seed);
        let cfg = TrainConfig { epochs: 2, n_estimators: 5, seed, ..fast() };
        let model = train(ClassifierKind::ALL[kind], &x, &y, &cfg).unwrap();
        for s in model.predict_scores(&x).unwrap() {
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
