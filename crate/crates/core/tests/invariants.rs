use std::collections::BTreeSet;

use latent_forensics::analysis::Confusion;
use latent_forensics::decision::{calibrate_threshold, empirical_mean_error, fit_density_histogram, Priors};
use latent_forensics::projectors::pca_fit_incremental;
use latent_forensics::rng;
use latent_forensics::world::{split_indices, Label};
use proptest::prelude::*;

fn labels_from(bits: &[bool]) -> Vec<Label> {
    bits.iter()
        .map(|&b| if b { Label::Fake } else { Label::Genuine })
        .collect()
}

proptest! {
    #[test]
    fn split_keeps_sources_together(
        sources in prop::collection::vec(0u64..30, 2..120),
        frac in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let distinct: BTreeSet<u64> = sources.iter().copied().collect();
        let result = split_indices(&sources, frac, seed);
        if distinct.len() < 2 {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let (train, test) = result.unwrap();
        prop_assert_eq!(train.len() + test.len(), sources.len());
        let a: BTreeSet<u64> = train.iter().map(|&i| sources[i]).collect();
        let b: BTreeSet<u64> = test.iter().map(|&i| sources[i]).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert!(!a.is_empty() && !b.is_empty());
        prop_assert!(train.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn calibrated_threshold_tracks_genuine_prior(p in 0.001f64..0.999, q in 0.001f64..0.999) {
        let (a, b) = (calibrate_threshold(&Priors::new(p).unwrap()), calibrate_threshold(&Priors::new(q).unwrap()));
        prop_assert!((a.threshold - (1.0 - p)).abs() < 1e-12);
        if p < q {
            prop_assert!(a.threshold > b.threshold);
        }
    }

    #[test]
    fn mean_error_is_a_convex_mix_of_class_errors(
        scores in prop::collection::vec(0.0f64..1.0, 4..60),
        bits in prop::collection::vec(any::<bool>(), 4..60),
        pi in 0.01f64..0.99,
    ) {
        let n = scores.len().min(bits.len());
        let labels = labels_from(&bits[..n]);
        let rule = calibrate_threshold(&Priors::new(0.5).unwrap());
        match empirical_mean_error(&rule, &scores[..n], &labels, &Priors::new(pi).unwrap()) {
            Ok(j) => prop_assert!((0.0..=1.0).contains(&j)),
            Err(_) => prop_assert!(labels.iter().all(|&l| l == labels[0])),
        }
    }

    #[test]
    fn confusion_counts_cover_every_sample(
        pred in prop::collection::vec(any::<bool>(), 1..80),
        truth in prop::collection::vec(any::<bool>(), 1..80),
    ) {
        let n = pred.len().min(truth.len());
        let c = Confusion::from_labels(&labels_from(&pred[..n]), &labels_from(&truth[..n])).unwrap();
        prop_assert_eq!(c.total(), n);
        let agree = pred[..n].iter().zip(&truth[..n]).filter(|(a, b)| a == b).count();
        prop_assert!((c.accuracy() - agree as f64 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn histogram_density_integrates_to_one(seed in any::<u64>(), bins in 1usize..40) {
        let mut r = rng::rng(seed);
        let x: Vec<Vec<f64>> = rng::normal_vec(&mut r, 200).into_iter().map(|v| vec![v]).collect();
        let model = fit_density_histogram(&x, bins).unwrap();
        prop_assert!((model.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn full_rank_pca_is_independent_of_batching(seed in 0u64..500, batch in 5usize..40) {
        let mut r = rng::rng(seed);
        // exact only when every component is retained between batches
        let (n, d, k) = (80, 6, 6);
        let x: Vec<Vec<f64>> = rng::normal_vec(&mut r, n * d)
            .chunks(d)
            .map(|c| c.iter().enumerate().map(|(j, v)| v * (d - j) as f64).collect())
            .collect();
        let whole = pca_fit_incremental(std::iter::once(&x[..]), k).unwrap();
        let parts = pca_fit_incremental(x.chunks(batch), k).unwrap();
        for i in 0..k {
            let dot: f64 = whole.component(i).iter().zip(parts.component(i)).map(|(a, b)| a * b).sum();
            prop_assert!((dot.abs() - 1.0).abs() < 1e-6, "component {} dot {}", i, dot);
        }
    }
}
