//! Perceptual distance from a frozen, seeded two-stage convolutional feature
//! pyramid. Each stage's features are unit-normalised across channels at
//! every pixel and compared by mean squared difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId, ParamSet};
use crate::image::{Image, IMAGE_CHANNELS};
use crate::projectors::Projector;
use crate::rng;
use crate::tensor::Tensor;

pub const STAGE1_CHANNELS: usize = 16;
pub const STAGE2_CHANNELS: usize = 32;
pub const DEFAULT_SEED: u64 = 0x5EED_1BF5;

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    params: ParamSet,
    features: Graph,
    stages: [NodeId; 2],
    distance: Graph,
    distance_out: NodeId,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_SEED)
    }
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::rng(rng::derive(seed, "perceptual", 0));
        let mut params = ParamSet::new();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let k1: Vec<f64> = rng::normal_vec(&mut r, STAGE1_CHANNELS * IMAGE_CHANNELS * 9)
            .into_iter()
            .map(|v| v * he(IMAGE_CHANNELS * 9))
            .collect();
        let k2: Vec<f64> = rng::normal_vec(&mut r, STAGE2_CHANNELS * STAGE1_CHANNELS * 9)
            .into_iter()
            .map(|v| v * he(STAGE1_CHANNELS * 9))
            .collect();
        params.insert(
            "perc.conv1",
            Tensor::new(vec![STAGE1_CHANNELS, IMAGE_CHANNELS, 3, 3], k1).expect("shape"),
        );
        params.insert(
            "perc.conv2",
            Tensor::new(vec![STAGE2_CHANNELS, STAGE1_CHANNELS, 3, 3], k2).expect("shape"),
        );

        let mut b = GraphBuilder::new();
        let x = b.input("x");
        let stages = Self::feature_nodes(&mut b, x);
        let features = b.build();

        let mut b = GraphBuilder::new();
        let x = b.input("x");
        let y = b.input("y");
        let fx = Self::feature_nodes(&mut b, x);
        let fy = Self::feature_nodes(&mut b, y);
        let d = Self::distance_nodes(&mut b, fx, fy);
        let distance = b.build();

        Self {
            params,
            features,
            stages,
            distance,
            distance_out: d,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Appends the normalised feature stages of the image at `x`.
    pub fn feature_nodes(b: &mut GraphBuilder, x: NodeId) -> [NodeId; 2] {
        let half = b.constant(Tensor::filled(&crate::image::IMAGE_SHAPE, 0.5));
        let centered = b.sub(x, half);
        let k1 = b.param("perc.conv1");
        let f1 = b.conv2d(centered, k1);
        let f1 = b.relu(f1);
        let n1 = b.channel_normalize(f1);
        let pooled = b.avg_pool2(f1);
        let k2 = b.param("perc.conv2");
        let f2 = b.conv2d(pooled, k2);
        let f2 = b.relu(f2);
        let n2 = b.channel_normalize(f2);
        [n1, n2]
    }

    /// Sum over stages of the mean squared difference of normalised features.
    pub fn distance_nodes(b: &mut GraphBuilder, fx: [NodeId; 2], fy: [NodeId; 2]) -> NodeId {
        let d1 = b.mse(fx[0], fy[0]);
        let d2 = b.mse(fx[1], fy[1]);
        b.add(d1, d2)
    }

    /// Normalised feature tensors of one image.
    pub fn features(&self, x: &Image) -> Result<[Tensor; 2]> {
        let binds = Bindings::new().bind("x", x.tensor()).bind_params(&self.params);
        let ev = self.features.forward(&binds)?;
        Ok([ev.get(self.stages[0]).clone(), ev.get(self.stages[1]).clone()])
    }

    pub fn distance(&self, x: &Image, y: &Image) -> Result<f64> {
        let binds = Bindings::new()
            .bind("x", x.tensor())
            .bind("y", y.tensor())
            .bind_params(&self.params);
        Ok(self.distance.forward(&binds)?.get(self.distance_out).item())
    }

    pub fn distance_tensors(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        if x.shape() != y.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        self.distance(&Image::new(x.clone())?, &Image::new(y.clone())?)
    }
}

/// Mean reconstruction distance with a normal-approximation 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSummary {
    pub projector: String,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ReconstructionSummary {
    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}

pub const DEFAULT_BENCHMARK_SAMPLES: usize = 250;

/// Mean of `d(x, reconstruct(project(x)))` over the first `n` images.
pub fn reconstruction_benchmark(
    extractor: &FeatureExtractor,
    projector: &dyn Projector,
    data: &[Image],
    n: usize,
) -> Result<ReconstructionSummary> {
    if n == 0 {
        return Err(Error::invalid("benchmark needs at least one sample"));
    }
    if n > data.len() {
        return Err(Error::invalid(format!(
            "requested {n} samples, only {} available",
            data.len()
        )));
    }
    let distances: Vec<f64> = data[..n]
        .iter()
        .map(|x| {
            let code = projector.project(x)?;
            let recon = projector.reconstruct(&code)?;
            extractor.distance(x, &recon)
        })
        .collect::<Result<_>>()?;
    let (mean, half) = mean_ci95(&distances);
    Ok(ReconstructionSummary {
        projector: projector.kind().to_string(),
        n,
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}

/// Mean and `1.96 s / sqrt(n)` half width (zero for a single sample).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

pub fn summaries_to_csv(rows: &[ReconstructionSummary]) -> String {
    let mut out = String::from("projector,n,mean,ci_low,ci_high\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.projector, r.n, r.mean, r.ci_low, r.ci_high
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::IMAGE_SHAPE;

    fn noise_image(seed: u64) -> Image {
        let mut r = rng::rng(seed);
        let n: usize = IMAGE_SHAPE.iter().product();
        Image::from_data(
            rng::normal_vec(&mut r, n)
                .into_iter()
                .map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_symmetry() {
        let fx = FeatureExtractor::default();
        let (a, b) = (noise_image(1), noise_image(2));
        assert_eq!(fx.distance(&a, &a).unwrap(), 0.0);
        let ab = fx.distance(&a, &b).unwrap();
        let ba = fx.distance(&b, &a).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let fx = FeatureExtractor::default();
        assert!(fx
            .distance_tensors(&Tensor::zeros(&[3, 32, 32]), &Tensor::zeros(&[3, 16, 16]))
            .is_err());
    }

    #[test]
    fn ci_of_constant_values_is_zero() {
        assert_eq!(mean_ci95(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, h) = mean_ci95(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((h - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }
}
