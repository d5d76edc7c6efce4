//! Two-stage style generator: a mapping network `z -> w` and a synthesis
//! network that starts from a learned constant and injects one row of the
//! per-channel code at each of its `C` modulation sites.
//!
//! Weights are not trained. They are drawn from a seeded normal distribution
//! and rescaled so every weight matrix has a fixed largest singular value,
//! which keeps the output manifold smooth.

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId, ParamSet};
#[cfg(test)]
use crate::image::IMAGE_SIZE;
use crate::image::{Image, IMAGE_CHANNELS};
use crate::rng;
use crate::tensor::Tensor;

/// Largest singular value of the hidden mapping layers.
const MAPPING_GAIN: f64 = 1.0;
/// Largest singular value of the mapping output layer; sized so `w` has
/// roughly unit spread per coordinate.
const MAPPING_OUT_GAIN: f64 = 19.0;
/// Largest singular value of the style affines.
const STYLE_GAIN: f64 = 0.5;
/// Largest singular value of the RGB projection.
const RGB_GAIN: f64 = 1.5;
const CONST_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            z_dim: 32,
            w_dim: 32,
            channels: 6,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if self.z_dim == 0 {
            return Err(("z_dim".into(), "must be positive".into()));
        }
        if self.w_dim == 0 {
            return Err(("w_dim".into(), "must be positive".into()));
        }
        if !(4..=16).contains(&self.channels) {
            return Err(("channels".into(), "must be in [4, 16]".into()));
        }
        Ok(())
    }
}

/// Standard-normal seed vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedNoise(Vec<f64>);

impl SeedNoise {
    pub fn new(z: Vec<f64>) -> Self {
        Self(z)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|v| v * s).collect())
    }
}

pub fn sample_z(rng_seed: u64, z_dim: usize) -> SeedNoise {
    SeedNoise(rng::normal_vec(&mut rng::rng(rng_seed), z_dim))
}

/// Per-channel latent code, `C x d`. Row 0 drives the coarsest stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode(Tensor);

impl StyleCode {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::invalid(format!("style code must be C x d, got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::invalid("style code has non-finite entries"));
        }
        Ok(Self(t))
    }

    /// The same `w` on every channel.
    pub fn replicated(w: &[f64], channels: usize) -> Self {
        let data = (0..channels).flat_map(|_| w.iter().copied()).collect();
        Self(Tensor::new(vec![channels, w.len()], data).expect("non-empty code"))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, c: usize) -> &[f64] {
        let d = self.dim();
        &self.0.data()[c * d..(c + 1) * d]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.0.data_mut()[c * d..(c + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Channels `[0, crossover)` from `self`, the rest from `other`.
    pub fn mixed(&self, other: &StyleCode, crossover: usize) -> Result<StyleCode> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::invalid("style codes differ in shape"));
        }
        if crossover > self.channels() {
            return Err(Error::invalid(format!(
                "crossover {crossover} outside [0, {}]",
                self.channels()
            )));
        }
        let mut out = self.clone();
        for c in crossover..self.channels() {
            out.row_mut(c).copy_from_slice(other.row(c));
        }
        Ok(out)
    }
}

/// Resolution and width of each modulation site.
fn site_layout(channels: usize) -> Vec<(usize, usize)> {
    // three upsamplings take 4x4 to 32x32; they sit before the last sites
    let ups: Vec<usize> = if channels >= 6 {
        vec![channels - 5, channels - 3, channels - 1]
    } else {
        vec![channels - 3, channels - 2, channels - 1]
    };
    let mut res = 4;
    (0..channels)
        .map(|i| {
            if ups.contains(&i) {
                res *= 2;
            }
            let width = match res {
                32 => 8,
                _ => 16,
            };
            (res, width)
        })
        .collect()
}

pub(crate) fn spectral_norm(data: &[f64], rows: usize, cols: usize) -> f64 {
    // power iteration on A^T A
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + (i as f64 * 0.618).fract()).collect();
    let mut sigma = 0.0;
    for _ in 0..100 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let u: Vec<f64> = (0..rows)
            .map(|r| (0..cols).map(|c| data[r * cols + c] * v[c]).sum())
            .collect();
        sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = (0..cols)
            .map(|c| (0..rows).map(|r| data[r * cols + c] * u[r]).sum())
            .collect();
    }
    sigma
}

fn scaled_normal(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], rows: usize, gain: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = rng::normal_vec(rng, n);
    let sigma = spectral_norm(&data, rows, n / rows);
    data.iter_mut().for_each(|v| *v *= gain / sigma);
    Tensor::new(shape.to_vec(), data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    params: ParamSet,
    mapping: Graph,
    mapping_out: NodeId,
    synthesis: Graph,
    image_out: NodeId,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate().map_err(|(key, message)| Error::Config {
            key: format!("generator.{key}"),
            message,
        })?;
        let params = Self::sample_params(&config);
        Ok(Self::with_params(config, params))
    }

    fn sample_params(cfg: &GeneratorConfig) -> ParamSet {
        let mut r = rng::rng(rng::derive(cfg.seed, "generator", 0));
        let mut p = ParamSet::new();
        let (zd, wd) = (cfg.z_dim, cfg.w_dim);
        // dense weights are stored [in, out]; normalise over the [out, in] view
        p.insert("map.w0", scaled_normal(&mut r, &[zd, wd], zd, MAPPING_GAIN));
        p.insert(
            "map.b0",
            Tensor::from_vec(rng::normal_vec(&mut r, wd).iter().map(|v| 0.1 * v).collect()),
        );
        p.insert("map.w1", scaled_normal(&mut r, &[wd, wd], wd, MAPPING_GAIN));
        p.insert(
            "map.b1",
            Tensor::from_vec(rng::normal_vec(&mut r, wd).iter().map(|v| 0.1 * v).collect()),
        );
        p.insert("map.w2", scaled_normal(&mut r, &[wd, wd], wd, MAPPING_OUT_GAIN));
        p.insert(
            "map.b2",
            Tensor::from_vec(rng::normal_vec(&mut r, wd).iter().map(|v| 0.1 * v).collect()),
        );
        p.insert(
            "syn.const",
            Tensor::new(vec![CONST_CHANNELS, 4, 4], rng::normal_vec(&mut r, CONST_CHANNELS * 16)).expect("shape"),
        );
        let mut in_ch = CONST_CHANNELS;
        for (i, &(_, width)) in site_layout(cfg.channels).iter().enumerate() {
            p.insert(
                format!("syn.conv{i}"),
                scaled_normal(&mut r, &[width, in_ch, 3, 3], width, 1.0),
            );
            p.insert(
                format!("syn.style{i}.scale_w"),
                scaled_normal(&mut r, &[wd, width], wd, STYLE_GAIN),
            );
            p.insert(format!("syn.style{i}.scale_b"), Tensor::filled(&[width], 1.0));
            p.insert(
                format!("syn.style{i}.shift_w"),
                scaled_normal(&mut r, &[wd, width], wd, STYLE_GAIN),
            );
            p.insert(format!("syn.style{i}.shift_b"), Tensor::zeros(&[width]));
            in_ch = width;
        }
        p.insert(
            "syn.rgb",
            scaled_normal(&mut r, &[IMAGE_CHANNELS, in_ch, 1, 1], IMAGE_CHANNELS, RGB_GAIN),
        );
        p.insert("syn.rgb_b", Tensor::zeros(&[IMAGE_CHANNELS]));
        p
    }

    fn with_params(config: GeneratorConfig, params: ParamSet) -> Self {
        let mut b = GraphBuilder::new();
        let z = b.input("z");
        let w = Self::mapping_nodes(&mut b, z);
        let mapping = b.build();

        let mut b = GraphBuilder::new();
        let w_in = b.input("w");
        let img = Self::synthesis_nodes(&mut b, w_in, config.channels);
        b.output("image", img);
        let synthesis = b.build();
        Self {
            config,
            params,
            mapping,
            mapping_out: w,
            synthesis,
            image_out: img,
        }
    }

    fn mapping_nodes(b: &mut GraphBuilder, z: NodeId) -> NodeId {
        let mut h = z;
        for layer in 0..3 {
            let w = b.param(&format!("map.w{layer}"));
            let bias = b.param(&format!("map.b{layer}"));
            h = b.matmul(h, w);
            h = b.add_row(h, bias);
            if layer < 2 {
                h = b.relu(h);
            }
        }
        h
    }

    /// Appends the synthesis network reading the `C x d` code at `w` and
    /// returns the image node.
    pub fn synthesis_nodes(b: &mut GraphBuilder, w: NodeId, channels: usize) -> NodeId {
        let mut h = b.param("syn.const");
        let mut res = 4;
        for (i, &(site_res, _)) in site_layout(channels).iter().enumerate() {
            if site_res != res {
                h = b.upsample2(h);
                res = site_res;
            }
            let k = b.param(&format!("syn.conv{i}"));
            h = b.conv2d(h, k);
            h = b.instance_normalize(h);
            let wi = b.row(w, i);
            let sw = b.param(&format!("syn.style{i}.scale_w"));
            let sb = b.param(&format!("syn.style{i}.scale_b"));
            let tw = b.param(&format!("syn.style{i}.shift_w"));
            let tb = b.param(&format!("syn.style{i}.shift_b"));
            let scale = b.matmul(wi, sw);
            let scale = b.add_row(scale, sb);
            let shift = b.matmul(wi, tw);
            let shift = b.add_row(shift, tb);
            h = b.scale_channels(h, scale);
            h = b.shift_channels(h, shift);
            h = b.relu(h);
        }
        let rgb = b.param("syn.rgb");
        let rgb_b = b.param("syn.rgb_b");
        h = b.conv2d(h, rgb);
        h = b.shift_channels(h, rgb_b);
        b.sigmoid(h)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn w_dim(&self) -> usize {
        self.config.w_dim
    }

    pub fn code_shape(&self) -> [usize; 2] {
        [self.config.channels, self.config.w_dim]
    }

    pub fn sample_z(&self, seed: u64) -> SeedNoise {
        sample_z(seed, self.config.z_dim)
    }

    /// Single `w` replicated across all channels.
    pub fn map(&self, z: &SeedNoise) -> Result<StyleCode> {
        if z.len() != self.config.z_dim {
            return Err(Error::invalid(format!(
                "z has length {}, generator expects {}",
                z.len(),
                self.config.z_dim
            )));
        }
        let zt = Tensor::new(vec![1, z.len()], z.values().to_vec())?;
        let binds = Bindings::new().bind("z", &zt).bind_params(&self.params);
        let ev = self.mapping.forward(&binds)?;
        Ok(StyleCode::replicated(
            ev.get(self.mapping_out).data(),
            self.config.channels,
        ))
    }

    pub fn synthesize(&self, w: &StyleCode) -> Result<Image> {
        self.check_code(w)?;
        let binds = Bindings::new().bind("w", w.tensor()).bind_params(&self.params);
        let ev = self.synthesis.forward(&binds)?;
        Image::new(ev.get(self.image_out).clone())
    }

    pub fn check_code(&self, w: &StyleCode) -> Result<()> {
        if w.tensor().shape() != self.code_shape() {
            return Err(Error::invalid(format!(
                "style code must be {:?}, got {:?}",
                self.code_shape(),
                w.tensor().shape()
            )));
        }
        Ok(())
    }

    /// Channels `[0, crossover)` from `w1`, `[crossover, C)` from `w2`.
    pub fn style_mix(&self, w1: &StyleCode, w2: &StyleCode, crossover: usize) -> Result<Image> {
        self.check_code(w1)?;
        self.check_code(w2)?;
        self.synthesize(&w1.mixed(w2, crossover)?)
    }

    /// Mean of `n` mapped codes drawn from a fixed stream.
    pub fn mean_code(&self, n: usize) -> Result<StyleCode> {
        let mut acc = vec![0.0; self.config.w_dim];
        for i in 0..n {
            let w = self.map(&self.sample_z(rng::derive(self.config.seed, "mean_w", i as u64)))?;
            for (a, v) in acc.iter_mut().zip(w.row(0)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Ok(StyleCode::replicated(&acc, self.config.channels))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "generator");
        c.set_meta("z_dim", &self.config.z_dim.to_string());
        c.set_meta("w_dim", &self.config.w_dim.to_string());
        c.set_meta("channels", &self.config.channels.to_string());
        c.set_meta("seed", &self.config.seed.to_string());
        c.push_params("", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.require_meta("kind")? != "generator" {
            return Err(Error::Container("not a generator container".into()));
        }
        let parse = |k: &str| -> Result<u64> {
            c.require_meta(k)?
                .parse()
                .map_err(|_| Error::Container(format!("bad `{k}`")))
        };
        let config = GeneratorConfig {
            z_dim: parse("z_dim")? as usize,
            w_dim: parse("w_dim")? as usize,
            channels: parse("channels")? as usize,
            seed: parse("seed")?,
        };
        Ok(Self::with_params(config, c.params("")))
    }
}

/// Spectral-scaling helper exposed for tests.
pub fn largest_singular_value(t: &Tensor, rows: usize) -> f64 {
    spectral_norm(t.data(), rows, t.len() / rows)
}
