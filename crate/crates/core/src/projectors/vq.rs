//! Single-level vector-quantised autoencoder. The encoder maps an image to an
//! 8x8 grid of `d_c`-vectors, each snapped to its nearest codebook row; the
//! code handed to classifiers is the grid of indices.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{shape_mismatch, Code, Projector, ProjectorKind};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId, ParamSet};
use crate::image::{Image, IMAGE_CHANNELS, IMAGE_SHAPE};
use crate::nn::{accumulate, conv_kernel, Adam};
use crate::rng;
use crate::tensor::Tensor;

pub const GRID: usize = 8;
const ENC_WIDTH: [usize; 2] = [8, 16];
const DEC_WIDTH: [usize; 2] = [16, 8];
// Laplace smoothing of the EMA cluster sizes
const EMA_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the commitment term `||z_e - sg(z_q)||^2`.
    pub commitment: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 8,
            epochs: 6,
            batch_size: 16,
            learning_rate: 2e-3,
            commitment: 0.25,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if self.codebook_size == 0 {
            return Err(("codebook_size".into(), "must be positive".into()));
        }
        if self.code_dim == 0 {
            return Err(("code_dim".into(), "must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(("batch_size".into(), "must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(("learning_rate".into(), "must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(("ema_decay".into(), "must be in [0, 1)".into()));
        }
        Ok(())
    }
}

struct Graphs {
    encoder: Graph,
    z_e: NodeId,
    decoder: Graph,
    recon: NodeId,
    train: Graph,
    train_loss: NodeId,
    train_recon: NodeId,
}

pub struct VqModel {
    codebook_size: usize,
    code_dim: usize,
    commitment: f64,
    params: ParamSet,
    /// `[K, d_c]`
    codebook: Tensor,
    graphs: Graphs,
    train_losses: Vec<f64>,
}

impl std::fmt::Debug for VqModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VqModel")
            .field("codebook_size", &self.codebook_size)
            .field("code_dim", &self.code_dim)
            .finish_non_exhaustive()
    }
}

fn encoder_nodes(b: &mut GraphBuilder, x: NodeId) -> NodeId {
    let k0 = b.param("enc.conv0");
    let h = b.conv2d(x, k0);
    let bias = b.param("enc.bias0");
    let h = b.shift_channels(h, bias);
    let h = b.relu(h);
    let h = b.avg_pool2(h);
    let k1 = b.param("enc.conv1");
    let h = b.conv2d(h, k1);
    let bias = b.param("enc.bias1");
    let h = b.shift_channels(h, bias);
    let h = b.relu(h);
    let h = b.avg_pool2(h);
    let k2 = b.param("enc.proj");
    b.conv2d(h, k2)
}

fn decoder_nodes(b: &mut GraphBuilder, z: NodeId) -> NodeId {
    let k0 = b.param("dec.conv0");
    let h = b.conv2d(z, k0);
    let bias = b.param("dec.bias0");
    let h = b.shift_channels(h, bias);
    let h = b.relu(h);
    let h = b.upsample2(h);
    let k1 = b.param("dec.conv1");
    let h = b.conv2d(h, k1);
    let bias = b.param("dec.bias1");
    let h = b.shift_channels(h, bias);
    let h = b.relu(h);
    let h = b.upsample2(h);
    let k2 = b.param("dec.rgb");
    let h = b.conv2d(h, k2);
    let bias = b.param("dec.rgb_b");
    let h = b.shift_channels(h, bias);
    b.sigmoid(h)
}

fn build_graphs(commitment: f64) -> Graphs {
    let mut b = GraphBuilder::new();
    let x = b.input("x");
    let enc_out = encoder_nodes(&mut b, x);
    let encoder = b.build();

    let mut b = GraphBuilder::new();
    let z = b.input("zq");
    let recon = decoder_nodes(&mut b, z);
    let decoder = b.build();

    // Straight-through: the decoder sees z_e + (z_q - z_e) with the offset fed
    // in as a constant input, so its gradient flows to the encoder unchanged.
    let mut b = GraphBuilder::new();
    let x = b.input("x");
    let offset = b.input("st_offset");
    let zq = b.input("zq");
    let z_e = encoder_nodes(&mut b, x);
    let dec_in = b.add(z_e, offset);
    let out = decoder_nodes(&mut b, dec_in);
    let train_recon = b.mse(out, x);
    let commit = b.mse(z_e, zq);
    let commit = b.scale(commit, commitment);
    let train_loss = b.add(train_recon, commit);
    let train = b.build();

    Graphs {
        encoder,
        z_e: enc_out,
        decoder,
        recon,
        train,
        train_loss,
        train_recon,
    }
}

fn init_params(cfg: &VqConfig) -> ParamSet {
    let mut r = rng::rng(rng::derive(cfg.seed, "vq.init", 0));
    let mut p = ParamSet::new();
    let [e0, e1] = ENC_WIDTH;
    let [d0, d1] = DEC_WIDTH;
    p.insert("enc.conv0", conv_kernel(&mut r, e0, IMAGE_CHANNELS, 3));
    p.insert("enc.bias0", Tensor::zeros(&[e0]));
    p.insert("enc.conv1", conv_kernel(&mut r, e1, e0, 3));
    p.insert("enc.bias1", Tensor::zeros(&[e1]));
    p.insert("enc.proj", conv_kernel(&mut r, cfg.code_dim, e1, 1));
    p.insert("dec.conv0", conv_kernel(&mut r, d0, cfg.code_dim, 3));
    p.insert("dec.bias0", Tensor::zeros(&[d0]));
    p.insert("dec.conv1", conv_kernel(&mut r, d1, d0, 3));
    p.insert("dec.bias1", Tensor::zeros(&[d1]));
    p.insert("dec.rgb", conv_kernel(&mut r, IMAGE_CHANNELS, d1, 3).map(|v| 0.5 * v));
    p.insert("dec.rgb_b", Tensor::zeros(&[IMAGE_CHANNELS]));
    p
}

impl VqModel {
    fn with_params(codebook_size: usize, code_dim: usize, commitment: f64, params: ParamSet, codebook: Tensor) -> Self {
        Self {
            codebook_size,
            code_dim,
            commitment,
            params,
            codebook,
            graphs: build_graphs(commitment),
            train_losses: Vec::new(),
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    /// `[K, d_c]` codebook.
    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn codebook_row(&self, k: usize) -> &[f64] {
        &self.codebook.data()[k * self.code_dim..(k + 1) * self.code_dim]
    }

    /// Mean training reconstruction MSE of every epoch.
    pub fn train_losses(&self) -> &[f64] {
        &self.train_losses
    }

    /// Continuous encoder output `[d_c, 8, 8]`.
    pub fn encode(&self, x: &Image) -> Result<Tensor> {
        let binds = Bindings::new().bind("x", x.tensor()).bind_params(&self.params);
        Ok(self.graphs.encoder.forward(&binds)?.get(self.graphs.z_e).clone())
    }

    /// Index of the codebook row nearest to `v`; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.codebook_size {
            let d: f64 = self.codebook_row(k).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    /// Row-major indices of the grid positions of `z_e`.
    pub fn quantize(&self, z_e: &Tensor) -> Vec<usize> {
        let plane = GRID * GRID;
        let zd = z_e.data();
        let mut v = vec![0.0; self.code_dim];
        (0..plane)
            .map(|p| {
                for (c, slot) in v.iter_mut().enumerate() {
                    *slot = zd[c * plane + p];
                }
                self.nearest(&v)
            })
            .collect()
    }

    /// Codebook vectors laid back out as a `[d_c, 8, 8]` grid.
    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        let plane = GRID * GRID;
        if indices.len() != plane {
            return Err(Error::invalid(format!(
                "expected {plane} indices, got {}",
                indices.len()
            )));
        }
        let mut out = vec![0.0; self.code_dim * plane];
        for (p, &k) in indices.iter().enumerate() {
            if k >= self.codebook_size {
                return Err(Error::invalid(format!(
                    "index {k} outside codebook of size {}",
                    self.codebook_size
                )));
            }
            for c in 0..self.code_dim {
                out[c * plane + p] = self.codebook_row(k)[c];
            }
        }
        Tensor::new(vec![self.code_dim, GRID, GRID], out)
    }

    pub fn decode(&self, zq: &Tensor) -> Result<Image> {
        let binds = Bindings::new().bind("zq", zq).bind_params(&self.params);
        Image::new(self.graphs.decoder.forward(&binds)?.get(self.graphs.recon).clone())
    }

    /// Training loss, reconstruction MSE and parameter gradients on one image
    /// under the straight-through estimator, plus the encoder output and its
    /// indices.
    pub fn loss_gradients(&self, x: &Image) -> Result<StepOutput> {
        let z_e = self.encode(x)?;
        let indices = self.quantize(&z_e);
        let zq = self.lookup(&indices)?;
        let mut offset = zq.clone();
        offset.axpy(-1.0, &z_e);
        let binds = Bindings::new()
            .bind("x", x.tensor())
            .bind("st_offset", &offset)
            .bind("zq", &zq)
            .bind_params(&self.params);
        let g = &self.graphs;
        let ev = g.train.forward(&binds)?;
        let loss = ev.get(g.train_loss).item();
        let recon = ev.get(g.train_recon).item();
        let names: Vec<&str> = self.params.names().collect();
        let grads = g.train.vjp(&ev, &binds, g.train_loss, Tensor::scalar(1.0), &names)?;
        Ok(StepOutput {
            loss,
            recon,
            grads,
            z_e,
            indices,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "vq");
        c.set_meta("commitment", &self.commitment.to_string());
        c.push_params("", &self.params);
        c.push("codebook", self.codebook.clone());
        c.push("train_losses", Tensor::from_vec(self.train_losses.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.require_meta("kind")? != "vq" {
            return Err(Error::Container("not a VQ container".into()));
        }
        let commitment: f64 = c
            .require_meta("commitment")?
            .parse()
            .map_err(|_| Error::Container("bad commitment".into()))?;
        let codebook = c.require("codebook")?.clone();
        if codebook.rank() != 2 || !codebook.is_finite() {
            return Err(Error::Container("codebook must be a finite matrix".into()));
        }
        let params: ParamSet = c
            .params("")
            .iter()
            .filter(|(k, _)| k.starts_with("enc.") || k.starts_with("dec."))
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        let (k, d) = (codebook.shape()[0], codebook.shape()[1]);
        let mut model = Self::with_params(k, d, commitment, params, codebook);
        model.train_losses = c.get("train_losses").map(|t| t.data().to_vec()).unwrap_or_default();
        Ok(model)
    }
}

/// Result of [`VqModel::loss_gradients`].
pub struct StepOutput {
    pub loss: f64,
    pub recon: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub z_e: Tensor,
    pub indices: Vec<usize>,
}

/// Trains encoder and decoder with Adam under the straight-through estimator
/// and the codebook by exponential moving averages of assigned encoder outputs.
pub fn vq_train(data: &[Image], cfg: &VqConfig) -> Result<VqModel> {
    cfg.validate().map_err(|(key, message)| Error::Config {
        key: format!("vq.{key}"),
        message,
    })?;
    if data.is_empty() {
        return Err(Error::invalid("VQ training needs at least one image"));
    }
    let (k_size, dc) = (cfg.codebook_size, cfg.code_dim);
    let params = init_params(cfg);
    let mut model = VqModel::with_params(k_size, dc, cfg.commitment, params, Tensor::zeros(&[k_size, dc]));

    // seed the codebook with encoder outputs at random positions
    let mut r = rng::rng(rng::derive(cfg.seed, "vq.codebook", 0));
    let plane = GRID * GRID;
    let mut cb = Vec::with_capacity(k_size * dc);
    for _ in 0..k_size {
        let img = data.choose(&mut r).expect("non-empty");
        let z = model.encode(img)?;
        let p = rand::Rng::gen_range(&mut r, 0..plane);
        cb.extend((0..dc).map(|c| z.data()[c * plane + p]));
    }
    model.codebook = Tensor::new(vec![k_size, dc], cb)?;
    let mut ema_counts = vec![1.0; k_size];
    let mut ema_sums = model.codebook.data().to_vec();

    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng::rng(rng::derive(cfg.seed, "vq.shuffle", 0));
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut recon_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let outs: Vec<StepOutput> = batch
                .par_iter()
                .map(|&i| model.loss_gradients(&data[i]))
                .collect::<Result<_>>()?;
            let mut grads = BTreeMap::new();
            let mut counts = vec![0.0; k_size];
            let mut sums = vec![0.0; k_size * dc];
            for out in outs {
                recon_sum += out.recon;
                accumulate(&mut grads, out.grads);
                for (p, &k) in out.indices.iter().enumerate() {
                    counts[k] += 1.0;
                    for c in 0..dc {
                        sums[k * dc + c] += out.z_e.data()[c * plane + p];
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grads.values_mut().for_each(|g| g.scale_assign(inv));
            opt.step(&mut model.params, &grads);

            let gamma = cfg.ema_decay;
            for k in 0..k_size {
                ema_counts[k] = gamma * ema_counts[k] + (1.0 - gamma) * counts[k];
                for c in 0..dc {
                    ema_sums[k * dc + c] = gamma * ema_sums[k * dc + c] + (1.0 - gamma) * sums[k * dc + c];
                }
            }
            let total: f64 = ema_counts.iter().sum();
            let cbd = model.codebook.data_mut();
            for k in 0..k_size {
                let n = (ema_counts[k] + EMA_EPS) / (total + k_size as f64 * EMA_EPS) * total;
                for c in 0..dc {
                    cbd[k * dc + c] = ema_sums[k * dc + c] / n;
                }
            }
        }
        let epoch_mse = recon_sum / data.len() as f64;
        log::debug!("vq epoch {}: recon mse {epoch_mse:.5}", curve.len());
        curve.push(epoch_mse);
    }
    model.train_losses = curve;
    Ok(model)
}

impl Projector for VqModel {
    fn kind(&self) -> ProjectorKind {
        ProjectorKind::Vq
    }

    fn code_shape(&self) -> Vec<usize> {
        vec![GRID, GRID]
    }

    fn project(&self, x: &Image) -> Result<Code> {
        if x.tensor().shape() != IMAGE_SHAPE {
            return Err(Error::invalid("image resolution mismatch"));
        }
        Ok(Code::Indices {
            rows: GRID,
            cols: GRID,
            codebook_size: self.codebook_size,
            indices: self.quantize(&self.encode(x)?),
        })
    }

    fn reconstruct(&self, code: &Code) -> Result<Image> {
        match code {
            Code::Indices {
                rows: GRID,
                cols: GRID,
                codebook_size,
                indices,
            } if *codebook_size == self.codebook_size => self.decode(&self.lookup(indices)?),
            other => Err(shape_mismatch(self.kind(), &self.code_shape(), other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn untrained() -> VqModel {
        let cfg = VqConfig::default();
        let mut r = rng::rng(9);
        let cb = Tensor::new(vec![64, 8], rng::normal_vec(&mut r, 512)).unwrap();
        VqModel::with_params(64, 8, cfg.commitment, init_params(&cfg), cb)
    }

    fn image(seed: u64) -> Image {
        let mut r = rng::rng(seed);
        let data = (0..3072).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect();
        Image::from_data(data).unwrap()
    }

    #[test]
    fn exact_codebook_vector_maps_to_its_index() {
        let m = untrained();
        for k in 0..64 {
            assert_eq!(m.nearest(m.codebook_row(k)), k);
        }
    }

    #[test]
    fn emitted_indices_are_exhaustive_nearest_neighbours() {
        let m = untrained();
        let z = m.encode(&image(1)).unwrap();
        let idx = m.quantize(&z);
        for (p, &k) in idx.iter().enumerate() {
            let v: Vec<f64> = (0..8).map(|c| z.data()[c * 64 + p]).collect();
            let dist = |j: usize| -> f64 { m.codebook_row(j).iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum() };
            assert!((0..64).all(|j| dist(k) <= dist(j)));
        }
    }

    #[test]
    fn straight_through_reaches_the_encoder() {
        let m = untrained();
        let out = m.loss_gradients(&image(2)).unwrap();
        for name in ["enc.conv0", "enc.conv1", "enc.proj"] {
            assert!(out.grads[name].sum_squares() > 0.0, "{name}");
        }
        assert!(out.grads["dec.rgb"].sum_squares() > 0.0);
    }

    #[test]
    fn lookup_rejects_out_of_range_index() {
        let m = untrained();
        let mut idx = vec![0; 64];
        idx[5] = 64;
        assert!(m.lookup(&idx).is_err());
        assert!(m.lookup(&idx[..10]).is_err());
    }

    #[test]
    fn training_lowers_reconstruction_error() {
        let data: Vec<Image> = (0..24).map(image).collect();
        let cfg = VqConfig {
            epochs: 3,
            batch_size: 8,
            ..VqConfig::default()
        };
        let m = vq_train(&data, &cfg).unwrap();
        let l = m.train_losses();
        assert_eq!(l.len(), 3);
        assert!(l[2] < l[0], "{l:?}");
        assert!(m.codebook().is_finite());
        assert!(vq_train(&[], &cfg).is_err());
    }
}
