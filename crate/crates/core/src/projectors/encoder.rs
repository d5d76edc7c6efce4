//! Image-to-code encoder used to initialise inversion.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::generator::{GeneratorModel, StyleCode};
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId, ParamSet};
use crate::image::{Image, IMAGE_CHANNELS};
use crate::nn::{accumulate, conv_kernel, he_normal, Adam};
use crate::rng;
use crate::tensor::Tensor;

const WIDTHS: [usize; 3] = [8, 16, 16];
// spatial extent after three 2x2 poolings of a 32x32 image
const FLAT: usize = 16 * 4 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_pairs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_pairs: 1000,
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

pub struct EncoderModel {
    channels: usize,
    w_dim: usize,
    params: ParamSet,
    graph: Graph,
    out: NodeId,
    train: Graph,
    loss: NodeId,
}

impl std::fmt::Debug for EncoderModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderModel")
            .field("channels", &self.channels)
            .field("w_dim", &self.w_dim)
            .finish_non_exhaustive()
    }
}

fn code_nodes(b: &mut GraphBuilder, channels: usize, w_dim: usize) -> NodeId {
    let mut h = b.input("x");
    for i in 0..WIDTHS.len() {
        let k = b.param(&format!("enc.conv{i}"));
        h = b.conv2d(h, k);
        let bias = b.param(&format!("enc.bias{i}"));
        h = b.shift_channels(h, bias);
        h = b.relu(h);
        h = b.avg_pool2(h);
    }
    let flat = b.reshape(h, &[1, FLAT]);
    let wd = b.param("enc.dense");
    let bd = b.param("enc.dense_b");
    let y = b.matmul(flat, wd);
    let y = b.add_row(y, bd);
    b.reshape(y, &[channels, w_dim])
}

impl EncoderModel {
    fn with_params(channels: usize, w_dim: usize, params: ParamSet) -> Self {
        let mut b = GraphBuilder::new();
        let out = code_nodes(&mut b, channels, w_dim);
        let graph = b.build();
        let mut b = GraphBuilder::new();
        let pred = code_nodes(&mut b, channels, w_dim);
        let target = b.input("target");
        let loss = b.mse(pred, target);
        Self {
            channels,
            w_dim,
            params,
            graph,
            out,
            train: b.build(),
            loss,
        }
    }

    fn init(channels: usize, w_dim: usize, mean: &StyleCode, seed: u64) -> Self {
        let mut r = rng::rng(rng::derive(seed, "encoder.init", 0));
        let mut p = ParamSet::new();
        let mut inp = IMAGE_CHANNELS;
        for (i, &wd) in WIDTHS.iter().enumerate() {
            p.insert(format!("enc.conv{i}"), conv_kernel(&mut r, wd, inp, 3));
            p.insert(format!("enc.bias{i}"), Tensor::zeros(&[wd]));
            inp = wd;
        }
        p.insert(
            "enc.dense",
            he_normal(&mut r, &[FLAT, channels * w_dim], FLAT).map(|v| 0.1 * v),
        );
        // start from the mean-code predictor
        p.insert("enc.dense_b", Tensor::from_vec(mean.tensor().data().to_vec()));
        Self::with_params(channels, w_dim, p)
    }

    pub fn code_shape(&self) -> [usize; 2] {
        [self.channels, self.w_dim]
    }

    pub fn encode(&self, x: &Image) -> Result<StyleCode> {
        let binds = Bindings::new().bind("x", x.tensor()).bind_params(&self.params);
        let ev = self.graph.forward(&binds)?;
        StyleCode::new(ev.get(self.out).clone())
    }

    fn loss_gradients(&self, x: &Image, w: &StyleCode) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let binds = Bindings::new()
            .bind("x", x.tensor())
            .bind("target", w.tensor())
            .bind_params(&self.params);
        let names: Vec<&str> = self.params.names().collect();
        let g = self.train.gradient(&binds, self.loss, &names)?;
        Ok((g.value, g.grads))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "encoder");
        c.set_meta("channels", &self.channels.to_string());
        c.set_meta("w_dim", &self.w_dim.to_string());
        c.push_params("", &self.params);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.require_meta("kind")? != "encoder" {
            return Err(Error::Container("not an encoder container".into()));
        }
        let parse = |k: &str| -> Result<usize> {
            c.require_meta(k)?
                .parse()
                .map_err(|_| Error::Container(format!("bad `{k}`")))
        };
        Ok(Self::with_params(parse("channels")?, parse("w_dim")?, c.params("")))
    }
}

/// `n_pairs` generator samples `(G(w), w)` drawn from the stream labelled
/// `label` under `seed`.
pub fn generator_pairs(g: &GeneratorModel, n: usize, seed: u64, label: &str) -> Result<Vec<(Image, StyleCode)>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let w = g.map(&g.sample_z(rng::derive(seed, label, i as u64)))?;
            Ok((g.synthesize(&w)?, w))
        })
        .collect()
}

/// Fits the encoder by regression of `w` on `G(w)` with Adam.
pub fn train_encoder(g: &GeneratorModel, cfg: &EncoderConfig) -> Result<EncoderModel> {
    if cfg.n_pairs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("encoder training needs positive n_pairs and batch_size"));
    }
    let pairs = generator_pairs(g, cfg.n_pairs, cfg.seed, "encoder.pairs")?;
    let [c, d] = g.code_shape();
    let mut mean = vec![0.0; c * d];
    for (_, w) in &pairs {
        for (m, v) in mean.iter_mut().zip(w.tensor().data()) {
            *m += v / pairs.len() as f64;
        }
    }
    let mean = StyleCode::new(Tensor::new(vec![c, d], mean)?)?;
    let mut model = EncoderModel::init(c, d, &mean, cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut r = rng::rng(rng::derive(cfg.seed, "encoder.shuffle", 0));
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let outs: Vec<(f64, BTreeMap<String, Tensor>)> = batch
                .par_iter()
                .map(|&i| model.loss_gradients(&pairs[i].0, &pairs[i].1))
                .collect::<Result<_>>()?;
            let mut grads = BTreeMap::new();
            for (l, g) in outs {
                total += l;
                accumulate(&mut grads, g);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.values_mut().for_each(|g| g.scale_assign(inv));
            opt.step(&mut model.params, &grads);
        }
        log::debug!("encoder epoch {epoch}: mse {:.5}", total / pairs.len() as f64);
    }
    Ok(model)
}
