//! Logistic regression and multilayer perceptrons trained by minibatch SGD
//! on binary cross-entropy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::TrainConfig;
use crate::error::Result;
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId, ParamSet};
use crate::nn::he_normal;
use crate::rng;
use crate::tensor::Tensor;

pub const MLP2_HIDDEN: [usize; 1] = [512];
pub const MLP5_HIDDEN: [usize; 4] = [2048, 512, 512, 512];

/// Fully connected network `d -> hidden... -> 1`; the output is a logit.
#[derive(Clone, Debug)]
pub struct DenseNet {
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    pub params: ParamSet,
    logits: Graph,
    logit_out: NodeId,
    train: Graph,
    loss: NodeId,
}

/// Loss history of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean minibatch loss per epoch.
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn logit_nodes(b: &mut GraphBuilder, n_layers: usize) -> NodeId {
    let mut h = b.input("x");
    for l in 0..n_layers {
        let w = b.param(&format!("w{l}"));
        let bias = b.param(&format!("b{l}"));
        h = b.matmul(h, w);
        h = b.add_row(h, bias);
        if l + 1 < n_layers {
            h = b.relu(h);
        }
    }
    h
}

impl DenseNet {
    pub fn from_params(input_dim: usize, hidden: Vec<usize>, params: ParamSet) -> Self {
        let n_layers = hidden.len() + 1;
        let mut b = GraphBuilder::new();
        let logit_out = logit_nodes(&mut b, n_layers);
        let logits = b.build();
        let mut b = GraphBuilder::new();
        let z = logit_nodes(&mut b, n_layers);
        let y = b.input("y");
        let loss = b.bce_with_logits(z, y);
        let train = b.build();
        Self {
            hidden,
            input_dim,
            params,
            logits,
            logit_out,
            train,
            loss,
        }
    }

    /// He-normal weights and zero biases; `zero` gives an all-zero network.
    pub fn init(input_dim: usize, hidden: &[usize], seed: u64, zero: bool) -> Self {
        let mut r = rng::rng(rng::derive(seed, "dense.init", 0));
        let mut p = ParamSet::new();
        let mut fan_in = input_dim;
        for (l, &width) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let w = if zero {
                Tensor::zeros(&[fan_in, width])
            } else {
                he_normal(&mut r, &[fan_in, width], fan_in)
            };
            p.insert(format!("w{l}"), w);
            p.insert(format!("b{l}"), Tensor::zeros(&[width]));
            fan_in = width;
        }
        Self::from_params(input_dim, hidden.to_vec(), p)
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Logits of a `[n, d]` batch.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let binds = Bindings::new().bind("x", x).bind_params(&self.params);
        Ok(self.logits.forward(&binds)?.get(self.logit_out).data().to_vec())
    }

    pub fn loss_graph(&self) -> (&Graph, NodeId) {
        (&self.train, self.loss)
    }

    fn batch_loss(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let binds = Bindings::new().bind("x", x).bind("y", y).bind_params(&self.params);
        Ok(self.train.forward(&binds)?.get(self.loss).item())
    }

    fn batch_gradient(&self, x: &Tensor, y: &Tensor) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let binds = Bindings::new().bind("x", x).bind("y", y).bind_params(&self.params);
        let names: Vec<&str> = self.params.names().collect();
        let g = self.train.gradient(&binds, self.loss, &names)?;
        Ok((g.value, g.grads))
    }
}

pub(crate) fn batch(x: &[Vec<f64>], y: &[bool], idx: &[usize]) -> (Tensor, Tensor) {
    let d = x[0].len();
    let xs = idx.iter().flat_map(|&i| x[i].iter().copied()).collect();
    let ys = idx.iter().map(|&i| f64::from(u8::from(y[i]))).collect();
    (
        Tensor::new(vec![idx.len(), d], xs).expect("shape"),
        Tensor::new(vec![idx.len(), 1], ys).expect("shape"),
    )
}

/// Minibatch SGD with optional momentum and early stopping on a held-out
/// slice of the training data. The parameters of the best validation epoch
/// are kept.
pub fn train_sgd(net: &mut DenseNet, x: &[Vec<f64>], y: &[bool], cfg: &TrainConfig) -> Result<TrainHistory> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::rng(rng::derive(cfg.seed, "sgd", 0));
    order.shuffle(&mut r);
    let n_val = (cfg.validation_fraction * n as f64).floor() as usize;
    let (val_idx, fit_idx) = if n_val >= 1 && n_val < n {
        let (v, f) = order.split_at(n_val);
        (v.to_vec(), f.to_vec())
    } else {
        (Vec::new(), order.clone())
    };
    let val = (!val_idx.is_empty()).then(|| batch(x, y, &val_idx));

    let mut velocity: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, net.params.clone(), 0usize);
    let mut fit_idx = fit_idx;
    for epoch in 0..cfg.epochs {
        fit_idx.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in fit_idx.chunks(cfg.batch_size) {
            let (bx, by) = batch(x, y, chunk);
            let (l, grads) = net.batch_gradient(&bx, &by)?;
            total += l;
            batches += 1;
            for (name, g) in grads {
                let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                v.scale_assign(cfg.momentum);
                v.axpy(1.0, &g);
                net.params
                    .get_mut(&name)
                    .expect("trained parameter")
                    .axpy(-cfg.learning_rate, v);
            }
        }
        history.train_loss.push(total / batches as f64);
        let Some((vx, vy)) = &val else { continue };
        let vl = net.batch_loss(vx, vy)?;
        history.validation_loss.push(vl);
        if vl < best.0 {
            best = (vl, net.params.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    if val.is_some() {
        net.params = best.1;
        history.best_epoch = best.2;
    } else {
        history.best_epoch = history.train_loss.len().saturating_sub(1);
    }
    Ok(history)
}
