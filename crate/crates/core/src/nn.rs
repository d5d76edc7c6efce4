//! Initialisers and the Adam optimiser shared by the trainable networks.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::graph::ParamSet;
use crate::rng;
use crate::tensor::Tensor;

/// He-normal weights of the given shape for a layer with `fan_in` inputs.
pub fn he_normal(r: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let s = (2.0 / fan_in as f64).sqrt();
    Tensor::new(
        shape.to_vec(),
        rng::normal_vec(r, n).into_iter().map(|v| v * s).collect(),
    )
    .expect("shape")
}

/// Conv kernel `[out, in, k, k]` with He scaling.
pub fn conv_kernel(r: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> Tensor {
    he_normal(r, &[out, inp, k, k], inp * k * k)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Adds `src` into `acc`, creating entries on first use.
pub fn accumulate(acc: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>) {
    for (k, g) in src {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}
