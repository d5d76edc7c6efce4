//! Incremental PCA. Each batch is folded in by a thin SVD of the stacked
//! matrix `[diag(s) V^T; X_batch - mean_batch; mean correction]`, so a single
//! batch reproduces batch PCA exactly.

use super::linalg::{orthonormalize_rows, symmetric_eigen};
use super::{shape_mismatch, Code, Projector, ProjectorKind};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::image::{Image, IMAGE_SHAPE};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `k x d`, orthonormal rows.
    components: Vec<f64>,
    singular_values: Vec<f64>,
    explained_variance: Vec<f64>,
    n_components: usize,
    dim: usize,
    n_seen: usize,
}

/// Running state of an incremental fit.
#[derive(Clone, Debug)]
pub struct IncrementalPca {
    target: usize,
    dim: usize,
    n_seen: usize,
    mean: Vec<f64>,
    components: Vec<f64>,
    singular_values: Vec<f64>,
}

impl IncrementalPca {
    pub fn new(n_components: usize, dim: usize) -> Self {
        Self {
            target: n_components,
            dim,
            n_seen: 0,
            mean: vec![0.0; dim],
            components: Vec::new(),
            singular_values: Vec::new(),
        }
    }

    /// Folds one batch of row vectors in.
    pub fn partial_fit(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::invalid("empty PCA batch"));
        }
        let d = self.dim;
        if batch.iter().any(|r| r.len() != d) {
            return Err(Error::invalid(format!("PCA rows must have length {d}")));
        }
        let mut batch_mean = vec![0.0; d];
        for row in batch {
            for (m, v) in batch_mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        batch_mean.iter_mut().for_each(|m| *m /= b as f64);

        let n_old = self.n_seen as f64;
        let n_new = n_old + b as f64;
        let k_old = self.singular_values.len();
        let extra = usize::from(self.n_seen > 0);
        let rows = k_old + b + extra;
        let mut stacked = Vec::with_capacity(rows * d);
        for i in 0..k_old {
            let s = self.singular_values[i];
            stacked.extend(self.components[i * d..(i + 1) * d].iter().map(|v| v * s));
        }
        for row in batch {
            stacked.extend(row.iter().zip(&batch_mean).map(|(v, m)| v - m));
        }
        if extra == 1 {
            let f = (n_old * b as f64 / n_new).sqrt();
            stacked.extend(self.mean.iter().zip(&batch_mean).map(|(m, bm)| f * (m - bm)));
        }

        // thin SVD through the rows x rows Gram matrix
        let mut gram = vec![0.0; rows * rows];
        gemm(rows, d, rows, &stacked, false, &stacked, true, &mut gram, false);
        let (vals, vecs) = symmetric_eigen(&gram, rows);
        let floor = vals[0].max(0.0) * 1e-24;
        let keep = vals.iter().take(self.target).take_while(|&&v| v > floor).count();
        let mut comps = vec![0.0; keep * d];
        gemm(
            keep,
            rows,
            d,
            &vecs[..keep * rows],
            false,
            &stacked,
            false,
            &mut comps,
            false,
        );
        let mut sv = Vec::with_capacity(keep);
        for i in 0..keep {
            let s = vals[i].sqrt();
            comps[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= s);
            sv.push(s);
        }
        orthonormalize_rows(&mut comps, keep, d);
        // deterministic sign: largest-magnitude entry positive
        for i in 0..keep {
            let row = &mut comps[i * d..(i + 1) * d];
            let pivot = row
                .iter()
                .copied()
                .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if pivot < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
        }

        for (m, bm) in self.mean.iter_mut().zip(&batch_mean) {
            *m = (n_old * *m + b as f64 * bm) / n_new;
        }
        self.n_seen += b;
        self.components = comps;
        self.singular_values = sv;
        Ok(())
    }

    pub fn finish(self) -> Result<PcaModel> {
        if self.n_seen < self.target || self.singular_values.len() < self.target {
            return Err(Error::invalid(format!(
                "PCA with {} components needs at least that many samples of matching rank, got {} samples",
                self.target, self.n_seen
            )));
        }
        let denom = (self.n_seen as f64 - 1.0).max(1.0);
        let explained_variance = self.singular_values.iter().map(|s| s * s / denom).collect();
        Ok(PcaModel {
            mean: self.mean,
            components: self.components,
            singular_values: self.singular_values,
            explained_variance,
            n_components: self.target,
            dim: self.dim,
            n_seen: self.n_seen,
        })
    }
}

/// Fits `d_prime` components by streaming over `batches`.
pub fn pca_fit_incremental<'a, I>(batches: I, d_prime: usize) -> Result<PcaModel>
where
    I: IntoIterator<Item = &'a [Vec<f64>]>,
{
    if d_prime == 0 {
        return Err(Error::invalid("d_prime must be positive"));
    }
    let mut iter = batches.into_iter().peekable();
    let dim = iter
        .peek()
        .and_then(|b| b.first())
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("PCA needs at least one sample"))?;
    let mut fit = IncrementalPca::new(d_prime, dim);
    for batch in iter {
        fit.partial_fit(batch)?;
    }
    fit.finish()
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "PCA input must have length {}, got {}",
                self.dim,
                x.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut code = vec![0.0; self.n_components];
        gemm(
            self.n_components,
            self.dim,
            1,
            &self.components,
            false,
            &centered,
            false,
            &mut code,
            false,
        );
        Ok(code)
    }

    /// `mean + components^T code`, unclipped.
    pub fn inverse_transform(&self, code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != self.n_components {
            return Err(Error::invalid(format!(
                "PCA code must have length {}, got {}",
                self.n_components,
                code.len()
            )));
        }
        let mut out = self.mean.clone();
        gemm(
            1,
            self.n_components,
            self.dim,
            code,
            false,
            &self.components,
            false,
            &mut out,
            true,
        );
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "pca");
        c.set_meta("n_seen", &self.n_seen.to_string());
        c.push("mean", Tensor::from_vec(self.mean.clone()));
        c.push(
            "components",
            Tensor::new(vec![self.n_components, self.dim], self.components.clone()).expect("shape"),
        );
        c.push("singular_values", Tensor::from_vec(self.singular_values.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.require_meta("kind")? != "pca" {
            return Err(Error::Container("not a PCA container".into()));
        }
        let comps = c.require("components")?;
        let (k, d) = (comps.shape()[0], comps.shape()[1]);
        let n_seen: usize = c
            .require_meta("n_seen")?
            .parse()
            .map_err(|_| Error::Container("bad n_seen".into()))?;
        let singular_values = c.require("singular_values")?.data().to_vec();
        let denom = (n_seen as f64 - 1.0).max(1.0);
        Ok(Self {
            mean: c.require("mean")?.data().to_vec(),
            components: comps.data().to_vec(),
            explained_variance: singular_values.iter().map(|s| s * s / denom).collect(),
            singular_values,
            n_components: k,
            dim: d,
            n_seen,
        })
    }
}

impl Projector for PcaModel {
    fn kind(&self) -> ProjectorKind {
        ProjectorKind::Pca
    }

    fn code_shape(&self) -> Vec<usize> {
        vec![self.n_components]
    }

    fn project(&self, x: &Image) -> Result<Code> {
        Ok(Code::Vector(self.transform(x.data())?))
    }

    fn reconstruct(&self, code: &Code) -> Result<Image> {
        match code {
            Code::Vector(v) if v.len() == self.n_components && self.dim == IMAGE_SHAPE.iter().product::<usize>() => {
                Ok(Image::from_data(self.inverse_transform(v)?)?.clipped())
            }
            other => Err(shape_mismatch(self.kind(), &self.code_shape(), other)),
        }
    }
}
