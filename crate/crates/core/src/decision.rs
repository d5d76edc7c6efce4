//! Prior-weighted error `J`, the likelihood-ratio criterion `F`, histogram
//! densities for low-dimensional checks, and score thresholding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::Label;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pi_m: f64,
}

impl Priors {
    /// `pi_m` is the prior proportion of fakes, in `(0, 1)`.
    pub fn new(pi_m: f64) -> Result<Self> {
        if !(pi_m > 0.0 && pi_m < 1.0) {
            return Err(Error::invalid(format!("pi_m must be in (0, 1), got {pi_m}")));
        }
        Ok(Self { pi_m })
    }

    /// Proportion of fakes among `labels`.
    pub fn from_labels(labels: &[Label]) -> Result<Self> {
        let fakes = labels.iter().filter(|l| l.is_fake()).count();
        Self::new(fakes as f64 / labels.len().max(1) as f64)
    }

    pub fn pi_m(&self) -> f64 {
        self.pi_m
    }

    pub fn pi_g(&self) -> f64 {
        1.0 - self.pi_m
    }

    /// `pi_g / pi_m`
    pub fn odds(&self) -> f64 {
        self.pi_g() / self.pi_m
    }
}

/// Equal-width bins over an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bins: usize,
}

impl Support {
    /// Smallest box covering every sample, padded by `pad` of its width on
    /// each side. A degenerate axis is widened to unit width.
    pub fn covering(sets: &[&[Vec<f64>]], bins: usize, pad: f64) -> Result<Self> {
        let first = sets
            .iter()
            .find_map(|s| s.first())
            .ok_or_else(|| Error::invalid("density fit needs at least one sample"))?;
        let dim = first.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::invalid(format!(
                "densities are limited to 1 or 2 dimensions, got {dim}"
            )));
        }
        if bins == 0 {
            return Err(Error::invalid("bins must be positive"));
        }
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in sets.iter().flat_map(|s| s.iter()) {
            if p.len() != dim || p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("samples must be finite and share one dimension"));
            }
            for k in 0..dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        for k in 0..dim {
            let w = hi[k] - lo[k];
            if w > 0.0 {
                lo[k] -= pad * w;
                hi[k] += pad * w;
            } else {
                lo[k] -= 0.5;
                hi[k] += 0.5;
            }
        }
        Ok(Self { lo, hi, bins })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, k: usize) -> f64 {
        (self.hi[k] - self.lo[k]) / self.bins as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.width(k)).product()
    }

    /// Bin edges of axis `k`.
    pub fn edges(&self, k: usize) -> Vec<f64> {
        (0..=self.bins).map(|i| self.lo[k] + i as f64 * self.width(k)).collect()
    }

    fn axis_bin(&self, k: usize, v: f64) -> Option<usize> {
        if !(v >= self.lo[k] && v <= self.hi[k]) {
            return None;
        }
        let b = ((v - self.lo[k]) / self.width(k)).floor() as usize;
        Some(b.min(self.bins - 1))
    }

    /// Flat cell index of `x`, `None` outside the box.
    pub fn cell(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut idx = 0;
        for (k, &v) in x.iter().enumerate() {
            idx = idx * self.bins + self.axis_bin(k, v)?;
        }
        Some(idx)
    }
}

/// Piecewise-constant density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    pub support: Support,
    /// Density value of every cell, row-major over axes.
    pub density: Vec<f64>,
}

impl DensityModel {
    /// Density at `x`; zero outside the support.
    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.support.cell(x).map_or(0.0, |c| self.density[c])
    }

    /// Integral of the density over the support.
    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.support.cell_volume()
    }
}

/// Normalised histogram over the sample range padded by 5 %.
pub fn fit_density_histogram(samples: &[Vec<f64>], bins: usize) -> Result<DensityModel> {
    let support = Support::covering(&[samples], bins, 0.05)?;
    fit_density_histogram_on(samples, &support)
}

/// Normalised histogram on a given support; samples outside it are ignored.
pub fn fit_density_histogram_on(samples: &[Vec<f64>], support: &Support) -> Result<DensityModel> {
    let cells = support.bins.pow(support.dim() as u32);
    let mut counts = vec![0.0; cells];
    let mut inside = 0usize;
    for p in samples {
        if let Some(c) = support.cell(p) {
            counts[c] += 1.0;
            inside += 1;
        }
    }
    if inside == 0 {
        return Err(Error::invalid("no sample falls inside the support"));
    }
    let norm = inside as f64 * support.cell_volume();
    Ok(DensityModel {
        support: support.clone(),
        density: counts.into_iter().map(|c| c / norm).collect(),
    })
}

/// `F(x) = p_m(x) / p_g(x) - pi_g / pi_m`; positive means fake. Returns
/// `+inf` where only the fake density is positive.
pub fn criterion_value(x: &[f64], p_m: &DensityModel, p_g: &DensityModel, priors: &Priors) -> Result<f64> {
    if p_m.support != p_g.support {
        return Err(Error::invalid("densities must share one support"));
    }
    let (m, g) = (p_m.pdf(x), p_g.pdf(x));
    match (m > 0.0, g > 0.0) {
        (_, true) => Ok(m / g - priors.odds()),
        (true, false) => Ok(f64::INFINITY),
        (false, false) => Err(Error::UndefinedPoint),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Decide fake when the statistic exceeds the threshold.
    FakeAbove,
    FakeBelow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub threshold: f64,
    pub orientation: Orientation,
}

impl DecisionRule {
    pub fn above(threshold: f64) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        Ok(Self {
            threshold,
            orientation: Orientation::FakeAbove,
        })
    }

    pub fn decide(&self, statistic: f64) -> Label {
        let fake = match self.orientation {
            Orientation::FakeAbove => statistic > self.threshold,
            Orientation::FakeBelow => statistic < self.threshold,
        };
        if fake {
            Label::Fake
        } else {
            Label::Genuine
        }
    }
}

/// `J = pi_g P(decide fake | genuine) + pi_m P(decide genuine | fake)`.
pub fn empirical_mean_error(rule: &DecisionRule, scores: &[f64], labels: &[Label], priors: &Priors) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let (mut ng, mut nm, mut false_alarm, mut miss) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let d = rule.decide(s);
        match l {
            Label::Genuine => {
                ng += 1;
                false_alarm += usize::from(d == Label::Fake);
            }
            Label::Fake => {
                nm += 1;
                miss += usize::from(d == Label::Genuine);
            }
        }
    }
    if ng == 0 || nm == 0 {
        return Err(Error::invalid("both classes must be present"));
    }
    Ok(priors.pi_g() * false_alarm as f64 / ng as f64 + priors.pi_m() * miss as f64 / nm as f64)
}

/// Score threshold realising the criterion for a score that approximates
/// `P(fake | x)`: decide fake iff `s / (1 - s) > pi_g / pi_m`, i.e. `s > pi_g`.
pub fn calibrate_threshold(priors: &Priors) -> DecisionRule {
    DecisionRule {
        threshold: priors.pi_g(),
        orientation: Orientation::FakeAbove,
    }
}

/// `J` of the rule "fake above `t`" under two 1-D histogram densities.
pub fn histogram_mean_error(t: f64, p_m: &DensityModel, p_g: &DensityModel, priors: &Priors) -> f64 {
    let s = &p_g.support;
    let w = s.width(0);
    let (mut above_g, mut below_m) = (0.0, 0.0);
    for (b, lo) in s.edges(0).into_iter().take(s.bins).enumerate() {
        let hi = lo + w;
        // length of the bin on each side of t
        let right = (hi - t.max(lo)).clamp(0.0, w);
        let left = w - right;
        above_g += p_g.density[b] * right;
        below_m += p_m.density[b] * left;
    }
    priors.pi_g() * above_g + priors.pi_m() * below_m
}

/// Point where a 1-D criterion `F` crosses zero from below, by linear
/// interpolation between bin centres. When noise produces several crossings
/// the one with the lowest histogram `J` is returned.
pub fn criterion_boundary(p_m: &DensityModel, p_g: &DensityModel, priors: &Priors) -> Result<f64> {
    let s = &p_g.support;
    if s.dim() != 1 || p_m.support != *s {
        return Err(Error::invalid("boundary search needs two 1-D densities on one support"));
    }
    let w = s.width(0);
    let centres: Vec<(f64, f64)> = (0..s.bins)
        .filter_map(|b| {
            let x = s.lo[0] + (b as f64 + 0.5) * w;
            criterion_value(&[x], p_m, p_g, priors).ok().map(|f| (x, f))
        })
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for pair in centres.windows(2) {
        let [(x0, f0), (x1, f1)] = [pair[0], pair[1]];
        if f0 <= 0.0 && f1 > 0.0 {
            let t = if f1.is_finite() {
                x0 + (x1 - x0) * (-f0) / (f1 - f0)
            } else {
                0.5 * (x0 + x1)
            };
            let j = histogram_mean_error(t, p_m, p_g, priors);
            if best.is_none_or(|(_, bj)| j < bj) {
                best = Some((t, j));
            }
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::invalid("criterion never crosses zero on the support"))
}
