//! Synthetic benchmark: genuine images are generator samples plus sensor
//! noise, fakes are splices or style swaps of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::digest::json_hash;
use crate::error::{Error, Result};
use crate::generator::{GeneratorModel, StyleCode};
use crate::image::{Image, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::rng;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const PACKED_FILE: &str = "images.lfl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Genuine,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Genuine => "genuine",
            Label::Fake => "fake",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "genuine" => Ok(Label::Genuine),
            "fake" => Ok(Label::Fake),
            other => Err(Error::invalid(format!("unknown label `{other}`"))),
        }
    }

    /// Fake is the positive class.
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: Label,
    pub source_id: u64,
    /// Hash of the parameters that produced the image.
    pub params_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryMethod {
    Splice,
    StyleSwap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeryParams {
    pub method: ForgeryMethod,
    /// Disk radius as a fraction of the image width.
    pub mask_radius: f64,
    /// Width of the linear blending ramp outside the disk, same unit.
    pub feather: f64,
    pub swap_channels: Vec<usize>,
    /// Donor latents are drawn as `donor_scale * z`.
    pub donor_scale: f64,
}

impl Default for ForgeryParams {
    fn default() -> Self {
        Self {
            method: ForgeryMethod::Splice,
            mask_radius: 0.25,
            feather: 0.05,
            swap_channels: vec![2, 3],
            donor_scale: 0.5,
        }
    }
}

impl ForgeryParams {
    pub fn splice(mask_radius: f64, feather: f64) -> Self {
        Self {
            method: ForgeryMethod::Splice,
            mask_radius,
            feather,
            ..Self::default()
        }
    }

    pub fn style_swap(channels: Vec<usize>) -> Self {
        Self {
            method: ForgeryMethod::StyleSwap,
            swap_channels: channels,
            ..Self::default()
        }
    }

    pub fn validate(&self, channels: usize) -> std::result::Result<(), (String, String)> {
        if !(self.mask_radius > 0.0 && self.mask_radius <= 0.5) {
            return Err(("mask_radius".into(), "must be in (0, 0.5]".into()));
        }
        if !(0.0..=0.25).contains(&self.feather) {
            return Err(("feather".into(), "must be in [0, 0.25]".into()));
        }
        if !(self.donor_scale >= 0.0 && self.donor_scale.is_finite()) {
            return Err(("donor_scale".into(), "must be finite and >= 0".into()));
        }
        if self.method == ForgeryMethod::StyleSwap {
            if self.swap_channels.is_empty() {
                return Err(("swap_channels".into(), "style_swap needs at least one channel".into()));
            }
            if let Some(c) = self.swap_channels.iter().find(|&&c| c >= channels) {
                return Err(("swap_channels".into(), format!("channel {c} outside [0, {channels})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationParams {
    pub noise_sigma: f64,
    /// 100 leaves the DCT coefficients untouched.
    pub compression_quality: u32,
}

impl Default for PerturbationParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.02,
            compression_quality: 100,
        }
    }
}

impl PerturbationParams {
    pub fn noise(noise_sigma: f64) -> Self {
        Self {
            noise_sigma,
            compression_quality: 100,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(("noise_sigma".into(), "must be finite and >= 0".into()));
        }
        if !(1..=100).contains(&self.compression_quality) {
            return Err(("compression_quality".into(), "must be in [1, 100]".into()));
        }
        Ok(())
    }
}

fn invalid_param(prefix: &str, (key, message): (String, String)) -> Error {
    Error::invalid(format!("{prefix}.{key}: {message}"))
}

const BLOCK: usize = 8;
// quantisation step of the DC coefficient per unit of (101 - quality)
const BASE_STEP: f64 = 0.004;

fn dct_matrix() -> [[f64; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 {
            (1.0 / BLOCK as f64).sqrt()
        } else {
            (2.0 / BLOCK as f64).sqrt()
        };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * BLOCK) as f64).cos();
        }
    }
    m
}

/// Quantises the orthonormal 8x8 block DCT of every channel in place.
fn block_dct_quantize(data: &mut [f64], quality: u32) {
    let d = dct_matrix();
    let scale = BASE_STEP * (101 - quality) as f64;
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for ch in 0..IMAGE_CHANNELS {
        let px = &mut data[ch * plane..(ch + 1) * plane];
        for by in (0..IMAGE_SIZE).step_by(BLOCK) {
            for bx in (0..IMAGE_SIZE).step_by(BLOCK) {
                let mut block = [[0.0; BLOCK]; BLOCK];
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        block[y][x] = px[(by + y) * IMAGE_SIZE + bx + x];
                    }
                }
                // C = D B D^T
                let mut tmp = [[0.0; BLOCK]; BLOCK];
                let mut coef = [[0.0; BLOCK]; BLOCK];
                for u in 0..BLOCK {
                    for x in 0..BLOCK {
                        tmp[u][x] = (0..BLOCK).map(|y| d[u][y] * block[y][x]).sum();
                    }
                }
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let c: f64 = (0..BLOCK).map(|x| tmp[u][x] * d[v][x]).sum();
                        // coarser steps for higher frequencies
                        let step = scale * (1.0 + (u + v) as f64 / 2.0);
                        coef[u][v] = (c / step).round() * step;
                    }
                }
                // B = D^T C D
                for y in 0..BLOCK {
                    for v in 0..BLOCK {
                        tmp[y][v] = (0..BLOCK).map(|u| d[u][y] * coef[u][v]).sum();
                    }
                }
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        px[(by + y) * IMAGE_SIZE + bx + x] = (0..BLOCK).map(|v| tmp[y][v] * d[v][x]).sum();
                    }
                }
            }
        }
    }
}

/// Gaussian noise followed by block-DCT quantisation, clipped to `[0, 1]`.
pub fn perturb(image: &Image, params: &PerturbationParams, seed: u64) -> Result<Image> {
    params.validate().map_err(|e| invalid_param("perturbation", e))?;
    let mut data = image.data().to_vec();
    if params.noise_sigma > 0.0 {
        let noise = rng::normal_vec(&mut rng::rng(seed), data.len());
        for (v, n) in data.iter_mut().zip(noise) {
            *v += params.noise_sigma * n;
        }
    }
    if params.compression_quality < 100 {
        block_dct_quantize(&mut data, params.compression_quality);
    }
    Ok(Image::from_data(data)?.clipped())
}

/// Identity `i` of a dataset seed; shared by genuines and the bases of fakes.
fn identity_code(g: &GeneratorModel, seed: u64, i: u64) -> Result<StyleCode> {
    g.map(&g.sample_z(rng::derive(seed, "identity", i)))
}

fn donor_code(g: &GeneratorModel, seed: u64, i: u64, scale: f64) -> Result<StyleCode> {
    g.map(&g.sample_z(rng::derive(seed, "donor", i)).scaled(scale))
}

#[derive(Serialize)]
struct GenuineTag<'a> {
    kind: &'a str,
    perturbation: &'a PerturbationParams,
}

#[derive(Serialize)]
struct FakeTag<'a> {
    kind: &'a str,
    forgery: &'a ForgeryParams,
    perturbation: &'a PerturbationParams,
}

pub fn genuine_sample(g: &GeneratorModel, i: u64, pert: &PerturbationParams, seed: u64) -> Result<LabeledImage> {
    let clean = g.synthesize(&identity_code(g, seed, i)?)?;
    Ok(LabeledImage {
        image: perturb(&clean, pert, rng::derive(seed, "genuine.noise", i))?,
        label: Label::Genuine,
        source_id: i,
        params_hash: json_hash(&GenuineTag {
            kind: "genuine",
            perturbation: pert,
        }),
    })
}

/// Blend weight of the donor at pixel `(y, x)`.
pub fn splice_mask(y: usize, x: usize, radius: f64, feather: f64) -> f64 {
    let c = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() / IMAGE_SIZE as f64;
    if r <= radius {
        1.0
    } else if feather > 0.0 && r < radius + feather {
        (radius + feather - r) / feather
    } else {
        0.0
    }
}

pub fn splice(base: &Image, donor: &Image, radius: f64, feather: f64) -> Result<Image> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut out = base.data().to_vec();
    for ch in 0..IMAGE_CHANNELS {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let m = splice_mask(y, x, radius, feather);
                if m > 0.0 {
                    let k = ch * plane + y * IMAGE_SIZE + x;
                    out[k] = m * donor.data()[k] + (1.0 - m) * out[k];
                }
            }
        }
    }
    Image::from_data(out)
}

/// Base code with `channels` replaced by the donor's rows.
pub fn swap_style(base: &StyleCode, donor: &StyleCode, channels: &[usize]) -> Result<StyleCode> {
    if base.tensor().shape() != donor.tensor().shape() {
        return Err(Error::invalid("style codes differ in shape"));
    }
    let mut out = base.clone();
    for &c in channels {
        if c >= base.channels() {
            return Err(Error::invalid(format!(
                "swap channel {c} outside [0, {})",
                base.channels()
            )));
        }
        out.row_mut(c).copy_from_slice(donor.row(c));
    }
    Ok(out)
}

/// Tag stored in `params_hash` of every fake made with these parameters.
pub fn fake_params_hash(forgery: &ForgeryParams, pert: &PerturbationParams) -> String {
    json_hash(&FakeTag {
        kind: "fake",
        forgery,
        perturbation: pert,
    })
}

pub fn fake_sample(
    g: &GeneratorModel,
    i: u64,
    forgery: &ForgeryParams,
    pert: &PerturbationParams,
    seed: u64,
) -> Result<LabeledImage> {
    forgery
        .validate(g.channels())
        .map_err(|e| invalid_param("forgery", e))?;
    let base = identity_code(g, seed, i)?;
    let donor = donor_code(g, seed, i, forgery.donor_scale)?;
    let clean = match forgery.method {
        ForgeryMethod::Splice => splice(
            &g.synthesize(&base)?,
            &g.synthesize(&donor)?,
            forgery.mask_radius,
            forgery.feather,
        )?,
        ForgeryMethod::StyleSwap => g.synthesize(&swap_style(&base, &donor, &forgery.swap_channels)?)?,
    };
    Ok(LabeledImage {
        image: perturb(&clean, pert, rng::derive(seed, "fake.noise", i))?,
        label: Label::Fake,
        source_id: i,
        params_hash: fake_params_hash(forgery, pert),
    })
}

/// `n` genuine images with source ids `0..n`.
pub fn generate_genuine(g: &GeneratorModel, n: usize, noise_sigma: f64, seed: u64) -> Result<Vec<LabeledImage>> {
    generate_genuine_with(g, n, &PerturbationParams::noise(noise_sigma), seed)
}

pub fn generate_genuine_with(
    g: &GeneratorModel,
    n: usize,
    pert: &PerturbationParams,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    (0..n as u64)
        .into_par_iter()
        .map(|i| genuine_sample(g, i, pert, seed))
        .collect()
}

/// `n` fakes whose bases are identities `0..n` of the same seed.
pub fn generate_fake(
    g: &GeneratorModel,
    n: usize,
    params: &ForgeryParams,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    generate_fake_with(
        g,
        n,
        std::slice::from_ref(params),
        &PerturbationParams::noise(noise_sigma),
        seed,
    )
}

/// Fake `i` uses `forgeries[i % forgeries.len()]`.
pub fn generate_fake_with(
    g: &GeneratorModel,
    n: usize,
    forgeries: &[ForgeryParams],
    pert: &PerturbationParams,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    if forgeries.is_empty() {
        return Err(Error::invalid("at least one forgery method is required"));
    }
    for f in forgeries {
        f.validate(g.channels()).map_err(|e| invalid_param("forgery", e))?;
    }
    (0..n as u64)
        .into_par_iter()
        .map(|i| fake_sample(g, i, &forgeries[i as usize % forgeries.len()], pert, seed))
        .collect()
}

/// Splits by source id: every source lands wholly on one side. The train side
/// receives `floor(fraction * sources)` sources, clamped so both sides are
/// non-empty.
pub fn split_dataset(
    data: &[LabeledImage],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let sources: Vec<u64> = data.iter().map(|d| d.source_id).collect();
    let (train, test) = split_indices(&sources, train_fraction, seed)?;
    Ok((
        train.iter().map(|&i| data[i].clone()).collect(),
        test.iter().map(|&i| data[i].clone()).collect(),
    ))
}

/// Index form of [`split_dataset`]; both index lists are ascending.
pub fn split_indices(source_ids: &[u64], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction must be in (0, 1)"));
    }
    let sources: BTreeSet<u64> = source_ids.iter().copied().collect();
    if sources.len() < 2 {
        return Err(Error::invalid("splitting needs at least two distinct source ids"));
    }
    let mut ids: Vec<u64> = sources.into_iter().collect();
    ids.shuffle(&mut rng::rng(rng::derive(seed, "split", 0)));
    // the epsilon keeps fractions like 5/7 from rounding one source short
    let n_train = ((train_fraction * ids.len() as f64 + 1e-9).floor() as usize).clamp(1, ids.len() - 1);
    let train_ids: BTreeSet<u64> = ids[..n_train].iter().copied().collect();
    Ok((0..source_ids.len()).partition(|&i| train_ids.contains(&source_ids[i])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageLayout {
    /// One container holding every image.
    Packed,
    /// One container file per image under `images/`.
    PerImage,
}

fn record_name(i: usize, d: &LabeledImage) -> String {
    format!("{}_{i:05}", d.label)
}

/// Writes the manifest and images into `dir`. `meta` pairs become `# key value`
/// manifest comments and container metadata.
pub fn write_dataset(dir: &Path, data: &[LabeledImage], layout: StorageLayout, meta: &[(&str, &str)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut packed = Container::new();
    for (k, v) in meta {
        manifest.push_str(&format!("# {k} {v}\n"));
        packed.set_meta(k, v);
    }
    if layout == StorageLayout::PerImage {
        fs::create_dir_all(dir.join("images"))?;
    }
    for (i, d) in data.iter().enumerate() {
        let name = record_name(i, d);
        let path = match layout {
            StorageLayout::Packed => {
                packed.push(name.clone(), d.image.tensor().clone());
                format!("{PACKED_FILE}#{name}")
            }
            StorageLayout::PerImage => {
                let rel = format!("images/{name}.lfl");
                let mut c = Container::new();
                for (k, v) in meta {
                    c.set_meta(k, v);
                }
                c.push("image", d.image.tensor().clone());
                c.save(&dir.join(&rel))?;
                rel
            }
        };
        manifest.push_str(&format!("{path}\t{}\t{}\t{}\n", d.label, d.source_id, d.params_hash));
    }
    if layout == StorageLayout::Packed {
        packed.save(&dir.join(PACKED_FILE))?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// The `# key value` comments of a dataset manifest.
pub fn read_dataset_meta(dir: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(text
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once(' '))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// Reads a dataset written by [`write_dataset`]. Lines starting with `#` are
/// ignored.
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut packed: Option<Container> = None;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::invalid(format!("manifest line {}: malformed record", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, label, source, hash] = fields[..] else {
            return Err(bad());
        };
        let tensor: Tensor = match path.split_once('#') {
            Some((file, record)) => {
                if packed.is_none() {
                    packed = Some(Container::load(&dir.join(file))?);
                }
                packed.as_ref().expect("loaded").require(record)?.clone()
            }
            None => Container::load(&dir.join(path))?.require("image")?.clone(),
        };
        out.push(LabeledImage {
            image: Image::new(tensor)?,
            label: Label::parse(label)?,
            source_id: source.parse().map_err(|_| bad())?,
            params_hash: hash.to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    fn g() -> GeneratorModel {
        GeneratorModel::new(GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn zero_noise_genuine_is_exactly_on_manifold() {
        let g = g();
        let data = generate_genuine(&g, 3, 0.0, 4).unwrap();
        for d in &data {
            let clean = g.synthesize(&identity_code(&g, 4, d.source_id).unwrap()).unwrap();
            assert_eq!(d.image, clean);
            assert_eq!(d.label, Label::Genuine);
        }
        assert_eq!(data.iter().map(|d| d.source_id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn tiny_mask_splice_is_the_base_image() {
        let g = g();
        let p = ForgeryParams::splice(0.01, 0.0);
        let fakes = generate_fake(&g, 2, &p, 0.0, 1).unwrap();
        let genuine = generate_genuine(&g, 2, 0.0, 1).unwrap();
        for (f, r) in fakes.iter().zip(&genuine) {
            assert_eq!(f.image, r.image);
            assert_eq!(f.source_id, r.source_id);
        }
    }

    #[test]
    fn style_swap_validation_and_full_swap() {
        let g = g();
        assert!(generate_fake(&g, 1, &ForgeryParams::style_swap(vec![]), 0.0, 1).is_err());
        assert!(generate_fake(&g, 1, &ForgeryParams::style_swap(vec![6]), 0.0, 1).is_err());
        let p = ForgeryParams::style_swap((0..6).collect());
        let fake = &generate_fake(&g, 1, &p, 0.0, 3).unwrap()[0];
        let donor = g.synthesize(&donor_code(&g, 3, 0, p.donor_scale).unwrap()).unwrap();
        assert_eq!(fake.image, donor);
    }

    #[test]
    fn mask_profile() {
        assert_eq!(splice_mask(16, 16, 0.25, 0.05), 1.0);
        assert_eq!(splice_mask(0, 0, 0.25, 0.05), 0.0);
        // centre of the ramp: distance 0.275 of the width from the centre
        let x = (15.5 + 0.275 * 32.0) as usize;
        let m = splice_mask(16, x, 0.25, 0.05);
        assert!(m > 0.0 && m < 1.0, "{m}");
    }

    #[test]
    fn quality_100_without_noise_is_identity() {
        let img = g().synthesize(&identity_code(&g(), 0, 0).unwrap()).unwrap();
        let out = perturb(
            &img,
            &PerturbationParams {
                noise_sigma: 0.0,
                compression_quality: 100,
            },
            0,
        )
        .unwrap();
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    #[test]
    fn dct_round_trip_without_quantisation_error() {
        let d = dct_matrix();
        for i in 0..BLOCK {
            for j in 0..BLOCK {
                let dot: f64 = (0..BLOCK).map(|k| d[i][k] * d[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heavy_noise_stays_in_range() {
        let img = g().synthesize(&identity_code(&g(), 0, 1).unwrap()).unwrap();
        let out = perturb(
            &img,
            &PerturbationParams {
                noise_sigma: 0.5,
                compression_quality: 30,
            },
            9,
        )
        .unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(perturb(
            &img,
            &PerturbationParams {
                noise_sigma: 0.0,
                compression_quality: 0
            },
            0
        )
        .is_err());
    }

    fn toy(sources: &[u64]) -> Vec<LabeledImage> {
        sources
            .iter()
            .map(|&s| LabeledImage {
                image: Image::from_data(vec![0.5; 3072]).unwrap(),
                label: if s % 2 == 0 { Label::Genuine } else { Label::Fake },
                source_id: s,
                params_hash: String::new(),
            })
            .collect()
    }

    #[test]
    fn split_cases() {
        let (tr, te) = split_dataset(&toy(&[3, 8]), 0.5, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
        assert!(split_dataset(&toy(&[1, 1, 1]), 0.5, 0).is_err());
        assert!(split_dataset(&toy(&[1, 2]), 1.0, 0).is_err());
        let ids: Vec<u64> = (0..100).collect();
        let (tr, te) = split_dataset(&toy(&ids), 0.8, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (80, 20));
    }
}
