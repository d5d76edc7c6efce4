//! Dimensionality reducers `P: R^{3 x 32 x 32} -> code`.

pub mod encoder;
pub mod inversion;
pub mod linalg;
pub mod pca;
pub mod vq;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::StyleCode;
use crate::image::Image;

pub use encoder::{train_encoder, EncoderConfig, EncoderModel};
pub use inversion::{GanProjector, InitKind, InversionConfig, InversionResult, Inverter};
pub use pca::{pca_fit_incremental, PcaModel};
pub use vq::{vq_train, VqConfig, VqModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    Pca,
    Vq,
    GanInversion,
    Identity,
}

impl ProjectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectorKind::Pca => "pca",
            ProjectorKind::Vq => "vq",
            ProjectorKind::GanInversion => "gan_inversion",
            ProjectorKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Self::Pca),
            "vq" => Ok(Self::Vq),
            "gan_inversion" => Ok(Self::GanInversion),
            "identity" => Ok(Self::Identity),
            other => Err(Error::invalid(format!("unknown projector kind `{other}`"))),
        }
    }
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Output of a projector.
#[derive(Clone, Debug, PartialEq)]
pub enum Code {
    Vector(Vec<f64>),
    /// Row-major grid of codebook indices in `[0, codebook_size)`.
    Indices {
        rows: usize,
        cols: usize,
        codebook_size: usize,
        indices: Vec<usize>,
    },
    Style(StyleCode),
}

impl Code {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Code::Vector(v) => vec![v.len()],
            Code::Indices { rows, cols, .. } => vec![*rows, *cols],
            Code::Style(s) => vec![s.channels(), s.dim()],
        }
    }

    /// Flattened real features for classifiers. Indices are scaled by `1/K`.
    pub fn features(&self) -> Vec<f64> {
        match self {
            Code::Vector(v) => v.clone(),
            Code::Indices {
                codebook_size, indices, ..
            } => indices.iter().map(|&i| i as f64 / *codebook_size as f64).collect(),
            Code::Style(s) => s.tensor().data().to_vec(),
        }
    }
}

pub trait Projector: Send + Sync {
    fn kind(&self) -> ProjectorKind;
    fn code_shape(&self) -> Vec<usize>;
    fn project(&self, x: &Image) -> Result<Code>;
    fn reconstruct(&self, code: &Code) -> Result<Image>;
}

/// Leaves the image untouched; the zero point of the reconstruction benchmark.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityProjector;

impl Projector for IdentityProjector {
    fn kind(&self) -> ProjectorKind {
        ProjectorKind::Identity
    }

    fn code_shape(&self) -> Vec<usize> {
        vec![crate::image::IMAGE_SHAPE.iter().product()]
    }

    fn project(&self, x: &Image) -> Result<Code> {
        Ok(Code::Vector(x.data().to_vec()))
    }

    fn reconstruct(&self, code: &Code) -> Result<Image> {
        match code {
            Code::Vector(v) => Image::from_data(v.clone()),
            _ => Err(Error::invalid("identity projector expects a vector code")),
        }
    }
}

pub(crate) fn shape_mismatch(kind: ProjectorKind, expected: &[usize], code: &Code) -> Error {
    Error::invalid(format!(
        "{kind} projector expects code shape {expected:?}, got {:?}",
        code.shape()
    ))
}
