use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_SHAPE: [usize; 3] = [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE];

/// Aligned face raster: channels-first, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape() != IMAGE_SHAPE {
            return Err(Error::invalid(format!(
                "image must be {IMAGE_SHAPE:?}, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn from_data(data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(IMAGE_SHAPE.to_vec(), data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn mse(&self, other: &Image) -> f64 {
        self.0.mse(&other.0)
    }

    pub fn clipped(mut self) -> Self {
        self.0.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }
}
