use vemkd_tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Image sizes accepted by datasets and training runs.
pub const SUPPORTED_SIZES: [usize; 2] = [32, 64];

/// A batch of square images `[N, C, H, W]` with `C ∈ {1, 3}` and finite
/// entries. Values are expected in `[-1, 1]`.
///
/// Any square size is accepted here so micro models can be built for
/// gradient checks; [`ImageBatch::check_supported_size`] enforces the
/// dataset resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    tensor: Tensor<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 4 {
            return Err(Error::Contract(format!(
                "image batch must be rank 4, got shape {shape:?}"
            )));
        }
        if shape[1] != 1 && shape[1] != 3 {
            return Err(Error::Contract(format!(
                "image batch must have 1 or 3 channels, got {}",
                shape[1]
            )));
        }
        if shape[2] != shape[3] || shape[2] == 0 {
            return Err(Error::Contract(format!(
                "images must be square and non-empty, got {}x{}",
                shape[2], shape[3]
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::Contract("image batch contains non-finite values".into()));
        }
        Ok(Self { tensor })
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "{} values do not fill an image batch of shape {shape:?}",
                data.len()
            )));
        }
        Self::new(Tensor::new(&shape, data))
    }

    pub fn check_supported_size(&self) -> Result<()> {
        let s = self.size();
        if SUPPORTED_SIZES.contains(&s) {
            Ok(())
        } else {
            Err(Error::Contract(format!("image size {s} not in {SUPPORTED_SIZES:?}")))
        }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn batch(&self) -> usize {
        self.tensor.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.tensor.dim(1)
    }

    pub fn size(&self) -> usize {
        self.tensor.dim(2)
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn cast<U: Real>(&self) -> ImageBatch<U> {
        ImageBatch {
            tensor: self.tensor.cast(),
        }
    }

    pub fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }
}
