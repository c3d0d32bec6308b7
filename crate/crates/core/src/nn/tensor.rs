use crate::error::{Error, Result};

/// Dense f64 tensor. Spatial feature maps use the shape `[channels, nx, ny, nz]`
/// with x fastest in memory, matching [`crate::volume::Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                what: "tensor buffer",
                left: vec![data.len()],
                right: shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Stacks single-channel fields into a `[c, nx, ny, nz]` tensor.
    pub fn from_channels(dims: [usize; 3], channels: &[&[f32]]) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        let mut data = Vec::with_capacity(n * channels.len());
        for ch in channels {
            if ch.len() != n {
                return Err(Error::ShapeMismatch {
                    what: "channel length",
                    left: vec![ch.len()],
                    right: dims.to_vec(),
                });
            }
            data.extend(ch.iter().map(|&v| v as f64));
        }
        Ok(Self {
            shape: vec![channels.len(), dims[0], dims[1], dims[2]],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn is_spatial(&self) -> bool {
        self.shape.len() == 4
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
