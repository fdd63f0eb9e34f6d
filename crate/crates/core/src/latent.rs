use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::tensor_io::{self, StoredTensor};

/// A clip in latent space, `frames × channels × height × width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentVideo {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let [frames, channels, height, width] = dims;
        if dims.contains(&0) {
            return Err(Error::shape(format!(
                "latent dims must be positive, got {dims:?}"
            )));
        }
        if frames * channels * height * width != data.len() {
            return Err(Error::shape(format!(
                "latent dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite latent entry at {i}")));
        }
        Ok(Self {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    pub fn index(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(f, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(f, c, y, x);
        self.data[i] = v;
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    /// Single-frame clip holding a copy of frame `f`.
    pub fn frame_clip(&self, f: usize) -> LatentVideo {
        LatentVideo {
            frames: 1,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.frame(f).to_vec(),
        }
    }

    /// Concatenates clips along the temporal axis.
    pub fn concat_frames(parts: &[&LatentVideo]) -> Result<LatentVideo> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero clips"))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.channels != first.channels || p.height != first.height || p.width != first.width {
                return Err(Error::shape(format!(
                    "cannot concat {:?} with {:?}",
                    p.dims(),
                    first.dims()
                )));
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        Ok(LatentVideo {
            frames,
            channels: first.channels,
            height: first.height,
            width: first.width,
            data,
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, self.dims().to_vec(), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 4 {
            return Err(Error::shape(format!("expected a 4-d tensor, got {dims:?}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec([dims[0], dims[1], dims[2], dims[3]], data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stored = StoredTensor::new(self.dims().to_vec(), self.data.clone())?;
        tensor_io::write_tensor(path, &stored)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = tensor_io::read_tensor(path)?;
        if t.dims.len() != 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("latent video needs 4 dims, found {:?}", t.dims),
            });
        }
        Self::from_vec([t.dims[0], t.dims[1], t.dims[2], t.dims[3]], t.data)
    }

    /// Mean over consecutive frame pairs of the L2 norm of their difference.
    pub fn mean_frame_difference(&self) -> f64 {
        if self.frames < 2 {
            return 0.0;
        }
        let total: f64 = (1..self.frames)
            .map(|f| l2_distance(self.frame(f), self.frame(f - 1)))
            .sum();
        total / (self.frames - 1) as f64
    }

    /// Mean L2 norm of the discrete second temporal difference.
    pub fn mean_second_difference(&self) -> f64 {
        if self.frames < 3 {
            return 0.0;
        }
        let total: f64 = (2..self.frames)
            .map(|f| {
                let (a, b, c) = (self.frame(f), self.frame(f - 1), self.frame(f - 2));
                a.iter()
                    .zip(b)
                    .zip(c)
                    .map(|((&a, &b), &c)| {
                        let d = a as f64 - 2.0 * b as f64 + c as f64;
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total / (self.frames - 2) as f64
    }
}

fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dims_and_nan() {
        assert!(LatentVideo::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(LatentVideo::from_vec([0, 1, 2, 2], vec![]).is_err());
        assert!(LatentVideo::from_vec([1, 1, 1, 1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn motion_proxies() {
        let mut v = LatentVideo::zeros(3, 1, 1, 2);
        assert_eq!(v.mean_frame_difference(), 0.0);
        // frame values 0, (3,4), (6,8): steps of length 5, zero acceleration
        v.set(1, 0, 0, 0, 3.0);
        v.set(1, 0, 0, 1, 4.0);
        v.set(2, 0, 0, 0, 6.0);
        v.set(2, 0, 0, 1, 8.0);
        assert!((v.mean_frame_difference() - 5.0).abs() < 1e-12);
        assert!(v.mean_second_difference().abs() < 1e-12);
    }

    #[test]
    fn tensor_roundtrip() {
        let v = LatentVideo::from_vec([2, 1, 1, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = v.to_tensor(&Device::Cpu, DType::F64).unwrap();
        assert_eq!(LatentVideo::from_tensor(&t).unwrap(), v);
    }
}
