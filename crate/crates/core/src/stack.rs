//! Image stacks and parameter maps.
//!
//! Both store planes frame-major: element `(e, y, x)` lives at
//! `e * height * width + y * width + x`.

use num_complex::Complex64;
use qfit_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{QfitError, Result};

/// `E x H x W` contrast images. Complex stacks carry an imaginary plane set
/// alongside the real one.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastStack {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub real: Vec<f64>,
    pub imag: Option<Vec<f64>>,
    /// Echo times for multi-echo data, repetition times for MRF (ms).
    pub timing_ms: Vec<f64>,
}

impl ContrastStack {
    pub fn real(frames: usize, height: usize, width: usize, real: Vec<f64>, timing_ms: Vec<f64>) -> Result<Self> {
        let s = Self {
            frames,
            height,
            width,
            real,
            imag: None,
            timing_ms,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn complex(
        frames: usize,
        height: usize,
        width: usize,
        real: Vec<f64>,
        imag: Vec<f64>,
        timing_ms: Vec<f64>,
    ) -> Result<Self> {
        let s = Self {
            frames,
            height,
            width,
            real,
            imag: Some(imag),
            timing_ms,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames * self.height * self.width;
        if self.real.len() != n {
            return Err(QfitError::shape("stack real planes", n, self.real.len()));
        }
        if let Some(im) = &self.imag {
            if im.len() != n {
                return Err(QfitError::shape("stack imaginary planes", n, im.len()));
            }
        }
        Ok(())
    }

    pub fn is_complex(&self) -> bool {
        self.imag.is_some()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.frames == other.frames
            && self.height == other.height
            && self.width == other.width
            && self.is_complex() == other.is_complex()
    }

    pub fn sample(&self, frame: usize, voxel: usize) -> Complex64 {
        let i = frame * self.plane_len() + voxel;
        Complex64::new(self.real[i], self.imag.as_ref().map_or(0.0, |im| im[i]))
    }

    /// Time course of one voxel.
    pub fn voxel(&self, voxel: usize) -> Vec<Complex64> {
        (0..self.frames).map(|e| self.sample(e, voxel)).collect()
    }

    pub fn voxel_real(&self, voxel: usize) -> Vec<f64> {
        let hw = self.plane_len();
        (0..self.frames).map(|e| self.real[e * hw + voxel]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        let hw = self.plane_len();
        (0..self.frames * hw)
            .map(|i| match &self.imag {
                Some(im) => self.real[i].hypot(im[i]),
                None => self.real[i].abs(),
            })
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.real.iter_mut().for_each(|v| *v *= factor);
        if let Some(im) = out.imag.as_mut() {
            im.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }

    /// `(1, E, H, W)` tensor; complex stacks become `(1, 2E, H, W)` with the
    /// real planes first.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.real.clone();
        let mut channels = self.frames;
        if let Some(im) = &self.imag {
            data.extend_from_slice(im);
            channels *= 2;
        }
        Tensor::new(vec![1, channels, self.height, self.width], data).expect("validated stack")
    }
}

/// One physical quantity over the image grid, with a validity mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ParameterMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if values.len() != n || mask.len() != n {
            return Err(QfitError::shape("parameter map", n, (values.len(), mask.len())));
        }
        Ok(Self {
            height,
            width,
            values,
            mask,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            values: vec![value; n],
            mask: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_mask(mut self, mask: &[bool]) -> Self {
        for (m, &keep) in self.mask.iter_mut().zip(mask) {
            *m = *m && keep;
        }
        self
    }
}

/// Stored 99th-percentile magnitude of a stack; values are divided by it
/// before entering a network.
pub fn percentile_magnitude(stack: &ContrastStack, q: f64) -> f64 {
    let mut mags: Vec<f64> = match &stack.imag {
        Some(im) => stack.real.iter().zip(im).map(|(r, i)| r.hypot(*i)).collect(),
        None => stack.real.iter().map(|v| v.abs()).collect(),
    };
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let idx = ((q * (mags.len() - 1) as f64).round() as usize).min(mags.len() - 1);
    mags[idx]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_tensor_puts_real_planes_first() {
        let s = ContrastStack::complex(2, 1, 2, vec![1., 2., 3., 4.], vec![5., 6., 7., 8.], vec![1., 2.]).unwrap();
        let t = s.to_tensor();
        assert_eq!(t.shape(), &[1, 4, 1, 2]);
        assert_eq!(t.data(), &[1., 2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(s.voxel(1), vec![Complex64::new(2., 6.), Complex64::new(4., 8.)]);
    }

    #[test]
    fn percentile_of_ramp() {
        let vals: Vec<f64> = (0..101).map(f64::from).collect();
        let s = ContrastStack::real(1, 1, 101, vals, vec![1.0]).unwrap();
        assert_eq!(percentile_magnitude(&s, 0.99), 99.0);
    }

    #[test]
    fn rejects_wrong_sizes() {
        assert!(ContrastStack::real(2, 2, 2, vec![0.0; 7], vec![]).is_err());
        assert!(ParameterMap::new(2, 2, vec![0.0; 4], vec![true; 3]).is_err());
    }
}
