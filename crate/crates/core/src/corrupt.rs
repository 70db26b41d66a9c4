//! Corruption models applied to synthetic stacks.

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;

use crate::error::{QfitError, Result};
use crate::stack::ContrastStack;

/// Phase-encode lines that are always kept around the k-space center.
pub const CENTER_LINES: usize = 8;

/// Adds i.i.d. zero-mean Gaussian noise to every real (and imaginary) sample.
pub fn add_gaussian_noise(stack: &ContrastStack, variance: f64, seed: u64) -> Result<ContrastStack> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(QfitError::Config(format!("noise variance must be non-negative, got {variance}")));
    }
    stack.validate()?;
    let mut out = stack.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite positive sd");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.real.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    if let Some(im) = out.imag.as_mut() {
        for v in im.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Lines kept per frame: `lines / R`, but never fewer than the center block.
pub fn kept_lines(lines: usize, r: usize) -> usize {
    (lines / r).max(CENTER_LINES.min(lines))
}

/// Sampled phase-encode rows (FFT order) for each frame.
pub fn sampling_masks(lines: usize, frames: usize, r: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
    if r == 0 || r > lines {
        return Err(QfitError::Config(format!(
            "acceleration must lie in 1..={lines}, got {r}"
        )));
    }
    let keep = kept_lines(lines, r);
    let center = CENTER_LINES.min(lines);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut m = vec![false; lines];
        // ky = -center/2 .. center/2 - 1, wrapped into FFT order
        for k in 0..center {
            let ky = k as isize - (center / 2) as isize;
            m[ky.rem_euclid(lines as isize) as usize] = true;
        }
        let rest: Vec<usize> = (0..lines).filter(|&i| !m[i]).collect();
        for i in sample(&mut rng, rest.len(), keep - center) {
            m[rest[i]] = true;
        }
        masks.push(m);
    }
    Ok(masks)
}

/// Retrospective Cartesian undersampling: per frame, 2-D FFT, zero all but
/// the sampled phase-encode rows, inverse FFT. The pattern changes from
/// frame to frame, so aliasing is incoherent in time. Output is complex.
pub fn undersample_frames(stack: &ContrastStack, r: usize, seed: u64) -> Result<ContrastStack> {
    stack.validate()?;
    let (h, w) = (stack.height, stack.width);
    let masks = sampling_masks(h, stack.frames, r, seed)?;
    let mut planner = FftPlanner::<f64>::new();
    let (fx, ix) = (planner.plan_fft_forward(w), planner.plan_fft_inverse(w));
    let (fy, iy) = (planner.plan_fft_forward(h), planner.plan_fft_inverse(h));
    let norm = 1.0 / (h * w) as f64;

    let mut re = Vec::with_capacity(stack.real.len());
    let mut im = Vec::with_capacity(stack.real.len());
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for (f, mask) in masks.iter().enumerate() {
        let mut plane: Vec<Complex64> = (0..h * w).map(|v| stack.sample(f, v)).collect();
        for row in plane.chunks_mut(w) {
            fx.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = plane[y * w + x];
            }
            fy.process(&mut col);
            for (y, c) in col.iter_mut().enumerate() {
                if !mask[y] {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
            iy.process(&mut col);
            for y in 0..h {
                plane[y * w + x] = col[y];
            }
        }
        for row in plane.chunks_mut(w) {
            ix.process(row);
        }
        re.extend(plane.iter().map(|z| z.re * norm));
        im.extend(plane.iter().map(|z| z.im * norm));
    }
    ContrastStack::complex(stack.frames, h, w, re, im, stack.timing_ms.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_variance_rejected() {
        let s = ContrastStack::real(1, 2, 2, vec![1.0; 4], vec![]).unwrap();
        assert!(add_gaussian_noise(&s, -1e-3, 0).is_err());
    }

    #[test]
    fn masks_keep_center_and_count() {
        let m = sampling_masks(64, 5, 6, 1).unwrap();
        for f in &m {
            assert_eq!(f.iter().filter(|&&b| b).count(), 10);
            for k in [0, 1, 2, 3, 60, 61, 62, 63] {
                assert!(f[k]);
            }
        }
        assert_ne!(m[0], m[1]);
    }

    #[test]
    fn acceleration_bounds() {
        assert!(sampling_masks(16, 1, 0, 0).is_err());
        assert!(sampling_masks(16, 1, 17, 0).is_err());
        assert!(sampling_masks(16, 1, 16, 0).is_ok());
        assert_eq!(kept_lines(16, 16), 8);
        assert_eq!(kept_lines(4, 2), 4);
    }
}
