//! Training losses: windowed SSIM for relaxometry, mean absolute error for MRF.

use std::rc::Rc;

use qfit_autodiff::{CustomOp, Graph, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{QfitError, Result};
use crate::stack::ContrastStack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L`; `C1 = (k1 L)^2`, `C2 = (k2 L)^2`.
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Default window with `L` taken from the stack maximum.
    pub fn for_stack(stack: &ContrastStack) -> Self {
        Self {
            dynamic_range: stack.max_abs(),
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(QfitError::Config(format!(
                "SSIM window must be odd and positive, got {}",
                self.window_size
            )));
        }
        if !(self.sigma > 0.0) || !(self.c1() > 0.0) || !(self.c2() > 0.0) {
            return Err(QfitError::Config(
                "SSIM needs sigma > 0 and positive stabilizing constants".into(),
            ));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Separable "valid" filtering of every `(n, c)` plane with the same taps.
struct SeparableFilter {
    taps: Vec<f64>,
}

impl SeparableFilter {
    fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        let k = self.taps.len();
        if h < k || w < k {
            return Err(TensorError::Invalid {
                op: "gaussian_filter".into(),
                msg: format!("{h}x{w} plane smaller than {k}x{k} window"),
            });
        }
        Ok((h - k + 1, w - k + 1))
    }
}

impl CustomOp for SeparableFilter {
    fn name(&self) -> &str {
        "gaussian_filter"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let x = inputs[0];
        let [n, c, h, w] = x.dims4("gaussian_filter")?;
        let (oh, ow) = self.out_dims(h, w)?;
        let k = self.taps.len();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut rows = vec![0.0; h * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xo in 0..ow {
                    let line = &src[y * w + xo..y * w + xo + k];
                    rows[y * ow + xo] = line.iter().zip(&self.taps).map(|(a, t)| a * t).sum();
                }
            }
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for yo in 0..oh {
                for (j, t) in self.taps.iter().enumerate() {
                    let r = &rows[(yo + j) * ow..(yo + j + 1) * ow];
                    for (d, v) in dst[yo * ow..(yo + 1) * ow].iter_mut().zip(r) {
                        *d += t * v;
                    }
                }
            }
        }
        Tensor::new(vec![n, c, oh, ow], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let [n, c, h, w] = x.dims4("gaussian_filter").expect("checked in forward");
        let (oh, ow) = self.out_dims(h, w).expect("checked in forward");
        let k = self.taps.len();
        let mut gx = vec![0.0; x.len()];
        let mut grows = vec![0.0; h * ow];
        for p in 0..n * c {
            let go = &grad.data()[p * oh * ow..(p + 1) * oh * ow];
            grows.fill(0.0);
            for yo in 0..oh {
                for (j, t) in self.taps.iter().enumerate() {
                    let r = &mut grows[(yo + j) * ow..(yo + j + 1) * ow];
                    for (d, g) in r.iter_mut().zip(&go[yo * ow..(yo + 1) * ow]) {
                        *d += t * g;
                    }
                }
            }
            let dst = &mut gx[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xo in 0..ow {
                    let g = grows[y * ow + xo];
                    for (i, t) in self.taps.iter().enumerate().take(k) {
                        dst[y * w + xo + i] += g * t;
                    }
                }
            }
        }
        vec![Tensor::new(x.shape().to_vec(), gx).expect("input shape")]
    }
}

fn check_same(g: &Graph, a: Var, b: Var, what: &'static str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(QfitError::shape(what, sa, sb));
    }
    Ok(())
}

/// Per-pixel SSIM map over every plane of two `(N, C, H, W)` tensors.
pub fn ssim_map(g: &Graph, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    cfg.validate()?;
    check_same(g, a, b, "ssim_loss inputs")?;
    let filt: Rc<dyn CustomOp> = Rc::new(SeparableFilter { taps: cfg.taps() });
    let blur = |v: Var| g.custom(filt.clone(), &[v]);

    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let aa = blur(g.square(a)?)?;
    let bb = blur(g.square(b)?)?;
    let ab = blur(g.mul(a, b)?)?;

    let mu_aa = g.square(mu_a)?;
    let mu_bb = g.square(mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(aa, mu_aa)?;
    let var_b = g.sub(bb, mu_bb)?;
    let cov = g.sub(ab, mu_ab)?;

    let lum_num = g.add_scalar(g.scale(mu_ab, 2.0)?, cfg.c1())?;
    let cs_num = g.add_scalar(g.scale(cov, 2.0)?, cfg.c2())?;
    let lum_den = g.add_scalar(g.add(mu_aa, mu_bb)?, cfg.c1())?;
    let cs_den = g.add_scalar(g.add(var_a, var_b)?, cfg.c2())?;
    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    Ok(g.div(num, den)?)
}

/// `1 - mean SSIM` over all planes and valid window positions.
pub fn ssim_loss(g: &Graph, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    let m = ssim_map(g, a, b, cfg)?;
    let mean = g.reduce_mean(m)?;
    let neg = g.scale(mean, -1.0)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// Mean absolute difference.
pub fn l1_loss(g: &Graph, a: Var, b: Var) -> Result<Var> {
    check_same(g, a, b, "l1_loss inputs")?;
    let d = g.sub(a, b)?;
    Ok(g.reduce_abs_mean(d)?)
}

/// SSIM loss between two stacks outside of any training graph.
pub fn ssim_loss_stacks(a: &ContrastStack, b: &ContrastStack, cfg: &SsimConfig) -> Result<f64> {
    if !a.same_geometry(b) {
        return Err(QfitError::shape(
            "ssim_loss stacks",
            (a.frames, a.height, a.width),
            (b.frames, b.height, b.width),
        ));
    }
    let g = Graph::new();
    let va = g.constant(a.to_tensor())?;
    let vb = g.constant(b.to_tensor())?;
    let l = ssim_loss(&g, va, vb, cfg)?;
    Ok(g.item(l)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalized() {
        let t = SsimConfig::default().taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(t[5] > t[4] && (t[4] - t[6]).abs() < 1e-18);
    }

    #[test]
    fn filter_rejects_small_planes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 1, 8, 8])).unwrap();
        assert!(ssim_loss(&g, a, a, &SsimConfig::default()).is_err());
    }

    #[test]
    fn l1_hand_example() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        let b = g.constant(Tensor::from_vec(vec![1.0, -3.0])).unwrap();
        assert_eq!(g.item(l1_loss(&g, a, b).unwrap()).unwrap(), 2.0);
        assert_eq!(g.item(l1_loss(&g, a, a).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 1, 12, 12])).unwrap();
        let b = g.constant(Tensor::zeros(vec![1, 2, 12, 12])).unwrap();
        assert!(l1_loss(&g, a, b).is_err());
        assert!(ssim_loss(&g, a, b, &SsimConfig::default()).is_err());
    }
}
