//! Stride-1, zero "same"-padded 2-D cross-correlation via im2col + GEMM.

use crate::error::TensorError;
use crate::gemm::{gemm, Trans};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    pub fn check(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Self, TensorError> {
        let [n, cin, h, wd] = x.dims4("conv2d")?;
        let [cout, kcin, kh, kw] = w.dims4("conv2d")?;
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::KernelSize(kh, kw));
        }
        if kcin != cin {
            return Err(TensorError::ChannelMismatch {
                input: cin,
                kernel: kcin,
            });
        }
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
        Ok(Self {
            n,
            cin,
            cout,
            h,
            w: wd,
            k: kh,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one sample `(Cin, H, W)` into `(Cin*k*k, H*W)` columns.
fn im2col(d: &ConvDims, x: &[f64], cols: &mut [f64]) {
    let (h, w, k) = (d.h as isize, d.w as isize, d.k);
    let pad = (k / 2) as isize;
    let hw = d.plane();
    for c in 0..d.cin {
        let src = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out.fill(0.0);
                        continue;
                    }
                    let srow = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (xx, o) in out.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *o = if sx < 0 || sx >= w {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(d: &ConvDims, cols: &[f64], dx: &mut [f64]) {
    let (h, w, k) = (d.h as isize, d.w as isize, d.k);
    let pad = (k / 2) as isize;
    let hw = d.plane();
    for c in 0..d.cin {
        let dst = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ki as isize - pad;
                let dxo = kj as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let srow = &src[(y * w) as usize..((y + 1) * w) as usize];
                    let drow = &mut dst[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (xx, &g) in srow.iter().enumerate() {
                        let sx = xx as isize + dxo;
                        if sx >= 0 && sx < w {
                            drow[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let d = ConvDims::check(x, w, b)?;
    let hw = d.plane();
    let patch = d.patch();
    let in_len = d.cin * hw;
    let out_len = d.cout * hw;
    let mut out = vec![0.0; d.n * out_len];
    let mut cols = vec![0.0; if d.k == 1 { 0 } else { patch * hw }];
    for s in 0..d.n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let ys = &mut out[s * out_len..(s + 1) * out_len];
        for (c, bias) in b.data().iter().enumerate() {
            ys[c * hw..(c + 1) * hw].fill(*bias);
        }
        let cols_ref: &[f64] = if d.k == 1 {
            xs
        } else {
            im2col(&d, xs, &mut cols);
            &cols
        };
        gemm(d.cout, patch, hw, 1.0, w.data(), Trans::No, cols_ref, Trans::No, 1.0, ys);
    }
    Tensor::new(vec![d.n, d.cout, d.h, d.w], out)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    dy: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let d = ConvDims::check(x, w, b).expect("shapes validated in forward");
    let hw = d.plane();
    let patch = d.patch();
    let in_len = d.cin * hw;
    let out_len = d.cout * hw;
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dw = need[1].then(|| vec![0.0; w.len()]);
    let mut db = need[2].then(|| vec![0.0; d.cout]);
    let mut cols = vec![0.0; if d.k == 1 { 0 } else { patch * hw }];
    let mut dcols = vec![0.0; if need[0] && d.k != 1 { patch * hw } else { 0 }];
    for s in 0..d.n {
        let dys = &dy[s * out_len..(s + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dys[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let cols_ref: &[f64] = if d.k == 1 {
                xs
            } else {
                im2col(&d, xs, &mut cols);
                &cols
            };
            gemm(d.cout, hw, patch, 1.0, dys, Trans::No, cols_ref, Trans::Yes, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if d.k == 1 {
                gemm(patch, d.cout, hw, 1.0, w.data(), Trans::Yes, dys, Trans::No, 1.0, dxs);
            } else {
                gemm(patch, d.cout, hw, 1.0, w.data(), Trans::Yes, dys, Trans::No, 0.0, &mut dcols);
                col2im(&d, &dcols, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
