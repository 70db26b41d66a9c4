//! Temporal low-rank modeling of fingerprints.
//!
//! The basis `phi` (K x T, orthonormal rows) spans the leading right singular
//! vectors of the unit-normalized dictionary. Complex data is handled by
//! stacking real and imaginary parts of the atoms as separate rows, which
//! keeps `phi` real; complex coefficients are `c = s phi^T`.

use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use qfit_autodiff::gemm::{gemm, Trans};
use qfit_autodiff::{CustomOp, Graph, Tensor, TensorError, Var};

use crate::error::{QfitError, Result};
use crate::signal::Dictionary;
use crate::stack::ContrastStack;

/// Relative slack on the energy threshold that absorbs eigenvalue rounding.
const ENERGY_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBasis {
    pub rank: usize,
    pub n_tr: usize,
    /// Row-major `rank x n_tr`.
    pub phi: Vec<f64>,
    /// Full spectrum, descending.
    pub singular_values: Vec<f64>,
    pub retained_energy: f64,
    pub energy_target: f64,
}

impl SubspaceBasis {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.phi[k * self.n_tr..(k + 1) * self.n_tr]
    }

    /// Rebuilds a basis from stored rows, checking orthonormality.
    pub fn from_parts(
        rank: usize,
        n_tr: usize,
        phi: Vec<f64>,
        singular_values: Vec<f64>,
        energy_target: f64,
    ) -> Result<Self> {
        if rank == 0 || phi.len() != rank * n_tr {
            return Err(QfitError::shape("subspace basis", rank * n_tr, phi.len()));
        }
        let total: f64 = singular_values.iter().map(|s| s * s).sum();
        let kept: f64 = singular_values.iter().take(rank).map(|s| s * s).sum();
        let basis = Self {
            rank,
            n_tr,
            phi,
            singular_values,
            retained_energy: if total > 0.0 { kept / total } else { 1.0 },
            energy_target,
        };
        if basis.orthonormality_error() > 1e-8 {
            return Err(QfitError::Invalid("basis rows are not orthonormal".into()));
        }
        Ok(basis)
    }

    /// Max |phi phi^T - I| entry.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.rank {
            for b in 0..self.rank {
                let dot: f64 = self.row(a).iter().zip(self.row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }
}

/// Smallest `k` whose cumulative energy reaches `target` of `total`.
pub fn select_rank(energies_desc: &[f64], target: f64) -> usize {
    let total: f64 = energies_desc.iter().sum();
    let mut cum = 0.0;
    for (i, e) in energies_desc.iter().enumerate() {
        cum += e;
        if cum >= target * total - ENERGY_SLACK * total {
            return i + 1;
        }
    }
    energies_desc.len()
}

/// SVD-based compression of the unit-normalized dictionary.
pub fn compress_dictionary(dict: &Dictionary, energy_target: f64) -> Result<SubspaceBasis> {
    if !(energy_target > 0.0 && energy_target <= 1.0) {
        return Err(QfitError::Config(format!(
            "energy target must lie in (0, 1], got {energy_target}"
        )));
    }
    let n = dict.len();
    let t = dict.n_tr;
    if n == 0 || dict.norms.iter().all(|&v| v == 0.0) {
        return Err(QfitError::Invalid("cannot compress an all-zero dictionary".into()));
    }
    // rows: Re(u_i) then Im(u_i) for every unit atom
    let mut stacked = vec![0.0; 2 * n * t];
    for (i, v) in dict.unit_atoms.iter().enumerate() {
        let (a, j) = (i / t, i % t);
        stacked[2 * a * t + j] = v.re;
        stacked[(2 * a + 1) * t + j] = v.im;
    }
    let mut gram = vec![0.0; t * t];
    gemm(t, 2 * n, t, 1.0, &stacked, Trans::Yes, &stacked, Trans::No, 0.0, &mut gram);
    drop(stacked);

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(t, t, &gram));
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let energies: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let rank = select_rank(&energies, energy_target);

    let mut phi = Vec::with_capacity(rank * t);
    for &i in order.iter().take(rank) {
        let col = eig.eigenvectors.column(i);
        // sign convention: largest-magnitude entry positive
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        phi.extend(col.iter().map(|v| v * sign));
    }
    let total: f64 = energies.iter().sum();
    let kept: f64 = energies.iter().take(rank).sum();
    Ok(SubspaceBasis {
        rank,
        n_tr: t,
        phi,
        singular_values: energies.iter().map(|e| e.sqrt()).collect(),
        retained_energy: kept / total,
        energy_target,
    })
}

/// `c = s phi^T`.
pub fn project(signal: &[Complex64], basis: &SubspaceBasis) -> Result<Vec<Complex64>> {
    if signal.len() != basis.n_tr {
        return Err(QfitError::shape("signal length", basis.n_tr, signal.len()));
    }
    Ok((0..basis.rank)
        .map(|k| signal.iter().zip(basis.row(k)).map(|(s, p)| s * p).sum())
        .collect())
}

/// `s = c phi`.
pub fn reconstruct(coeffs: &[Complex64], basis: &SubspaceBasis) -> Result<Vec<Complex64>> {
    if coeffs.len() != basis.rank {
        return Err(QfitError::shape("coefficient count", basis.rank, coeffs.len()));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); basis.n_tr];
    for (k, c) in coeffs.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(basis.row(k)) {
            *o += c * p;
        }
    }
    Ok(out)
}

/// `H x W x K` complex coefficients stored as `K` real planes then `K`
/// imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMaps {
    pub rank: usize,
    pub height: usize,
    pub width: usize,
    pub planes: Vec<f64>,
}

impl CoefficientMaps {
    pub fn new(rank: usize, height: usize, width: usize, planes: Vec<f64>) -> Result<Self> {
        if planes.len() != 2 * rank * height * width {
            return Err(QfitError::shape("coefficient planes", 2 * rank * height * width, planes.len()));
        }
        if planes.iter().any(|v| !v.is_finite()) {
            return Err(QfitError::Invalid("coefficient maps contain non-finite values".into()));
        }
        Ok(Self {
            rank,
            height,
            width,
            planes,
        })
    }

    pub fn zeros(rank: usize, height: usize, width: usize) -> Self {
        Self {
            rank,
            height,
            width,
            planes: vec![0.0; 2 * rank * height * width],
        }
    }

    pub fn voxel(&self, v: usize) -> Vec<Complex64> {
        let hw = self.height * self.width;
        (0..self.rank)
            .map(|k| Complex64::new(self.planes[k * hw + v], self.planes[(self.rank + k) * hw + v]))
            .collect()
    }

    pub fn set_voxel(&mut self, v: usize, c: &[Complex64]) {
        let hw = self.height * self.width;
        for (k, z) in c.iter().enumerate() {
            self.planes[k * hw + v] = z.re;
            self.planes[(self.rank + k) * hw + v] = z.im;
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 2 * self.rank, self.height, self.width], self.planes.clone()).expect("sized")
    }

    /// Projects every voxel of a complex time-series stack.
    pub fn from_stack(stack: &ContrastStack, basis: &SubspaceBasis) -> Result<Self> {
        if stack.frames != basis.n_tr {
            return Err(QfitError::shape("time-series frames", basis.n_tr, stack.frames));
        }
        let (h, w) = (stack.height, stack.width);
        let hw = h * w;
        let k = basis.rank;
        let im = stack.imag.clone().unwrap_or_else(|| vec![0.0; stack.real.len()]);
        let mut planes = vec![0.0; 2 * k * hw];
        gemm(k, basis.n_tr, hw, 1.0, &basis.phi, Trans::No, &stack.real, Trans::No, 0.0, &mut planes[..k * hw]);
        gemm(k, basis.n_tr, hw, 1.0, &basis.phi, Trans::No, &im, Trans::No, 0.0, &mut planes[k * hw..]);
        Self::new(k, h, w, planes)
    }
}

/// Per-voxel `sum_k c_k phi_k` as a complex stack of `T` frames.
pub fn synth_timeseries(c: &CoefficientMaps, basis: &SubspaceBasis) -> Result<ContrastStack> {
    if c.rank != basis.rank {
        return Err(QfitError::shape("coefficient rank", basis.rank, c.rank));
    }
    let hw = c.height * c.width;
    let (k, t) = (c.rank, basis.n_tr);
    let mut re = vec![0.0; t * hw];
    let mut im = vec![0.0; t * hw];
    gemm(t, k, hw, 1.0, &basis.phi, Trans::Yes, &c.planes[..k * hw], Trans::No, 0.0, &mut re);
    gemm(t, k, hw, 1.0, &basis.phi, Trans::Yes, &c.planes[k * hw..], Trans::No, 0.0, &mut im);
    ContrastStack::complex(t, c.height, c.width, re, im, Vec::new())
}

/// Differentiable `(N, 2K, H, W)` coefficients to `(N, 2T, H, W)` series.
struct SubspaceSynthOp {
    rank: usize,
    n_tr: usize,
    phi: Rc<Vec<f64>>,
}

impl CustomOp for SubspaceSynthOp {
    fn name(&self) -> &str {
        "synth_timeseries"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let c = inputs[0];
        let [n, ch, h, w] = c.dims4("synth_timeseries")?;
        if ch != 2 * self.rank {
            return Err(TensorError::Invalid {
                op: "synth_timeseries".into(),
                msg: format!("expected {} coefficient planes, got {ch}", 2 * self.rank),
            });
        }
        let hw = h * w;
        let (k, t) = (self.rank, self.n_tr);
        let mut out = vec![0.0; n * 2 * t * hw];
        for s in 0..n {
            for part in 0..2 {
                let src = &c.data()[(s * 2 + part) * k * hw..(s * 2 + part + 1) * k * hw];
                let dst = &mut out[(s * 2 + part) * t * hw..(s * 2 + part + 1) * t * hw];
                gemm(t, k, hw, 1.0, &self.phi, Trans::Yes, src, Trans::No, 0.0, dst);
            }
        }
        Tensor::new(vec![n, 2 * t, h, w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let c = inputs[0];
        let [n, _, h, w] = c.dims4("synth_timeseries").expect("checked in forward");
        let hw = h * w;
        let (k, t) = (self.rank, self.n_tr);
        let mut gc = vec![0.0; c.len()];
        for s in 0..n {
            for part in 0..2 {
                let go = &grad.data()[(s * 2 + part) * t * hw..(s * 2 + part + 1) * t * hw];
                let dst = &mut gc[(s * 2 + part) * k * hw..(s * 2 + part + 1) * k * hw];
                gemm(k, t, hw, 1.0, &self.phi, Trans::No, go, Trans::No, 0.0, dst);
            }
        }
        vec![Tensor::new(c.shape().to_vec(), gc).expect("input shape")]
    }
}

pub fn synth_timeseries_graph(g: &Graph, coeffs: Var, basis: &SubspaceBasis) -> Result<Var> {
    let op: Rc<dyn CustomOp> = Rc::new(SubspaceSynthOp {
        rank: basis.rank,
        n_tr: basis.n_tr,
        phi: Rc::new(basis.phi.clone()),
    });
    Ok(g.custom(op, &[coeffs])?)
}

/// Dictionary atoms projected onto a basis, for matching in coefficient space.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedDictionary {
    pub rank: usize,
    pub params: Vec<(f64, f64)>,
    /// Row-major `n_atoms x rank` coefficients of the raw (m0 = 1) atoms.
    pub coeffs: Vec<Complex64>,
    pub coeff_norms: Vec<f64>,
}

impl CompressedDictionary {
    pub fn new(dict: &Dictionary, basis: &SubspaceBasis) -> Result<Self> {
        if dict.n_tr != basis.n_tr {
            return Err(QfitError::shape("dictionary length", basis.n_tr, dict.n_tr));
        }
        let mut coeffs = Vec::with_capacity(dict.len() * basis.rank);
        let mut coeff_norms = Vec::with_capacity(dict.len());
        for i in 0..dict.len() {
            let c = project(dict.atom(i), basis)?;
            coeff_norms.push(c.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt());
            coeffs.extend(c);
        }
        Ok(Self {
            rank: basis.rank,
            params: dict.params.clone(),
            coeffs,
            coeff_norms,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[Complex64] {
        &self.coeffs[i * self.rank..(i + 1) * self.rank]
    }
}

/// Best-matching atom with its grid values and complex scale (M0 times phase).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub index: usize,
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub scale: Complex64,
    /// Normalized correlation magnitude in `[0, 1]`.
    pub correlation: f64,
}

/// `sum conj(a) b`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Argmax of normalized correlation over atoms; ties go to the lower index.
pub(crate) fn best_match<'a>(
    query: &[Complex64],
    atoms: impl Iterator<Item = (&'a [Complex64], f64)>,
    params: &[(f64, f64)],
) -> Result<MatchResult> {
    let qnorm = query.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt();
    let mut best: Option<(usize, f64, Complex64, f64)> = None;
    for (i, (atom, norm)) in atoms.enumerate() {
        if norm == 0.0 {
            continue;
        }
        let ip = inner(atom, query);
        let score = ip.norm() / norm;
        if best.is_none_or(|b| score > b.1) {
            best = Some((i, score, ip, norm));
        }
    }
    let (index, score, ip, norm) = best.ok_or_else(|| QfitError::Invalid("empty dictionary".into()))?;
    Ok(MatchResult {
        index,
        t1_ms: params[index].0,
        t2_ms: params[index].1,
        scale: ip / (norm * norm),
        correlation: if qnorm > 0.0 { score / qnorm } else { 0.0 },
    })
}

pub fn match_compressed(coeffs: &[Complex64], dict: &CompressedDictionary) -> Result<MatchResult> {
    if coeffs.len() != dict.rank {
        return Err(QfitError::shape("query rank", dict.rank, coeffs.len()));
    }
    best_match(
        coeffs,
        (0..dict.len()).map(|i| (dict.atom(i), dict.coeff_norms[i])),
        &dict.params,
    )
}
