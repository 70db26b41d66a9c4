//! Voxel-wise classical estimators.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QfitError, Result};
use crate::signal::mono_exp::EchoProtocol;
use crate::signal::Dictionary;
use crate::stack::{ContrastStack, ParameterMap};
use crate::subspace::{best_match, match_compressed, CoefficientMaps, CompressedDictionary, MatchResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub m0: f64,
    pub t2_ms: f64,
    pub residual_norm: f64,
    pub converged: bool,
}

impl FitResult {
    fn failed(residual_norm: f64) -> Self {
        Self {
            m0: 0.0,
            t2_ms: 0.0,
            residual_norm,
            converged: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarproConfig {
    pub t2_min_ms: f64,
    pub t2_max_ms: f64,
    /// Log-spaced coarse grid size.
    pub grid_points: usize,
    /// Golden-section stopping width (ms).
    pub tol_ms: f64,
}

impl Default for VarproConfig {
    fn default() -> Self {
        Self {
            t2_min_ms: 1.0,
            t2_max_ms: 3000.0,
            grid_points: 200,
            tol_ms: 1e-4,
        }
    }
}

impl VarproConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t2_min_ms > 0.0 && self.t2_min_ms < self.t2_max_ms) {
            return Err(QfitError::Config(format!(
                "need 0 < t2_min < t2_max, got [{}, {}]",
                self.t2_min_ms, self.t2_max_ms
            )));
        }
        if self.grid_points < 3 || !(self.tol_ms > 0.0) {
            return Err(QfitError::Config("varpro needs >= 3 grid points and a positive tolerance".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi) = (self.t2_min_ms.ln(), self.t2_max_ms.ln());
        let n = self.grid_points;
        (0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()).collect()
    }
}

fn decay(proto: &EchoProtocol, t2: f64) -> impl Iterator<Item = f64> + '_ {
    proto.echo_times_ms.iter().map(move |&te| (-te / t2).exp())
}

/// `(<s,e>, <e,e>)` for the decay curve at `t2`.
fn projections(signal: &[f64], proto: &EchoProtocol, t2: f64) -> (f64, f64) {
    decay(proto, t2).zip(signal).fold((0.0, 0.0), |(se, ee), (e, s)| (se + s * e, ee + e * e))
}

/// Residual after eliminating M0: `|s|^2 - <s,e>^2 / <e,e>`.
fn projected_residual(signal: &[f64], ss: f64, proto: &EchoProtocol, t2: f64) -> f64 {
    let (se, ee) = projections(signal, proto, t2);
    ss - se * se / ee
}

fn check_signal(signal: &[f64], proto: &EchoProtocol) -> Result<()> {
    proto.validate()?;
    if signal.len() != proto.len() {
        return Err(QfitError::shape("echo signal", proto.len(), signal.len()));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(QfitError::Invalid("echo signal contains non-finite values".into()));
    }
    Ok(())
}

/// Variable projection: M0 eliminated in closed form, T2 found by a log grid
/// then golden-section refinement.
pub fn varpro_fit(signal: &[f64], proto: &EchoProtocol, cfg: &VarproConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_signal(signal, proto)?;
    if proto.len() < 2 {
        return Err(QfitError::Config("varpro needs at least two echoes".into()));
    }
    let ss: f64 = signal.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Ok(FitResult::failed(0.0));
    }
    let f = |t2: f64| projected_residual(signal, ss, proto, t2);
    let grid = cfg.grid();
    let best = (0..grid.len())
        .map(|i| (i, f(grid[i])))
        .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
        .0;
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(grid.len() - 1)];

    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > cfg.tol_ms {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    // the bracket endpoints can beat the interior on monotone objectives
    let t2 = [a, 0.5 * (a + b), b]
        .into_iter()
        .map(|t| (t, f(t)))
        .fold((0.0, f64::INFINITY), |x, y| if y.1 < x.1 { y } else { x })
        .0;
    let (se, ee) = projections(signal, proto, t2);
    Ok(FitResult {
        m0: se / ee,
        t2_ms: t2,
        residual_norm: f(t2).max(0.0).sqrt(),
        converged: true,
    })
}

/// Weighted least squares on `ln s = ln M0 - TE / T2` with weights `s^2`.
pub fn loglinear_fit(signal: &[f64], proto: &EchoProtocol) -> Result<FitResult> {
    check_signal(signal, proto)?;
    if proto.len() < 2 {
        return Err(QfitError::Config("log-linear fit needs at least two echoes".into()));
    }
    if let Some(v) = signal.iter().find(|&&v| v <= 0.0) {
        return Err(QfitError::Invalid(format!("log-linear fit needs positive samples, got {v}")));
    }
    let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&te, &s) in proto.echo_times_ms.iter().zip(signal) {
        let (w, y) = (s * s, s.ln());
        sw += w;
        swx += w * te;
        swy += w * y;
        swxx += w * te * te;
        swxy += w * te * y;
    }
    let det = sw * swxx - swx * swx;
    let slope = (sw * swxy - swx * swy) / det;
    let intercept = (swy - slope * swx) / sw;
    let m0 = intercept.exp();
    let t2 = -1.0 / slope;
    let residual_norm = if t2 > 0.0 && t2.is_finite() {
        decay(proto, t2).zip(signal).map(|(e, s)| (s - m0 * e).powi(2)).sum::<f64>().sqrt()
    } else {
        f64::INFINITY
    };
    if !(t2 > 0.0 && t2.is_finite() && m0.is_finite()) {
        return Ok(FitResult::failed(residual_norm));
    }
    Ok(FitResult {
        m0,
        t2_ms: t2,
        residual_norm,
        converged: true,
    })
}

/// Exhaustive normalized-correlation matching in the time domain.
pub fn dict_match_full(signal: &[Complex64], dict: &Dictionary) -> Result<MatchResult> {
    if signal.len() != dict.n_tr {
        return Err(QfitError::shape("fingerprint length", dict.n_tr, signal.len()));
    }
    best_match(
        signal,
        (0..dict.len()).map(|i| (dict.atom(i), dict.norms[i])),
        &dict.params,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelaxMethod {
    Varpro(VarproConfig),
    Loglinear,
}

/// Fitted maps; voxels that failed or were masked out are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxMaps {
    pub m0: ParameterMap,
    pub t2: ParameterMap,
}

/// Applies a per-voxel relaxometry fit to every voxel inside `mask`.
/// Results are assembled by voxel index, so parallel execution is
/// bit-identical to a sequential loop.
pub fn fit_volume(stack: &ContrastStack, proto: &EchoProtocol, method: &RelaxMethod, mask: Option<&[bool]>) -> Result<RelaxMaps> {
    stack.validate()?;
    if stack.is_complex() {
        return Err(QfitError::Config("relaxometry fits expect magnitude stacks".into()));
    }
    if stack.frames != proto.len() {
        return Err(QfitError::shape("echo count", proto.len(), stack.frames));
    }
    if let RelaxMethod::Varpro(cfg) = method {
        cfg.validate()?;
    }
    let hw = stack.plane_len();
    if let Some(m) = mask {
        if m.len() != hw {
            return Err(QfitError::shape("fit mask", hw, m.len()));
        }
    }
    let fits: Vec<Option<FitResult>> = (0..hw)
        .into_par_iter()
        .map(|v| {
            if mask.is_some_and(|m| !m[v]) {
                return None;
            }
            let s = stack.voxel_real(v);
            let r = match method {
                RelaxMethod::Varpro(cfg) => varpro_fit(&s, proto, cfg),
                RelaxMethod::Loglinear => loglinear_fit(&s, proto),
            };
            r.ok().filter(|f| f.converged)
        })
        .collect();
    let valid: Vec<bool> = fits.iter().map(Option::is_some).collect();
    let m0 = fits.iter().map(|f| f.map_or(0.0, |f| f.m0)).collect();
    let t2 = fits.iter().map(|f| f.map_or(0.0, |f| f.t2_ms)).collect();
    Ok(RelaxMaps {
        m0: ParameterMap::new(stack.height, stack.width, m0, valid.clone())?,
        t2: ParameterMap::new(stack.height, stack.width, t2, valid)?,
    })
}

/// Matched MRF maps. `m0` is the magnitude of the complex scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MrfMaps {
    pub t1: ParameterMap,
    pub t2: ParameterMap,
    pub m0: ParameterMap,
    pub phase: ParameterMap,
}

fn assemble_matches(h: usize, w: usize, matches: Vec<Option<MatchResult>>) -> Result<MrfMaps> {
    let valid: Vec<bool> = matches.iter().map(Option::is_some).collect();
    let pick = |f: &dyn Fn(&MatchResult) -> f64| -> Result<ParameterMap> {
        ParameterMap::new(h, w, matches.iter().map(|m| m.as_ref().map_or(0.0, f)).collect(), valid.clone())
    };
    Ok(MrfMaps {
        t1: pick(&|m| m.t1_ms)?,
        t2: pick(&|m| m.t2_ms)?,
        m0: pick(&|m| m.scale.norm())?,
        phase: pick(&|m| m.scale.arg())?,
    })
}

fn check_mask(mask: Option<&[bool]>, hw: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != hw => Err(QfitError::shape("match mask", hw, m.len())),
        _ => Ok(()),
    }
}

/// Time-domain dictionary matching of every masked voxel.
pub fn match_volume_full(stack: &ContrastStack, dict: &Dictionary, mask: Option<&[bool]>) -> Result<MrfMaps> {
    stack.validate()?;
    if stack.frames != dict.n_tr {
        return Err(QfitError::shape("time-series frames", dict.n_tr, stack.frames));
    }
    check_mask(mask, stack.plane_len())?;
    let matches = (0..stack.plane_len())
        .into_par_iter()
        .map(|v| match mask {
            Some(m) if !m[v] => None,
            _ => dict_match_full(&stack.voxel(v), dict).ok(),
        })
        .collect();
    assemble_matches(stack.height, stack.width, matches)
}

/// Coefficient-space matching of every masked voxel.
pub fn match_volume_compressed(c: &CoefficientMaps, dict: &CompressedDictionary, mask: Option<&[bool]>) -> Result<MrfMaps> {
    if c.rank != dict.rank {
        return Err(QfitError::shape("coefficient rank", dict.rank, c.rank));
    }
    check_mask(mask, c.height * c.width)?;
    let matches = (0..c.height * c.width)
        .into_par_iter()
        .map(|v| match mask {
            Some(m) if !m[v] => None,
            _ => match_compressed(&c.voxel(v), dict).ok(),
        })
        .collect();
    assemble_matches(c.height, c.width, matches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varpro_grid_is_log_spaced_over_bounds() {
        let g = VarproConfig::default().grid();
        assert_eq!(g.len(), 200);
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!((g[199] - 3000.0).abs() < 1e-9);
        let r0 = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - r0).abs() < 1e-9));
    }

    #[test]
    fn varpro_rejects_bad_input() {
        let p = EchoProtocol::se_4_echo();
        assert!(varpro_fit(&[1.0, 2.0], &p, &VarproConfig::default()).is_err());
        let bad = VarproConfig {
            t2_min_ms: 10.0,
            t2_max_ms: 5.0,
            ..VarproConfig::default()
        };
        assert!(varpro_fit(&[1.0; 4], &p, &bad).is_err());
        let one = EchoProtocol::new(vec![10.0]).unwrap();
        assert!(varpro_fit(&[1.0], &one, &VarproConfig::default()).is_err());
    }

    #[test]
    fn loglinear_rejects_nonpositive() {
        let p = EchoProtocol::se_4_echo();
        assert!(loglinear_fit(&[1.0, 0.5, 0.0, 0.1], &p).is_err());
        assert!(loglinear_fit(&[1.0, -0.5, 0.2, 0.1], &p).is_err());
    }

    #[test]
    fn growing_signal_is_not_a_decay() {
        let p = EchoProtocol::se_4_echo();
        let r = loglinear_fit(&[1.0, 2.0, 3.0, 4.0], &p).unwrap();
        assert!(!r.converged);
    }
}
