//! Simulated fingerprint dictionaries over a (T1, T2) grid.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QfitError, Result};
use crate::signal::epg::{epg_fisp, FispSchedule};
use crate::signal::TissueParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryGrid {
    pub t1_ms: Vec<f64>,
    pub t2_ms: Vec<f64>,
}

fn arange(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|i| start + step * i as f64).collect()
}

impl Default for DictionaryGrid {
    /// T1 100..=3000 step 20, T2 10..=300 step 2 (ms).
    fn default() -> Self {
        Self::stepped((100.0, 3000.0, 20.0), (10.0, 300.0, 2.0))
    }
}

impl DictionaryGrid {
    /// Inclusive `(start, stop, step)` ranges.
    pub fn stepped(t1: (f64, f64, f64), t2: (f64, f64, f64)) -> Self {
        Self {
            t1_ms: arange(t1.0, t1.1, t1.2),
            t2_ms: arange(t2.0, t2.1, t2.2),
        }
    }

    /// Pairs with `t2 <= t1`, T1-major.
    pub fn admissible(&self) -> Vec<(f64, f64)> {
        self.t1_ms
            .iter()
            .flat_map(|&t1| self.t2_ms.iter().filter(move |&&t2| t2 <= t1).map(move |&t2| (t1, t2)))
            .collect()
    }
}

/// Atoms are stored row-major (`n_atoms x n_tr`), simulated with `m0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    pub n_tr: usize,
    /// `(t1, t2)` in ms for each atom.
    pub params: Vec<(f64, f64)>,
    pub atoms: Vec<Complex64>,
    /// Each atom divided by its norm.
    pub unit_atoms: Vec<Complex64>,
    pub norms: Vec<f64>,
    pub schedule_hash: String,
}

impl Dictionary {
    pub fn from_atoms(params: Vec<(f64, f64)>, atoms: Vec<Complex64>, n_tr: usize, schedule_hash: String) -> Result<Self> {
        if params.is_empty() {
            return Err(QfitError::Invalid("dictionary has no atoms".into()));
        }
        if atoms.len() != params.len() * n_tr {
            return Err(QfitError::shape("dictionary atoms", params.len() * n_tr, atoms.len()));
        }
        let mut norms = Vec::with_capacity(params.len());
        let mut unit_atoms = Vec::with_capacity(atoms.len());
        for a in atoms.chunks(n_tr) {
            let norm = a.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt();
            norms.push(norm);
            let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            unit_atoms.extend(a.iter().map(|v| v * inv));
        }
        Ok(Self {
            n_tr,
            params,
            atoms,
            unit_atoms,
            norms,
            schedule_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[Complex64] {
        &self.atoms[i * self.n_tr..(i + 1) * self.n_tr]
    }

    pub fn unit_atom(&self, i: usize) -> &[Complex64] {
        &self.unit_atoms[i * self.n_tr..(i + 1) * self.n_tr]
    }
}

/// One EPG simulation per admissible grid pair, ordered by grid index.
pub fn generate_dictionary(grid: &DictionaryGrid, sched: &FispSchedule) -> Result<Dictionary> {
    sched.validate()?;
    let params = grid.admissible();
    if params.is_empty() {
        return Err(QfitError::Invalid("no admissible (T1, T2) pairs in grid".into()));
    }
    let rows: Vec<Vec<Complex64>> = params
        .par_iter()
        .map(|&(t1, t2)| epg_fisp(&TissueParams::new(t1, t2, 1.0), sched))
        .collect::<Result<_>>()?;
    let atoms = rows.into_iter().flatten().collect();
    Dictionary::from_atoms(params, atoms, sched.n_tr(), sched.hash())
}
