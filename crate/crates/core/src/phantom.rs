//! Ellipse-based numerical phantoms with smooth intra-region variation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QfitError, Result};
use crate::signal::TissueParams;
use crate::stack::ParameterMap;

/// Ellipse in normalized coordinates: the image spans `[-1, 1]` on both axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub center: [f64; 2],
    pub radii: [f64; 2],
    /// Rotation in degrees.
    pub angle_deg: f64,
    pub tissue: TissueParams,
}

impl Region {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.radii[0]).powi(2) + (v / self.radii[1]).powi(2) <= 1.0
    }
}

/// Later regions paint over earlier ones; pixels in no region are background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<Region>,
    /// Relative amplitude of the smooth multiplicative variation.
    pub variation: f64,
    pub seed: u64,
}

fn region(name: &str, center: [f64; 2], radii: [f64; 2], angle_deg: f64, t1: f64, t2: f64, m0: f64) -> Region {
    Region {
        name: name.into(),
        center,
        radii,
        angle_deg,
        tissue: TissueParams {
            t1_ms: t1,
            t2_ms: t2,
            m0,
            phase_rad: 0.0,
        },
    }
}

impl PhantomSpec {
    /// Brain-like layout: gray matter shell, white matter, two ventricles,
    /// one lesion, zero background.
    pub fn brain(size: usize, seed: u64) -> Self {
        Self {
            height: size,
            width: size,
            regions: vec![
                region("gm", [0.0, 0.0], [0.82, 0.9], 0.0, 1300.0, 90.0, 0.8),
                region("wm", [0.0, 0.02], [0.62, 0.7], 0.0, 800.0, 70.0, 0.65),
                region("csf_left", [-0.2, -0.05], [0.13, 0.36], 12.0, 2800.0, 300.0, 1.0),
                region("csf_right", [0.2, -0.05], [0.13, 0.36], -12.0, 2800.0, 300.0, 1.0),
                region("lesion", [0.33, 0.45], [0.14, 0.12], 30.0, 1500.0, 150.0, 0.85),
            ],
            variation: 0.05,
            seed,
        }
    }

    /// One region covering the whole field of view.
    pub fn uniform(height: usize, width: usize, tissue: TissueParams) -> Self {
        Self {
            height,
            width,
            regions: vec![Region {
                name: "field".into(),
                center: [0.0, 0.0],
                radii: [2.0, 2.0],
                angle_deg: 0.0,
                tissue,
            }],
            variation: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(QfitError::Config("phantom grid must be at least 2x2".into()));
        }
        if !(0.0..0.5).contains(&self.variation) {
            return Err(QfitError::Config("phantom variation must be in [0, 0.5)".into()));
        }
        for r in &self.regions {
            if r.radii.iter().any(|&v| !(v > 0.0)) {
                return Err(QfitError::Config(format!("region {} has non-positive radius", r.name)));
            }
            if r.center.iter().any(|c| c.abs() > 1.0) {
                return Err(QfitError::Config(format!("region {} centered outside the grid", r.name)));
            }
            r.tissue.validate()?;
        }
        Ok(())
    }
}

/// Ground truth produced by [`make_phantom`].
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub m0: ParameterMap,
    pub t1: ParameterMap,
    pub t2: ParameterMap,
    /// Region index per voxel; `None` for background.
    pub labels: Vec<Option<usize>>,
    pub mask: Vec<bool>,
}

/// Smooth field in roughly `[-1, 1]` built from a few low-frequency cosines.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    const TERMS: usize = 4;
    let terms: Vec<(f64, f64, f64)> = (0..TERMS)
        .map(|_| {
            (
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let s: f64 = terms
                .iter()
                .map(|&(fx, fy, ph)| (std::f64::consts::PI * (fx * u + fy * v) + ph).cos())
                .sum();
            out.push(s / TERMS as f64);
        }
    }
    out
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let xn = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let yn = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            for (i, r) in spec.regions.iter().enumerate() {
                if r.contains(xn, yn) {
                    labels[y * w + x] = Some(i);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fields: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(&mut rng, h, w)).collect();
    let mask: Vec<bool> = labels.iter().map(Option::is_some).collect();
    let mut m0 = vec![0.0; h * w];
    let mut t1 = vec![0.0; h * w];
    let mut t2 = vec![0.0; h * w];
    for (v, label) in labels.iter().enumerate() {
        let Some(i) = label else { continue };
        let tissue = &spec.regions[*i].tissue;
        let f = |k: usize| 1.0 + spec.variation * fields[k][v];
        m0[v] = tissue.m0 * f(0);
        t1[v] = tissue.t1_ms * f(1);
        t2[v] = (tissue.t2_ms * f(2)).min(t1[v]);
    }
    Ok(Phantom {
        m0: ParameterMap::new(h, w, m0, mask.clone())?,
        t1: ParameterMap::new(h, w, t1, mask.clone())?,
        t2: ParameterMap::new(h, w, t2, mask.clone())?,
        labels,
        mask,
    })
}
