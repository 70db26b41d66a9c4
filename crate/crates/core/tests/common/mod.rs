//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use num_complex::Complex64;
use qfit_core::signal::{FispSchedule, TissueParams};

/// Brute-force FISP simulation: `n_spins` isochromats with uniformly spaced
/// dephasing per TR, each rotated, relaxed and precessed explicitly.
pub fn isochromat_fisp(p: &TissueParams, sched: &FispSchedule, n_spins: usize) -> Vec<Complex64> {
    let mut m: Vec<[f64; 3]> = vec![[0.0, 0.0, p.m0]; n_spins];
    let relax = |m: &mut [[f64; 3]], dt: f64| {
        let e1 = (-dt / p.t1_ms).exp();
        let e2 = (-dt / p.t2_ms).exp();
        for s in m.iter_mut() {
            s[0] *= e2;
            s[1] *= e2;
            s[2] = s[2] * e1 + p.m0 * (1.0 - e1);
        }
    };
    if sched.inversion {
        m.iter_mut().for_each(|s| s[2] = -s[2]);
        relax(&mut m, sched.inversion_delay_ms);
    }
    let phases: Vec<(f64, f64)> = (0..n_spins)
        .map(|j| (std::f64::consts::TAU * j as f64 / n_spins as f64).sin_cos())
        .collect();
    let mut out = Vec::with_capacity(sched.n_tr());
    for n in 0..sched.n_tr() {
        let (sa, ca) = sched.flip_angles_deg[n].to_radians().sin_cos();
        for s in m.iter_mut() {
            let (y, z) = (s[1], s[2]);
            s[1] = y * ca - z * sa;
            s[2] = y * sa + z * ca;
        }
        relax(&mut m, sched.te_ms[n]);
        let (sx, sy) = m.iter().fold((0.0, 0.0), |(a, b), s| (a + s[0], b + s[1]));
        out.push(Complex64::new(sx, sy) / n_spins as f64);
        relax(&mut m, sched.tr_ms[n] - sched.te_ms[n]);
        for (s, &(sn, cs)) in m.iter_mut().zip(&phases) {
            let (x, y) = (s[0], s[1]);
            s[0] = x * cs - y * sn;
            s[1] = x * sn + y * cs;
        }
    }
    let ph = Complex64::from_polar(1.0, p.phase_rad);
    out.into_iter().map(|v| v * ph).collect()
}

pub fn relative_l2(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

/// SSIM of one plane at every position where the full Gaussian window fits,
/// computed straight from the definition with a 2-D window.
pub fn ssim_plane_direct(a: &[f64], b: &[f64], h: usize, w: usize, size: usize, sigma: f64, c1: f64, c2: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut win = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - r as f64, j as f64 - r as f64);
            win[i * size + j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let mut out = Vec::new();
    for y in r..h as isize - r {
        for x in r..w as isize - r {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in -r..=r {
                for j in -r..=r {
                    let (yy, xx) = (y + i, x + j);
                    let wt = win[((i + r) * size as isize + j + r) as usize];
                    let (va, vb) = (a[yy as usize * w + xx as usize], b[yy as usize * w + xx as usize]);
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            out.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    out
}

fn compressed_agrees(
    s: &[Complex64],
    dict: &qfit_core::signal::Dictionary,
    basis: &qfit_core::subspace::SubspaceBasis,
    cd: &qfit_core::subspace::CompressedDictionary,
) -> bool {
    use qfit_core::subspace::{match_compressed, project};
    let full = qfit_core::baselines::dict_match_full(s, dict).unwrap();
    full.index == match_compressed(&project(s, basis).unwrap(), cd).unwrap().index
}

/// Fraction of noiseless atoms on which compressed and exhaustive matching
/// pick the same atom.
pub fn clean_agreement(dict: &qfit_core::signal::Dictionary, basis: &qfit_core::subspace::SubspaceBasis) -> f64 {
    let cd = qfit_core::subspace::CompressedDictionary::new(dict, basis).unwrap();
    let hits = (0..dict.len()).filter(|&i| compressed_agrees(dict.atom(i), dict, basis, &cd)).count();
    hits as f64 / dict.len() as f64
}

/// Same fraction over `trials` random atoms with complex Gaussian noise at
/// SNR 20 against the atom's RMS magnitude.
pub fn noisy_agreement(
    dict: &qfit_core::signal::Dictionary,
    basis: &qfit_core::subspace::SubspaceBasis,
    trials: usize,
    seed: u64,
) -> f64 {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    let cd = qfit_core::subspace::CompressedDictionary::new(dict, basis).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for _ in 0..trials {
        let atom = dict.atom(rng.random_range(0..dict.len()));
        let rms = (atom.iter().map(Complex64::norm_sqr).sum::<f64>() / atom.len() as f64).sqrt();
        let noise = Normal::new(0.0, rms / 20.0 / std::f64::consts::SQRT_2).unwrap();
        let s: Vec<Complex64> = atom
            .iter()
            .map(|v| v + Complex64::new(noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect();
        hits += compressed_agrees(&s, dict, basis, &cd) as usize;
    }
    hits as f64 / trials as f64
}
