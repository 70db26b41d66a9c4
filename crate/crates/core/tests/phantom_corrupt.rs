use proptest::prelude::*;
use qfit_core::corrupt::{add_gaussian_noise, kept_lines, sampling_masks, undersample_frames};
use qfit_core::metrics::rmse;
use qfit_core::phantom::{make_phantom, PhantomSpec};
use qfit_core::signal::{mono_exp_synth, EchoProtocol};
use qfit_core::stack::{ContrastStack, ParameterMap};

#[test]
fn brain_region_means_match_specification() {
    let spec = PhantomSpec::brain(64, 1);
    let p = make_phantom(&spec).unwrap();
    for (i, region) in spec.regions.iter().enumerate() {
        let vox: Vec<usize> = (0..p.labels.len()).filter(|&v| p.labels[v] == Some(i)).collect();
        assert!(!vox.is_empty(), "region {} is empty", region.name);
        for (map, want) in [(&p.t2, region.tissue.t2_ms), (&p.t1, region.tissue.t1_ms), (&p.m0, region.tissue.m0)] {
            let mean = vox.iter().map(|&v| map.values[v]).sum::<f64>() / vox.len() as f64;
            assert!((mean - want).abs() <= spec.variation * want, "{}: {mean} vs {want}", region.name);
        }
    }
    let names: Vec<&str> = spec.regions.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["gm", "wm", "csf_left", "csf_right", "lesion"]);
}

#[test]
fn noise_has_requested_variance() {
    let n = 1_000_000;
    let stack = ContrastStack::real(1, 1000, 1000, vec![0.25; n], vec![0.0]).unwrap();
    let noisy = add_gaussian_noise(&stack, 0.001, 5).unwrap();
    let d: Vec<f64> = noisy.real.iter().map(|v| v - 0.25).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var - 0.001).abs() < 0.02 * 0.001, "variance {var}");
    assert!(mean.abs() < 1e-4);

    let other = add_gaussian_noise(&stack, 0.001, 6).unwrap();
    assert_ne!(other.real, noisy.real);
    assert_eq!(add_gaussian_noise(&stack, 0.001, 5).unwrap(), noisy);
    assert_eq!(add_gaussian_noise(&stack, 0.0, 5).unwrap(), stack);
}

fn echo_stack(size: usize) -> ContrastStack {
    let p = make_phantom(&PhantomSpec::brain(size, 1)).unwrap();
    mono_exp_synth(&p.m0, &p.t2, &EchoProtocol::gre_10_echo()).unwrap()
}

#[test]
fn full_sampling_is_identity() {
    let s = echo_stack(32);
    let u = undersample_frames(&s, 1, 3).unwrap();
    assert!(s.real.iter().zip(&u.real).all(|(a, b)| (a - b).abs() < 1e-10));
    assert!(u.imag.unwrap().iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn retained_line_counts() {
    for (lines, r) in [(64, 6), (64, 2), (64, 4), (48, 3), (32, 8)] {
        let masks = sampling_masks(lines, 20, r, 1).unwrap();
        let want = 8 + (lines / r).saturating_sub(8);
        assert_eq!(kept_lines(lines, r), want);
        for m in &masks {
            assert_eq!(m.iter().filter(|&&b| b).count(), want);
            for ky in -4isize..4 {
                assert!(m[ky.rem_euclid(lines as isize) as usize]);
            }
        }
        if want > 8 {
            assert!(masks.windows(2).any(|w| w[0] != w[1]), "pattern should vary across frames");
        }
    }
}

#[test]
fn undersampled_energy_stays_close_to_original() {
    let s = echo_stack(64);
    let u = undersample_frames(&s, 6, 2).unwrap();
    let hw = s.plane_len();
    let im = u.imag.as_ref().unwrap();
    let ratios: Vec<f64> = (0..s.frames)
        .map(|f| {
            let r = f * hw..(f + 1) * hw;
            let orig: f64 = s.real[r.clone()].iter().map(|v| v * v).sum();
            let aliased: f64 = u.real[r.clone()].iter().zip(&im[r]).map(|(a, b)| a * a + b * b).sum();
            aliased / orig
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - 1.0).abs() < 0.2, "mean energy ratio {mean}");
}

#[test]
fn rmse_simple_cases() {
    let t = ParameterMap::new(2, 2, vec![0.0; 4], vec![true; 4]).unwrap();
    let e = ParameterMap::filled(2, 2, -3.5);
    assert_eq!(rmse(&t, &t, &[true; 4]).unwrap(), 0.0);
    assert!((rmse(&e, &t, &[true; 4]).unwrap() - 3.5).abs() < 1e-15);
    assert!(rmse(&e, &t, &[false; 4]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_matches_scalar_accumulation(vals in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3, any::<bool>()), 1..60)) {
        prop_assume!(vals.iter().any(|v| v.2));
        let n = vals.len();
        let est = ParameterMap::new(1, n, vals.iter().map(|v| v.0).collect(), vec![true; n]).unwrap();
        let truth = ParameterMap::new(1, n, vals.iter().map(|v| v.1).collect(), vec![true; n]).unwrap();
        let mask: Vec<bool> = vals.iter().map(|v| v.2).collect();
        let mut acc = 0.0;
        let mut count = 0.0;
        for &(a, b, m) in &vals {
            if m {
                acc += (a - b) * (a - b);
                count += 1.0;
            }
        }
        let want = (acc / count).sqrt();
        prop_assert!((rmse(&est, &truth, &mask).unwrap() - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn phantom_is_deterministic_and_admissible(seed in 0u64..500) {
        let a = make_phantom(&PhantomSpec::brain(24, seed)).unwrap();
        prop_assert_eq!(&a, &make_phantom(&PhantomSpec::brain(24, seed)).unwrap());
        for v in 0..a.mask.len() {
            if a.mask[v] {
                prop_assert!(a.t2.values[v] <= a.t1.values[v] && a.t2.values[v] > 0.0);
            } else {
                prop_assert!(a.m0.values[v] == 0.0 && a.t2.values[v] == 0.0);
            }
        }
    }
}
