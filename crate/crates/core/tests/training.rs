use qfit_autodiff::{Graph, Tensor};
use qfit_core::loss::SsimConfig;
use qfit_core::phantom::{make_phantom, PhantomSpec};
use qfit_core::signal::{default_schedule, epg_fisp, generate_dictionary, mono_exp_synth, DictionaryGrid, EchoProtocol, TissueParams};
use qfit_core::stack::{ContrastStack, ParameterMap};
use qfit_core::subspace::{compress_dictionary, synth_timeseries, CoefficientMaps, CompressedDictionary};
use qfit_core::train::{
    mrf_network_config, relaxometry_loss, relaxometry_loss_of_maps, train_mrf, train_relaxometry, MrfTask,
    RelaxometryOptions, RelaxometryTask, TrainingConfig,
};
use qfit_core::QfitError;

fn two_region(size: usize) -> (ParameterMap, ParameterMap) {
    let n = size * size;
    let inner = |v: usize| {
        let (y, x) = ((v / size) as f64 - size as f64 / 2.0, (v % size) as f64 - size as f64 / 2.0);
        x * x + y * y < (size as f64 / 4.0).powi(2)
    };
    let m0 = (0..n).map(|v| if inner(v) { 1.0 } else { 0.7 }).collect();
    let t2 = (0..n).map(|v| if inner(v) { 120.0 } else { 60.0 }).collect();
    (ParameterMap::new(size, size, m0, vec![true; n]).unwrap(), ParameterMap::new(size, size, t2, vec![true; n]).unwrap())
}

fn relax_task(size: usize, width: usize, blocks: usize, iterations: usize, lr: f64) -> RelaxometryTask {
    let proto = EchoProtocol::gre_10_echo();
    let (m0, t2) = two_region(size);
    let mut training = TrainingConfig {
        iterations,
        ..TrainingConfig::default()
    };
    training.adam.lr = lr;
    RelaxometryTask {
        input: mono_exp_synth(&m0, &t2, &proto).unwrap(),
        protocol: proto,
        options: RelaxometryOptions {
            base_width: width,
            n_residual_blocks: blocks,
            ..RelaxometryOptions::default()
        },
        training,
    }
}

#[test]
fn loss_drops_within_fifty_iterations() {
    let r = train_relaxometry(&relax_task(16, 8, 2, 50, 1e-3)).unwrap();
    let h = &r.model.history;
    assert!(h.losses.iter().skip(1).any(|&l| l < h.losses[0]), "{:?}", h.losses);
}

#[test]
fn best_iterate_never_worse_than_final() {
    let r = train_relaxometry(&relax_task(16, 4, 1, 80, 3e-3)).unwrap();
    let h = &r.model.history;
    assert!(h.best_loss <= *h.losses.last().unwrap());
    assert_eq!(h.losses[h.best_iteration], h.best_loss);
}

#[test]
fn seeded_training_is_bit_identical() {
    let t = relax_task(16, 4, 1, 30, 1e-3);
    let (a, b) = (train_relaxometry(&t).unwrap(), train_relaxometry(&t).unwrap());
    assert_eq!(a.t2, b.t2);
    assert_eq!(a.m0, b.m0);
    assert_eq!(a.model.history, b.model.history);
}

#[test]
fn noiseless_two_region_t2_is_recovered() {
    let t = relax_task(32, 8, 9, 2000, 2e-3);
    let (_, truth) = two_region(32);
    let r = train_relaxometry(&t).unwrap();
    let mut rel: Vec<f64> = r.t2.values.iter().zip(&truth.values).map(|(a, b)| (a - b).abs() / b).collect();
    rel.sort_by(f64::total_cmp);
    let median = rel[rel.len() / 2];
    assert!(median < 0.02, "median relative T2 error {median}");
}

#[test]
fn oracle_maps_reproduce_plain_ssim_of_resynthesis() {
    let t = relax_task(16, 4, 1, 1, 1e-3);
    let (m0, t2) = two_region(16);
    let bumped = ParameterMap::new(16, 16, t2.values.iter().map(|v| v * 1.1).collect(), t2.mask.clone()).unwrap();
    let via_pipeline = relaxometry_loss_of_maps(&t, &m0, &bumped).unwrap();
    let resynth = mono_exp_synth(&m0, &bumped, &t.protocol).unwrap();
    let scale = qfit_core::stack::percentile_magnitude(&t.input, 0.99);
    let cfg = SsimConfig {
        dynamic_range: t.input.max_abs() / scale,
        ..SsimConfig::default()
    };
    let direct = qfit_core::loss::ssim_loss_stacks(&t.input.scaled(1.0 / scale), &resynth.scaled(1.0 / scale), &cfg).unwrap();
    assert!((via_pipeline - direct).abs() < 1e-12, "{via_pipeline} vs {direct}");
    assert!(relaxometry_loss_of_maps(&t, &m0, &t2).unwrap().abs() < 1e-9);
}

#[test]
fn loss_ignores_batch_order() {
    let proto = EchoProtocol::gre_10_echo();
    let (m0, t2) = two_region(12);
    let other_t2 = ParameterMap::new(12, 12, t2.values.iter().map(|v| v * 0.8).collect(), t2.mask.clone()).unwrap();
    let a = mono_exp_synth(&m0, &t2, &proto).unwrap();
    let b = mono_exp_synth(&m0, &other_t2, &proto).unwrap();
    let batch = |first: &[&ParameterMap; 2], second: &[&ParameterMap; 2], inputs: [&ContrastStack; 2]| {
        let g = Graph::new();
        let plane = |maps: [&ParameterMap; 2]| [maps[0].values.clone(), maps[1].values.clone()].concat();
        let m = g.constant(Tensor::new(vec![2, 1, 12, 12], plane([first[0], second[0]])).unwrap()).unwrap();
        let t = g.constant(Tensor::new(vec![2, 1, 12, 12], plane([first[1], second[1]])).unwrap()).unwrap();
        let x = g
            .constant(Tensor::new(vec![2, 10, 12, 12], [inputs[0].real.clone(), inputs[1].real.clone()].concat()).unwrap())
            .unwrap();
        let bumped = g.scale(t, 1.05).unwrap();
        g.item(relaxometry_loss(&g, m, bumped, x, &proto, &SsimConfig::default()).unwrap()).unwrap()
    };
    let ab = batch(&[&m0, &t2], &[&m0, &other_t2], [&a, &b]);
    let ba = batch(&[&m0, &other_t2], &[&m0, &t2], [&b, &a]);
    assert!((ab - ba).abs() < 1e-14, "{ab} vs {ba}");
}

struct MrfFixture {
    basis: qfit_core::subspace::SubspaceBasis,
    dict: qfit_core::signal::Dictionary,
    truth: CoefficientMaps,
}

fn mrf_fixture(size: usize) -> MrfFixture {
    let sched = default_schedule();
    let dict = generate_dictionary(&DictionaryGrid::stepped((200.0, 3000.0, 200.0), (20.0, 300.0, 20.0)), &sched).unwrap();
    let basis = compress_dictionary(&dict, 0.95).unwrap();
    let p = make_phantom(&PhantomSpec::brain(size, 2)).unwrap();
    let mut truth = CoefficientMaps::zeros(basis.rank, size, size);
    for v in 0..size * size {
        if p.mask[v] {
            let tissue = TissueParams::new(p.t1.values[v], p.t2.values[v], p.m0.values[v]);
            let s = epg_fisp(&tissue, &sched).unwrap();
            truth.set_voxel(v, &qfit_core::subspace::project(&s, &basis).unwrap());
        }
    }
    MrfFixture { basis, dict, truth }
}

#[test]
fn rank_mismatch_is_rejected_before_training() {
    let f = mrf_fixture(8);
    let input = synth_timeseries(&f.truth, &f.basis).unwrap();
    let mut network = mrf_network_config(&f.basis, false, 4, 1);
    network.out_activations.pop();
    let task = MrfTask {
        input,
        basis: f.basis.clone(),
        dictionary: None,
        network,
        raw_input: false,
        training: TrainingConfig::default(),
    };
    assert!(matches!(train_mrf(&task), Err(QfitError::Config(_))));
}

#[test]
fn mrf_training_recovers_exact_subspace_coefficients() {
    let f = mrf_fixture(16);
    let input = synth_timeseries(&f.truth, &f.basis).unwrap();
    let mut training = TrainingConfig {
        iterations: 20000,
        early_stop_window: 0,
        ..TrainingConfig::default()
    };
    training.adam.lr = 3e-4;
    let task = MrfTask {
        input,
        dictionary: Some(CompressedDictionary::new(&f.dict, &f.basis).unwrap()),
        network: mrf_network_config(&f.basis, false, 16, 2),
        raw_input: false,
        training,
        basis: f.basis.clone(),
    };
    let r = train_mrf(&task).unwrap();
    let err: f64 = r.coefficients.planes.iter().zip(&f.truth.planes).map(|(a, b)| (a - b).powi(2)).sum();
    let norm: f64 = f.truth.planes.iter().map(|b| b * b).sum();
    let rel = (err / norm).sqrt();
    assert!(rel < 0.01, "coefficient RMS error {rel}");
    let planes = [task.input.real.clone(), task.input.imag.clone().unwrap()].concat();
    let mean_abs = planes.iter().map(|v| v.abs()).sum::<f64>() / planes.len() as f64 / r.model.input_scale;
    assert!(r.model.history.best_loss < 1e-3 * mean_abs, "L1 {} vs mean {mean_abs}", r.model.history.best_loss);
    assert!(r.maps.is_some());
}
