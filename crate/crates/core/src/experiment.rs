//! Phantom experiments comparing voxel-wise baselines with scan-specific
//! network training.

use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{fit_volume, match_volume_compressed, MrfMaps, RelaxMethod, VarproConfig};
use crate::corrupt::{add_gaussian_noise, undersample_frames};
use crate::error::{QfitError, Result};
use crate::config::RunConfig;
use crate::metrics::{joint_mask, rmse};
use crate::phantom::{make_phantom, Phantom, PhantomSpec};
use crate::signal::epg::{epg_fisp, FispSchedule};
use crate::signal::mono_exp::{mono_exp_synth, EchoProtocol};
use crate::signal::{generate_dictionary, Dictionary, DictionaryGrid, TissueParams};
use crate::stack::{ContrastStack, ParameterMap};
use crate::subspace::{compress_dictionary, CoefficientMaps, CompressedDictionary, SubspaceBasis};
use crate::train::{
    mrf_network_config, train_mrf, train_relaxometry, MrfTask, RelaxometryOptions, RelaxometryTask, TrainingConfig,
};

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// One RMSE measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub method: String,
    pub parameter: String,
    pub rmse: f64,
    pub n_voxels: usize,
}

/// `baseline / proposed` of seed-averaged RMSEs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub parameter: String,
    pub baseline: String,
    pub proposed: String,
    pub baseline_rmse: f64,
    pub proposed_rmse: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub ratios: Vec<Ratio>,
    /// Wall-clock seconds; excluded from the deterministic outputs.
    #[serde(skip)]
    pub runtime_s: f64,
}

impl ExperimentReport {
    pub fn mean_rmse(&self, method: &str, parameter: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.parameter == parameter)
            .map(|r| r.rmse)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn ratio(&self, parameter: &str, baseline: &str, proposed: &str) -> Option<f64> {
        self.ratios
            .iter()
            .find(|r| r.parameter == parameter && r.baseline == baseline && r.proposed == proposed)
            .map(|r| r.ratio)
    }

    fn add_ratio(&mut self, parameter: &str, baseline: &str, proposed: &str) {
        if let (Some(b), Some(p)) = (self.mean_rmse(baseline, parameter), self.mean_rmse(proposed, parameter)) {
            self.ratios.push(Ratio {
                parameter: parameter.into(),
                baseline: baseline.into(),
                proposed: proposed.into(),
                baseline_rmse: b,
                proposed_rmse: p,
                ratio: b / p,
            });
        }
    }

    /// Raw table: one line per (seed, method, parameter).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| QfitError::Invalid(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| QfitError::Invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// A map produced during an experiment, kept for export.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedMap {
    pub seed: u64,
    pub method: String,
    pub parameter: String,
    pub map: ParameterMap,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub maps: Vec<NamedMap>,
}

fn record(rows: &mut Vec<ReportRow>, maps: &mut Vec<NamedMap>, seed: u64, method: &str, parameter: &str, est: &ParameterMap, truth: &ParameterMap, mask: &[bool]) -> Result<()> {
    let m = joint_mask(mask, &[est]);
    rows.push(ReportRow {
        seed,
        method: method.into(),
        parameter: parameter.into(),
        rmse: rmse(est, truth, &m)?,
        n_voxels: m.iter().filter(|&&b| b).count(),
    });
    maps.push(NamedMap {
        seed,
        method: method.into(),
        parameter: parameter.into(),
        map: est.clone(),
    });
    Ok(())
}

fn check_seeds(seeds: &[u64]) -> Result<Vec<u64>> {
    if seeds.is_empty() {
        return Err(QfitError::Config("experiment needs at least one seed".into()));
    }
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    Ok(s)
}

// ---------------------------------------------------------------- noise

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseExperimentConfig {
    pub size: usize,
    pub phantom_seed: u64,
    pub protocol: EchoProtocol,
    /// Noise variance relative to the unit-normalized stack.
    pub variance: f64,
    pub seeds: Vec<u64>,
    pub varpro: VarproConfig,
    pub network: RelaxometryOptions,
    pub training: TrainingConfig,
    /// Skip network training and report baselines only.
    pub baselines_only: bool,
}

impl Default for NoiseExperimentConfig {
    fn default() -> Self {
        RunConfig::default().noise_experiment()
    }
}

/// Ground-truth echo stack divided by its maximum, with matching truth maps.
pub fn normalized_echo_stack(phantom: &Phantom, proto: &EchoProtocol) -> Result<(ContrastStack, ParameterMap)> {
    let clean = mono_exp_synth(&phantom.m0, &phantom.t2, proto)?;
    let peak = clean.max_abs();
    if !(peak > 0.0) {
        return Err(QfitError::Invalid("phantom produces no signal".into()));
    }
    let mut m0 = phantom.m0.clone();
    m0.values.iter_mut().for_each(|v| *v /= peak);
    Ok((clean.scaled(1.0 / peak), m0))
}

pub fn run_noise_experiment(cfg: &NoiseExperimentConfig) -> Result<ExperimentOutput> {
    let start = Instant::now();
    let seeds = check_seeds(&cfg.seeds)?;
    let phantom = make_phantom(&PhantomSpec::brain(cfg.size, cfg.phantom_seed))?;
    let (clean, m0_truth) = normalized_echo_stack(&phantom, &cfg.protocol)?;
    let mask = &phantom.mask;
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for &seed in &seeds {
        let noisy = add_gaussian_noise(&clean, cfg.variance, seed)?;
        let vp = fit_volume(&noisy, &cfg.protocol, &RelaxMethod::Varpro(cfg.varpro.clone()), Some(mask))?;
        record(&mut rows, &mut maps, seed, "varpro", "t2", &vp.t2, &phantom.t2, mask)?;
        record(&mut rows, &mut maps, seed, "varpro", "m0", &vp.m0, &m0_truth, mask)?;
        let ll = fit_volume(&noisy, &cfg.protocol, &RelaxMethod::Loglinear, Some(mask))?;
        record(&mut rows, &mut maps, seed, "loglinear", "t2", &ll.t2, &phantom.t2, mask)?;
        record(&mut rows, &mut maps, seed, "loglinear", "m0", &ll.m0, &m0_truth, mask)?;
        if cfg.baselines_only {
            continue;
        }
        let task = RelaxometryTask {
            input: noisy,
            protocol: cfg.protocol.clone(),
            options: cfg.network.clone(),
            training: TrainingConfig {
                seed,
                ..cfg.training.clone()
            },
        };
        let net = train_relaxometry(&task)?;
        record(&mut rows, &mut maps, seed, "network", "t2", &net.t2, &phantom.t2, mask)?;
        record(&mut rows, &mut maps, seed, "network", "m0", &net.m0, &m0_truth, mask)?;
    }
    let mut report = ExperimentReport {
        experiment: "noise".into(),
        config_hash: config_hash(cfg),
        seeds,
        rows,
        ratios: Vec::new(),
        runtime_s: 0.0,
    };
    for p in ["t2", "m0"] {
        report.add_ratio(p, "varpro", "network");
        report.add_ratio(p, "loglinear", "network");
    }
    report.runtime_s = start.elapsed().as_secs_f64();
    Ok(ExperimentOutput { report, maps })
}

// ---------------------------------------------------------------- MRF

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrfExperimentConfig {
    pub size: usize,
    pub phantom_seed: u64,
    pub schedule: FispSchedule,
    pub grid: DictionaryGrid,
    pub energy_target: f64,
    pub acceleration: usize,
    /// Noise variance relative to the unit-normalized time series.
    pub variance: f64,
    pub seeds: Vec<u64>,
    pub base_width: usize,
    pub n_residual_blocks: usize,
    pub raw_input: bool,
    pub training: TrainingConfig,
    pub baselines_only: bool,
}

impl Default for MrfExperimentConfig {
    fn default() -> Self {
        RunConfig::default().mrf_experiment()
    }
}

/// Fingerprint per voxel with amplitude M0, divided by the stack maximum.
/// Returns the stack and the normalized M0 truth.
pub fn normalized_mrf_stack(phantom: &Phantom, sched: &FispSchedule) -> Result<(ContrastStack, ParameterMap)> {
    let (h, w) = (phantom.m0.height, phantom.m0.width);
    let hw = h * w;
    let t = sched.n_tr();
    let courses: Vec<Vec<Complex64>> = (0..hw)
        .into_par_iter()
        .map(|v| {
            if !phantom.mask[v] {
                return Ok(vec![Complex64::new(0.0, 0.0); t]);
            }
            epg_fisp(
                &TissueParams::new(phantom.t1.values[v], phantom.t2.values[v], phantom.m0.values[v]),
                sched,
            )
        })
        .collect::<Result<_>>()?;
    let peak = courses.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(QfitError::Invalid("phantom produces no signal".into()));
    }
    let mut re = vec![0.0; t * hw];
    let mut im = vec![0.0; t * hw];
    for (v, c) in courses.iter().enumerate() {
        for (f, z) in c.iter().enumerate() {
            re[f * hw + v] = z.re / peak;
            im[f * hw + v] = z.im / peak;
        }
    }
    let mut m0 = phantom.m0.clone();
    m0.values.iter_mut().for_each(|v| *v /= peak);
    Ok((ContrastStack::complex(t, h, w, re, im, sched.tr_ms.clone())?, m0))
}

/// Dictionary, basis and compressed atoms for an MRF experiment.
#[derive(Clone, Debug)]
pub struct MrfModel {
    pub dictionary: Dictionary,
    pub basis: SubspaceBasis,
    pub compressed: CompressedDictionary,
}

impl MrfModel {
    pub fn build(cfg: &MrfExperimentConfig) -> Result<Self> {
        let dictionary = generate_dictionary(&cfg.grid, &cfg.schedule)?;
        let basis = compress_dictionary(&dictionary, cfg.energy_target)?;
        let compressed = CompressedDictionary::new(&dictionary, &basis)?;
        Ok(Self {
            dictionary,
            basis,
            compressed,
        })
    }
}

fn record_mrf(rows: &mut Vec<ReportRow>, maps: &mut Vec<NamedMap>, seed: u64, method: &str, est: &MrfMaps, phantom: &Phantom, m0_truth: &ParameterMap) -> Result<()> {
    let mask = &phantom.mask;
    record(rows, maps, seed, method, "t1", &est.t1, &phantom.t1, mask)?;
    record(rows, maps, seed, method, "t2", &est.t2, &phantom.t2, mask)?;
    record(rows, maps, seed, method, "m0", &est.m0, m0_truth, mask)
}

pub fn run_mrf_experiment(cfg: &MrfExperimentConfig) -> Result<ExperimentOutput> {
    let model = MrfModel::build(cfg)?;
    run_mrf_experiment_with(cfg, &model)
}

/// Runs the experiment with a prebuilt dictionary and basis.
pub fn run_mrf_experiment_with(cfg: &MrfExperimentConfig, model: &MrfModel) -> Result<ExperimentOutput> {
    let start = Instant::now();
    let seeds = check_seeds(&cfg.seeds)?;
    if model.basis.n_tr != cfg.schedule.n_tr() || model.dictionary.schedule_hash != cfg.schedule.hash() {
        return Err(QfitError::Config("dictionary was built for a different schedule".into()));
    }
    let phantom = make_phantom(&PhantomSpec::brain(cfg.size, cfg.phantom_seed))?;
    let (clean, m0_truth) = normalized_mrf_stack(&phantom, &cfg.schedule)?;
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for &seed in &seeds {
        let aliased = undersample_frames(&clean, cfg.acceleration, seed)?;
        let input = add_gaussian_noise(&aliased, cfg.variance, seed.wrapping_add(1 << 32))?;
        let coeffs = CoefficientMaps::from_stack(&input, &model.basis)?;
        let base = match_volume_compressed(&coeffs, &model.compressed, Some(&phantom.mask))?;
        record_mrf(&mut rows, &mut maps, seed, "subspace_match", &base, &phantom, &m0_truth)?;
        if cfg.baselines_only {
            continue;
        }
        let task = MrfTask {
            input,
            basis: model.basis.clone(),
            dictionary: Some(model.compressed.clone()),
            network: mrf_network_config(&model.basis, cfg.raw_input, cfg.base_width, cfg.n_residual_blocks),
            raw_input: cfg.raw_input,
            training: TrainingConfig {
                seed,
                ..cfg.training.clone()
            },
        };
        let net = train_mrf(&task)?;
        let est = net.maps.expect("dictionary supplied");
        record_mrf(&mut rows, &mut maps, seed, "network", &est, &phantom, &m0_truth)?;
    }
    let mut report = ExperimentReport {
        experiment: "mrf".into(),
        config_hash: config_hash(cfg),
        seeds,
        rows,
        ratios: Vec::new(),
        runtime_s: 0.0,
    };
    for p in ["t1", "t2", "m0"] {
        report.add_ratio(p, "subspace_match", "network");
    }
    report.runtime_s = start.elapsed().as_secs_f64();
    Ok(ExperimentOutput { report, maps })
}
