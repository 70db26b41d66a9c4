//! `qfit` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Failures print one JSON object on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use qfit_core::baselines::{fit_volume, match_volume_compressed, match_volume_full, MrfMaps, RelaxMethod};
use qfit_core::config::RunConfig;
use qfit_core::corrupt::{add_gaussian_noise, undersample_frames};
use qfit_core::experiment::{
    normalized_echo_stack, normalized_mrf_stack, run_mrf_experiment, run_noise_experiment, ExperimentOutput,
};
use qfit_core::gradsuite::{run_gradcheck_suite, TOLERANCE};
use qfit_core::io::{
    basis_to_volume, checkpoint_to_volume, dictionary_to_volume, export_map_png, load_volume, save_volume,
    volume_to_basis, volume_to_dictionary, write_atomic, Volume,
};
use qfit_core::phantom::{make_phantom, PhantomSpec};
use qfit_core::signal::generate_dictionary;
use qfit_core::stack::ParameterMap;
use qfit_core::subspace::{compress_dictionary, CoefficientMaps, CompressedDictionary};
use qfit_core::train::{mrf_network_config, train_mrf, train_relaxometry, MrfTask, RelaxometryTask, TrainingHistory};
use qfit_core::QfitError;

#[derive(Parser)]
#[command(name = "qfit", version, about = "Scan-specific parameter estimation for quantitative MRI")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set noise.variance=0.002`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Relax,
    Mrf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMethod {
    Varpro,
    Loglinear,
}

#[derive(Args)]
struct InputArg {
    /// Input stack container.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    dictionary: PathBuf,
    /// Basis container; omitted with `--full`.
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Exhaustive time-domain matching instead of coefficient matching.
    #[arg(long)]
    full: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ground-truth M0/T1/T2 maps of the brain phantom.
    Phantom,
    /// Normalized noiseless echo or MRF stack of the phantom.
    Simulate {
        #[arg(long, value_enum)]
        kind: Kind,
    },
    /// Gaussian noise (and optionally undersampling) applied to a stack.
    Noise {
        #[command(flatten)]
        input: InputArg,
        /// Apply the Cartesian undersampling surrogate before the noise.
        #[arg(long)]
        undersample: bool,
    },
    /// Voxel-wise relaxometry fit.
    Fit {
        #[command(flatten)]
        input: InputArg,
        #[arg(long, value_enum, default_value = "varpro")]
        method: FitMethod,
    },
    /// Fingerprint dictionary over the configured grid.
    Dict,
    /// Temporal subspace basis of a dictionary.
    Compress {
        #[arg(long)]
        dictionary: PathBuf,
    },
    /// Dictionary matching of an MRF stack.
    Match(MatchArgs),
    /// Scan-specific relaxometry network training.
    TrainRelax {
        #[command(flatten)]
        input: InputArg,
    },
    /// Scan-specific MRF subspace-coefficient network training.
    TrainMrf {
        #[command(flatten)]
        input: InputArg,
        #[arg(long)]
        dictionary: PathBuf,
        #[arg(long)]
        basis: PathBuf,
    },
    /// Noise-robustness experiment on the phantom.
    ExperimentNoise,
    /// Undersampled MRF experiment on the phantom.
    ExperimentMrf,
    /// 8-bit PNG of a map container.
    Export {
        #[command(flatten)]
        input: InputArg,
        #[arg(long, allow_negative_numbers = true)]
        window: f64,
        #[arg(long, allow_negative_numbers = true)]
        level: f64,
        #[arg(long)]
        png: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck,
}

fn exit_code(e: &QfitError) -> u8 {
    match e {
        QfitError::Config(_) => 3,
        _ => 1,
    }
}

fn error_kind(e: &QfitError) -> &'static str {
    match e {
        QfitError::Tensor(_) => "tensor",
        QfitError::Config(_) => "config",
        QfitError::Shape { .. } => "shape",
        QfitError::Invalid(_) => "invalid",
        QfitError::Diverged { .. } => "diverged",
        QfitError::Format { .. } | QfitError::Truncated { .. } | QfitError::Json(_) => "format",
        QfitError::Io { .. } => "io",
    }
}

fn log(event: &str, fields: serde_json::Value) {
    let mut obj = json!({ "event": event });
    if let (Some(o), serde_json::Value::Object(f)) = (obj.as_object_mut(), fields) {
        o.extend(f);
    }
    eprintln!("{obj}");
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn save(&self, name: &str, v: Volume, seed: Option<u64>) -> Result<(), QfitError> {
        let path = self.path(name);
        save_volume(&path, &v.with_provenance(seed, Some(self.hash.clone())))?;
        log("wrote", json!({ "path": path }));
        Ok(())
    }

    fn save_map(&self, name: &str, map: &ParameterMap, units: &str, seed: Option<u64>) -> Result<(), QfitError> {
        self.save(name, Volume::from_map(map, units)?, seed)
    }

    fn save_text(&self, name: &str, text: &str) -> Result<(), QfitError> {
        let path = self.path(name);
        write_atomic(&path, text.as_bytes())?;
        log("wrote", json!({ "path": path }));
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, QfitError> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| QfitError::io(p, e))?),
        None => None,
    };
    RunConfig::resolve(text.as_deref(), &cli.overrides)
}

fn save_mrf_maps(ctx: &Ctx, prefix: &str, m: &MrfMaps) -> Result<(), QfitError> {
    ctx.save_map(&format!("{prefix}_t1.qfit"), &m.t1, "ms", None)?;
    ctx.save_map(&format!("{prefix}_t2.qfit"), &m.t2, "ms", None)?;
    ctx.save_map(&format!("{prefix}_m0.qfit"), &m.m0, "a.u.", None)?;
    ctx.save_map(&format!("{prefix}_phase.qfit"), &m.phase, "rad", None)
}

fn history_csv(h: &TrainingHistory) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in h.losses.iter().enumerate() {
        s.push_str(&format!("{i},{l:e}\n"));
    }
    s
}

fn write_experiment(ctx: &Ctx, out: &ExperimentOutput) -> Result<(), QfitError> {
    let r = &out.report;
    ctx.save_text("report.csv", &r.to_csv()?)?;
    ctx.save_text("report.json", &(serde_json::to_string_pretty(r)? + "\n"))?;
    for m in &out.maps {
        let units = if m.parameter == "m0" { "a.u." } else { "ms" };
        ctx.save_map(&format!("{}_{}_seed{}.qfit", m.method, m.parameter, m.seed), &m.map, units, Some(m.seed))?;
    }
    for ratio in &r.ratios {
        log(
            "ratio",
            json!({ "parameter": ratio.parameter, "baseline": ratio.baseline, "proposed": ratio.proposed, "ratio": ratio.ratio }),
        );
    }
    log("runtime", json!({ "seconds": r.runtime_s }));
    Ok(())
}

fn run(cli: &Cli) -> Result<(), QfitError> {
    let cfg = load_config(cli)?;
    let hash = cfg.hash();
    fs::create_dir_all(&cli.out).map_err(|e| QfitError::io(&cli.out, e))?;
    let ctx = Ctx {
        cfg,
        hash,
        out: cli.out.clone(),
    };
    log("config", json!({ "hash": ctx.hash }));
    ctx.save_text("resolved_config.json", &(serde_json::to_string_pretty(&ctx.cfg)? + "\n"))?;
    let cfg = &ctx.cfg;
    let phantom = || make_phantom(&PhantomSpec::brain(cfg.phantom.size, cfg.phantom.seed));

    match &cli.command {
        Command::Phantom => {
            let p = phantom()?;
            ctx.save_map("phantom_m0.qfit", &p.m0, "a.u.", None)?;
            ctx.save_map("phantom_t1.qfit", &p.t1, "ms", None)?;
            ctx.save_map("phantom_t2.qfit", &p.t2, "ms", None)?;
        }
        Command::Simulate { kind } => {
            let p = phantom()?;
            let (stack, name) = match kind {
                Kind::Relax => (normalized_echo_stack(&p, &cfg.protocol)?.0, "echoes.qfit"),
                Kind::Mrf => (normalized_mrf_stack(&p, &cfg.schedule)?.0, "timeseries.qfit"),
            };
            ctx.save(name, Volume::from_stack(&stack)?, None)?;
        }
        Command::Noise { input, undersample } => {
            let mut stack = load_volume(&input.input)?.to_stack()?;
            let mut variance = cfg.noise.variance;
            if *undersample {
                stack = undersample_frames(&stack, cfg.undersampling.acceleration, cfg.undersampling.seed)?;
                variance = cfg.mrf_variance;
            }
            let noisy = add_gaussian_noise(&stack, variance, cfg.noise.seed)?;
            ctx.save("noisy.qfit", Volume::from_stack(&noisy)?, Some(cfg.noise.seed))?;
        }
        Command::Fit { input, method } => {
            let stack = load_volume(&input.input)?.to_stack()?;
            let m = match method {
                FitMethod::Varpro => RelaxMethod::Varpro(cfg.varpro.clone()),
                FitMethod::Loglinear => RelaxMethod::Loglinear,
            };
            let maps = fit_volume(&stack, &cfg.protocol, &m, None)?;
            ctx.save_map("fit_m0.qfit", &maps.m0, "a.u.", None)?;
            ctx.save_map("fit_t2.qfit", &maps.t2, "ms", None)?;
        }
        Command::Dict => {
            let d = generate_dictionary(&cfg.grid, &cfg.schedule)?;
            log("dictionary", json!({ "atoms": d.len(), "n_tr": d.n_tr }));
            ctx.save("dictionary.qfit", dictionary_to_volume(&d)?, None)?;
        }
        Command::Compress { dictionary } => {
            let d = volume_to_dictionary(&load_volume(dictionary)?)?;
            let b = compress_dictionary(&d, cfg.energy_target)?;
            log("basis", json!({ "rank": b.rank, "retained_energy": b.retained_energy }));
            ctx.save("basis.qfit", basis_to_volume(&b)?, None)?;
        }
        Command::Match(m) => {
            let stack = load_volume(&m.input)?.to_stack()?;
            let d = volume_to_dictionary(&load_volume(&m.dictionary)?)?;
            let maps = if m.full {
                match_volume_full(&stack, &d, None)?
            } else {
                let path = m
                    .basis
                    .as_ref()
                    .ok_or_else(|| QfitError::Config("--basis is required unless --full is given".into()))?;
                let b = volume_to_basis(&load_volume(path)?)?;
                let c = CoefficientMaps::from_stack(&stack, &b)?;
                match_volume_compressed(&c, &CompressedDictionary::new(&d, &b)?, None)?
            };
            save_mrf_maps(&ctx, "match", &maps)?;
        }
        Command::TrainRelax { input } => {
            let task = RelaxometryTask {
                input: load_volume(&input.input)?.to_stack()?,
                protocol: cfg.protocol.clone(),
                options: cfg.relaxometry.clone(),
                training: cfg.relaxometry_training.clone(),
            };
            let r = train_relaxometry(&task)?;
            ctx.save_map("net_m0.qfit", &r.m0, "a.u.", Some(cfg.relaxometry_training.seed))?;
            ctx.save_map("net_t2.qfit", &r.t2, "ms", Some(cfg.relaxometry_training.seed))?;
            ctx.save("checkpoint.qfit", checkpoint_to_volume(&r.model)?, Some(cfg.relaxometry_training.seed))?;
            ctx.save_text("history.csv", &history_csv(&r.model.history))?;
        }
        Command::TrainMrf {
            input,
            dictionary,
            basis,
        } => {
            let d = volume_to_dictionary(&load_volume(dictionary)?)?;
            let b = volume_to_basis(&load_volume(basis)?)?;
            let opts = &cfg.mrf_network;
            let task = MrfTask {
                input: load_volume(&input.input)?.to_stack()?,
                dictionary: Some(CompressedDictionary::new(&d, &b)?),
                network: mrf_network_config(&b, opts.raw_input, opts.base_width, opts.n_residual_blocks),
                raw_input: opts.raw_input,
                training: cfg.mrf_training.clone(),
                basis: b,
            };
            let r = train_mrf(&task)?;
            let c = &r.coefficients;
            ctx.save(
                "coefficients.qfit",
                Volume::new(
                    vec![2 * c.rank, c.height, c.width],
                    &["plane", "y", "x"],
                    "a.u.",
                    qfit_core::io::VolumeData::Real(c.planes.clone()),
                )?,
                Some(cfg.mrf_training.seed),
            )?;
            if let Some(m) = &r.maps {
                save_mrf_maps(&ctx, "net", m)?;
            }
            ctx.save("checkpoint.qfit", checkpoint_to_volume(&r.model)?, Some(cfg.mrf_training.seed))?;
            ctx.save_text("history.csv", &history_csv(&r.model.history))?;
        }
        Command::ExperimentNoise => write_experiment(&ctx, &run_noise_experiment(&cfg.noise_experiment())?)?,
        Command::ExperimentMrf => write_experiment(&ctx, &run_mrf_experiment(&cfg.mrf_experiment())?)?,
        Command::Export {
            input,
            window,
            level,
            png,
        } => {
            let map = load_volume(&input.input)?.to_map()?;
            export_map_png(&map, *window, *level, &resolve(&ctx.out, png))?;
        }
        Command::Gradcheck => {
            let entries = run_gradcheck_suite();
            println!("{:<24} {:>6} {:>8} {:>12}  result", "op", "points", "coords", "max_rel_err");
            for e in &entries {
                println!(
                    "{:<24} {:>6} {:>8} {:>12.3e}  {}",
                    e.name,
                    e.points,
                    e.coords_checked,
                    e.max_rel_error,
                    if e.passed { "PASS" } else { "FAIL" }
                );
            }
            ctx.save_text("gradcheck.json", &(serde_json::to_string_pretty(&entries)? + "\n"))?;
            let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(QfitError::Invalid(format!(
                    "gradient check above {TOLERANCE:e} for: {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

/// Relative export paths land in the output directory.
fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": error_kind(&e), "message": e.to_string(), "exit_code": exit_code(&e) })
            );
            ExitCode::from(exit_code(&e))
        }
    }
}
