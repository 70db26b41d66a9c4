//! Scan-specific unsupervised training loops.
//!
//! Relaxometry: echo stack -> network -> (M0, T2) -> mono-exponential
//! resynthesis -> SSIM against the input. MRF: coefficient-plane input ->
//! network -> subspace coefficients -> time-series resynthesis -> L1 against
//! the measured time series.

use qfit_autodiff::{Graph, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::error::{QfitError, Result};
use crate::loss::{l1_loss, ssim_loss, SsimConfig};
use crate::network::{Network, NetworkConfig, OutputActivation};
use crate::signal::mono_exp::{mono_exp_synth_graph, EchoProtocol};
use crate::stack::{percentile_magnitude, ContrastStack, ParameterMap};
use crate::baselines::{match_volume_compressed, MrfMaps};
use crate::subspace::{synth_timeseries_graph, CoefficientMaps, CompressedDictionary, SubspaceBasis};

/// Quantile of the input magnitude used to scale network inputs to ~1.
pub const INPUT_QUANTILE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub adam: AdamConfig,
    pub iterations: usize,
    pub seed: u64,
    /// Stop once the best loss improved by less than `early_stop_tol`
    /// over this many iterations. Zero disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            iterations: 2000,
            seed: 0,
            early_stop_window: 200,
            early_stop_tol: 1e-6,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(QfitError::Config("training needs at least one iteration".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(QfitError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Loss trace and the iterate that achieved the lowest loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub losses: Vec<f64>,
    pub best_iteration: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
}

/// Network and optimizer state after training, enough to resume or audit.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub network: Network,
    pub optimizer: AdamState,
    pub history: TrainingHistory,
    pub input_scale: f64,
}

/// Shared loop: `step` builds the loss on a fresh graph and returns it plus
/// whatever snapshot should be kept if this iterate is the best so far.
fn run_loop<S>(
    mut network: Network,
    cfg: &TrainingConfig,
    mut step: impl FnMut(&Graph, &Network, &crate::network::BoundParams) -> Result<(Var, S)>,
    observe: &mut dyn FnMut(usize, f64, &S),
) -> Result<(Network, AdamState, TrainingHistory, S)> {
    cfg.validate()?;
    let mut state = AdamState::new(network.params());
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(usize, f64, S)> = None;
    let mut stopped_early = false;
    for it in 0..cfg.iterations {
        let g = Graph::new();
        let p = network.bind(&g)?;
        let (loss, snapshot) = match step(&g, &network, &p) {
            Ok(v) => v,
            Err(QfitError::Tensor(TensorError::NonFinite { .. })) => {
                return Err(QfitError::Diverged {
                    iteration: it,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        let value = g.item(loss)?;
        if !value.is_finite() {
            return Err(QfitError::Diverged { iteration: it, loss: value });
        }
        losses.push(value);
        observe(it, value, &snapshot);
        if best.as_ref().is_none_or(|b| value < b.1) {
            best = Some((it, value, snapshot));
        }
        let mut grads = g.backward(loss)?;
        let grad_tensors: Vec<Tensor> = p.vars.iter().map(|&v| grads.take(v)).collect();
        drop(g);
        adam_step(network.params_mut(), &grad_tensors, &mut state, &cfg.adam)?;

        let w = cfg.early_stop_window;
        if w > 0 && it >= w {
            let earlier = losses[..=it - w].iter().copied().fold(f64::INFINITY, f64::min);
            let now = best.as_ref().map_or(f64::INFINITY, |b| b.1);
            if earlier - now < cfg.early_stop_tol {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_iteration, best_loss, snapshot) = best.expect("at least one iteration ran");
    let history = TrainingHistory {
        losses,
        best_iteration,
        best_loss,
        stopped_early,
    };
    Ok((network, state, history, snapshot))
}

fn input_scale(stack: &ContrastStack) -> Result<f64> {
    let s = percentile_magnitude(stack, INPUT_QUANTILE);
    if !(s > 0.0) || !s.is_finite() {
        return Err(QfitError::Invalid("input stack has no signal to normalize by".into()));
    }
    Ok(s)
}

// ---------------------------------------------------------------- relaxometry

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxometryOptions {
    pub base_width: usize,
    pub n_residual_blocks: usize,
    pub t2_min_ms: f64,
    pub t2_max_ms: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for RelaxometryOptions {
    fn default() -> Self {
        Self {
            base_width: 64,
            n_residual_blocks: 9,
            t2_min_ms: 1.0,
            t2_max_ms: 3000.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
        }
    }
}

impl RelaxometryOptions {
    pub fn network_config(&self, echoes: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels: echoes,
            base_width: self.base_width,
            n_residual_blocks: self.n_residual_blocks,
            kernel_size: 3,
            out_activations: vec![
                OutputActivation::Softplus,
                OutputActivation::BoundedSigmoid {
                    min: self.t2_min_ms,
                    max: self.t2_max_ms,
                },
            ],
        }
    }
}

#[derive(Clone, Debug)]
pub struct RelaxometryTask {
    pub input: ContrastStack,
    pub protocol: EchoProtocol,
    pub options: RelaxometryOptions,
    pub training: TrainingConfig,
}

#[derive(Clone, Debug)]
pub struct RelaxometryResult {
    pub m0: ParameterMap,
    pub t2: ParameterMap,
    pub model: TrainedModel,
}

impl RelaxometryTask {
    fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.input.validate()?;
        if self.input.is_complex() {
            return Err(QfitError::Config("relaxometry expects magnitude echo images".into()));
        }
        if self.input.frames != self.protocol.len() {
            return Err(QfitError::Config(format!(
                "stack has {} echoes but protocol lists {}",
                self.input.frames,
                self.protocol.len()
            )));
        }
        Ok(())
    }

    /// SSIM settings with `L` from the normalized input maximum.
    pub fn ssim_config(&self, scale: f64) -> SsimConfig {
        SsimConfig {
            window_size: self.options.ssim_window,
            sigma: self.options.ssim_sigma,
            dynamic_range: self.input.max_abs() / scale,
            ..SsimConfig::default()
        }
    }
}

/// Relaxometry loss of given normalized `(M0, T2)` variables against the
/// normalized input.
pub fn relaxometry_loss(g: &Graph, m0: Var, t2: Var, input: Var, proto: &EchoProtocol, ssim: &SsimConfig) -> Result<Var> {
    let synth = mono_exp_synth_graph(g, m0, t2, proto)?;
    ssim_loss(g, synth, input, ssim)
}

/// Loss the training loop would report if the network emitted exactly these maps.
pub fn relaxometry_loss_of_maps(task: &RelaxometryTask, m0: &ParameterMap, t2: &ParameterMap) -> Result<f64> {
    task.validate()?;
    let scale = input_scale(&task.input)?;
    let (h, w) = (task.input.height, task.input.width);
    let g = Graph::new();
    let x = g.constant(task.input.to_tensor().map(|v| v / scale))?;
    let m = g.constant(Tensor::new(vec![1, 1, h, w], m0.values.iter().map(|v| v / scale).collect())?)?;
    let t = g.constant(Tensor::new(vec![1, 1, h, w], t2.values.clone())?)?;
    let l = relaxometry_loss(&g, m, t, x, &task.protocol, &task.ssim_config(scale))?;
    Ok(g.item(l)?)
}

pub fn train_relaxometry(task: &RelaxometryTask) -> Result<RelaxometryResult> {
    train_relaxometry_observed(task, &mut |_, _, _| {})
}

/// Like [`train_relaxometry`], calling `observe(iteration, loss, (m0, t2))`
/// after every forward pass. `m0` is still in normalized units.
pub fn train_relaxometry_observed(
    task: &RelaxometryTask,
    observe: &mut dyn FnMut(usize, f64, &(Tensor, Tensor)),
) -> Result<RelaxometryResult> {
    task.validate()?;
    let scale = input_scale(&task.input)?;
    let x = task.input.to_tensor().map(|v| v / scale);
    let ssim = task.ssim_config(scale);
    let net = Network::build(task.options.network_config(task.protocol.len()), task.training.seed)?;
    let (h, w) = (task.input.height, task.input.width);

    let (network, optimizer, history, (m0, t2)) = run_loop(net, &task.training, |g, net, p| {
        let xv = g.constant(x.clone())?;
        let outs = net.forward(g, p, xv)?;
        let loss = relaxometry_loss(g, outs[0], outs[1], xv, &task.protocol, &ssim)?;
        Ok((loss, (g.tensor(outs[0]), g.tensor(outs[1]))))
    }, observe)?;

    let mask = vec![true; h * w];
    let m0 = ParameterMap::new(h, w, m0.data().iter().map(|v| v * scale).collect(), mask.clone())?;
    let t2 = ParameterMap::new(h, w, t2.into_data(), mask)?;
    Ok(RelaxometryResult {
        m0,
        t2,
        model: TrainedModel {
            network,
            optimizer,
            history,
            input_scale: scale,
        },
    })
}

// ---------------------------------------------------------------- MRF

/// Time-series fitting through the temporal subspace. The network sees the
/// projected `2K` coefficient planes of the input (or, with `raw_input`,
/// all `2T` real/imaginary frames) and emits `2K` coefficient planes.
#[derive(Clone, Debug)]
pub struct MrfTask {
    pub input: ContrastStack,
    pub basis: SubspaceBasis,
    /// Used after training to turn coefficients into (T1, T2, M0) maps.
    pub dictionary: Option<CompressedDictionary>,
    pub network: NetworkConfig,
    pub raw_input: bool,
    pub training: TrainingConfig,
}

/// Network layout for an MRF task: linear outputs for every coefficient plane.
pub fn mrf_network_config(basis: &SubspaceBasis, raw_input: bool, base_width: usize, n_residual_blocks: usize) -> NetworkConfig {
    NetworkConfig {
        in_channels: if raw_input { 2 * basis.n_tr } else { 2 * basis.rank },
        base_width,
        n_residual_blocks,
        kernel_size: 3,
        out_activations: vec![OutputActivation::Linear; 2 * basis.rank],
    }
}

#[derive(Clone, Debug)]
pub struct MrfResult {
    pub coefficients: CoefficientMaps,
    pub maps: Option<MrfMaps>,
    pub model: TrainedModel,
}

impl MrfTask {
    fn validate(&self) -> Result<()> {
        self.input.validate()?;
        self.network.validate()?;
        let (k, t) = (self.basis.rank, self.basis.n_tr);
        if self.input.frames != t {
            return Err(QfitError::Config(format!(
                "time series has {} frames but the basis spans {t}",
                self.input.frames
            )));
        }
        if self.network.out_channels() != 2 * k {
            return Err(QfitError::Config(format!(
                "network emits {} channels but rank {k} needs {}",
                self.network.out_channels(),
                2 * k
            )));
        }
        if self.network.out_activations.iter().any(|a| *a != OutputActivation::Linear) {
            return Err(QfitError::Config("coefficient outputs must use linear activations".into()));
        }
        let want_in = if self.raw_input { 2 * t } else { 2 * k };
        if self.network.in_channels != want_in {
            return Err(QfitError::Config(format!(
                "network takes {} input channels, expected {want_in}",
                self.network.in_channels
            )));
        }
        if let Some(d) = &self.dictionary {
            if d.rank != k {
                return Err(QfitError::Config(format!(
                    "compressed dictionary has rank {}, basis has {k}",
                    d.rank
                )));
            }
        }
        Ok(())
    }
}

/// Always `(1, 2T, H, W)`, real frames first.
fn complex_planes(stack: &ContrastStack) -> Tensor {
    let mut t = stack.to_tensor();
    if !stack.is_complex() {
        let mut data = t.into_data();
        data.resize(2 * data.len(), 0.0);
        t = Tensor::new(vec![1, 2 * stack.frames, stack.height, stack.width], data).expect("sized");
    }
    t
}

pub fn train_mrf(task: &MrfTask) -> Result<MrfResult> {
    train_mrf_observed(task, &mut |_, _, _| {})
}

/// Like [`train_mrf`], calling `observe(iteration, loss, coefficients)`
/// after every forward pass; coefficients are in normalized units.
pub fn train_mrf_observed(task: &MrfTask, observe: &mut dyn FnMut(usize, f64, &Tensor)) -> Result<MrfResult> {
    task.validate()?;
    let scale = input_scale(&task.input)?;
    let target = complex_planes(&task.input).map(|v| v / scale);
    let (h, w) = (task.input.height, task.input.width);
    let net_input = if task.raw_input {
        target.clone()
    } else {
        CoefficientMaps::from_stack(&task.input, &task.basis)?.to_tensor().map(|v| v / scale)
    };
    let net = Network::build(task.network.clone(), task.training.seed)?;

    let (network, optimizer, history, coeffs) = run_loop(
        net,
        &task.training,
        |g, net, p| {
            let x = g.constant(net_input.clone())?;
            let c = net.forward_raw(g, p, x)?;
            let synth = synth_timeseries_graph(g, c, &task.basis)?;
            let y = g.constant(target.clone())?;
            let loss = l1_loss(g, synth, y)?;
            Ok((loss, g.tensor(c)))
        },
        observe,
    )?;

    let coefficients = CoefficientMaps::new(task.basis.rank, h, w, coeffs.data().iter().map(|v| v * scale).collect())?;
    let maps = match &task.dictionary {
        Some(d) => Some(match_volume_compressed(&coefficients, d, None)?),
        None => None,
    };
    Ok(MrfResult {
        coefficients,
        maps,
        model: TrainedModel {
            network,
            optimizer,
            history,
            input_scale: scale,
        },
    })
}
