//! Residual parameter-mapping network.
//!
//! Layout: a head block `conv3 -> instance_norm -> relu`, then
//! `n_residual_blocks` blocks of
//! `conv3 -> instance_norm -> relu -> conv3 -> instance_norm (+ skip) -> relu`,
//! a 1x1 tail convolution to `out_channels`, and one output activation per
//! channel.

use qfit_autodiff::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QfitError, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutputActivation {
    Linear,
    Softplus,
    /// `min + (max - min) * sigmoid(raw)`.
    BoundedSigmoid { min: f64, max: f64 },
}

impl OutputActivation {
    pub fn validate(&self) -> Result<()> {
        if let Self::BoundedSigmoid { min, max } = *self {
            if !(min < max) || !min.is_finite() || !max.is_finite() {
                return Err(QfitError::Config(format!(
                    "bounded output needs min < max, got [{min}, {max}]"
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, g: &Graph, raw: Var) -> Result<Var, TensorError> {
        match *self {
            Self::Linear => Ok(raw),
            Self::Softplus => g.softplus(raw),
            Self::BoundedSigmoid { min, max } => {
                let s = g.sigmoid(raw)?;
                let s = g.scale(s, max - min)?;
                g.add_scalar(s, min)
            }
        }
    }
}

/// Bounded T2 (or T2*) output: `t2_min + (t2_max - t2_min) * sigmoid(raw)`.
pub fn out_activation_t2(g: &Graph, raw: Var, t2_min: f64, t2_max: f64) -> Result<Var> {
    let act = OutputActivation::BoundedSigmoid {
        min: t2_min,
        max: t2_max,
    };
    act.validate()?;
    Ok(act.apply(g, raw)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_residual_blocks: usize,
    pub kernel_size: usize,
    pub out_activations: Vec<OutputActivation>,
}

impl NetworkConfig {
    pub fn out_channels(&self) -> usize {
        self.out_activations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(QfitError::Config("network channel counts must be positive".into()));
        }
        if self.n_residual_blocks == 0 {
            return Err(QfitError::Config("n_residual_blocks must be at least 1".into()));
        }
        if self.out_activations.is_empty() {
            return Err(QfitError::Config("out_channels must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(QfitError::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        self.out_activations.iter().try_for_each(|a| a.validate())
    }

    /// Number of trainable scalars, layer by layer.
    pub fn parameter_count(&self) -> usize {
        let (w, k) = (self.base_width, self.kernel_size);
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let norm = 2 * w;
        let head = conv(self.in_channels, w, k) + norm;
        let block = 2 * (conv(w, w, k) + norm);
        head + self.n_residual_blocks * block + conv(w, self.out_channels(), 1)
    }

    /// Radius (pixels) over which one output pixel sees the input.
    pub fn receptive_radius(&self) -> usize {
        (self.kernel_size / 2) * (1 + 2 * self.n_residual_blocks)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct NormLayer {
    gamma: Tensor,
    beta: Tensor,
}

/// Parameters of a built network, in a fixed flattening order.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
    params: Vec<Tensor>,
}

fn uniform_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> ConvLayer {
    let bound = (1.0 / (cin * k * k) as f64).sqrt();
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
    let weight = Tensor::new(vec![cout, cin, k, k], draw(cout * cin * k * k)).expect("sized");
    let bias = Tensor::new(vec![cout], draw(cout)).expect("sized");
    ConvLayer { weight, bias }
}

fn unit_norm(c: usize) -> NormLayer {
    NormLayer {
        gamma: Tensor::full(vec![c], 1.0),
        beta: Tensor::zeros(vec![c]),
    }
}

/// Trainable variables of one forward pass, in parameter order.
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl Network {
    pub fn build(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, k) = (cfg.base_width, cfg.kernel_size);
        let mut params = Vec::new();
        let push_conv = |c: ConvLayer, params: &mut Vec<Tensor>| {
            params.push(c.weight);
            params.push(c.bias);
        };
        let push_norm = |n: NormLayer, params: &mut Vec<Tensor>| {
            params.push(n.gamma);
            params.push(n.beta);
        };
        push_conv(uniform_conv(&mut rng, cfg.in_channels, w, k), &mut params);
        push_norm(unit_norm(w), &mut params);
        for _ in 0..cfg.n_residual_blocks {
            for _ in 0..2 {
                push_conv(uniform_conv(&mut rng, w, w, k), &mut params);
                push_norm(unit_norm(w), &mut params);
            }
        }
        push_conv(uniform_conv(&mut rng, w, cfg.out_channels(), 1), &mut params);
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Replaces every parameter; shapes must match the current ones.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(QfitError::Invalid("parameter set does not match network layout".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &Graph) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundParams { vars })
    }

    /// Raw (pre-activation) output `(N, out_channels, H, W)`.
    pub fn forward_raw(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(QfitError::shape(
                "network input (N, C, H, W)",
                format!("C = {}", self.cfg.in_channels),
                shape,
            ));
        }
        let mut it = p.vars.iter().copied();
        let mut next = || it.next().expect("bound parameter list matches layout");
        let conv = |g: &Graph, x: Var, w: Var, b: Var| g.conv2d(x, w, b);

        let (w, b, gm, bt) = (next(), next(), next(), next());
        let h = conv(g, x, w, b)?;
        let h = g.instance_norm(h, gm, bt, NORM_EPS)?;
        let mut h = g.relu(h)?;
        for _ in 0..self.cfg.n_residual_blocks {
            let (w1, b1, g1, t1) = (next(), next(), next(), next());
            let (w2, b2, g2, t2) = (next(), next(), next(), next());
            let r = conv(g, h, w1, b1)?;
            let r = g.instance_norm(r, g1, t1, NORM_EPS)?;
            let r = g.relu(r)?;
            let r = conv(g, r, w2, b2)?;
            let r = g.instance_norm(r, g2, t2, NORM_EPS)?;
            let r = g.add(r, h)?;
            h = g.relu(r)?;
        }
        let (w, b) = (next(), next());
        Ok(conv(g, h, w, b)?)
    }

    /// Activated outputs, one `(N, 1, H, W)` variable per output channel.
    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Vec<Var>> {
        let raw = self.forward_raw(g, p, x)?;
        self.cfg
            .out_activations
            .iter()
            .enumerate()
            .map(|(c, act)| {
                let ch = g.slice_channels(raw, c, 1)?;
                Ok(act.apply(g, ch)?)
            })
            .collect()
    }

    /// Forward pass outside of training; returns `(N, out_channels, H, W)`.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.bind(&g)?;
        let x = g.constant(input.clone())?;
        let outs = self.forward(&g, &p, x)?;
        let [n, _, h, w] = input.dims4("predict")?;
        let hw = h * w;
        let c = outs.len();
        let mut data = vec![0.0; n * c * hw];
        for (ch, v) in outs.iter().enumerate() {
            let t = g.value(*v);
            for s in 0..n {
                data[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                    .copy_from_slice(&t.data()[s * hw..(s + 1) * hw]);
            }
        }
        Ok(Tensor::new(vec![n, c, h, w], data)?)
    }
}
