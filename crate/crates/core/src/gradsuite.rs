//! Finite-difference audit of every differentiable operation used in
//! training, including a full head plus nine-block network.

use qfit_autodiff::gradcheck::{check, random_tensor, GradCheckConfig};
use qfit_autodiff::{Graph, Tensor, TensorError, Var};
use serde::Serialize;

use crate::loss::{l1_loss, ssim_loss, SsimConfig};
use crate::network::{out_activation_t2, BoundParams, Network, NetworkConfig, OutputActivation};
use crate::signal::mono_exp::{mono_exp_synth_graph, EchoProtocol};
use crate::subspace::{synth_timeseries_graph, SubspaceBasis};

pub const POINTS: usize = 10;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub points: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Build = dyn Fn(&Graph, &[Var]) -> Result<Var, TensorError>;

fn lift<T>(r: crate::Result<T>) -> Result<T, TensorError> {
    r.map_err(|e| match e {
        crate::QfitError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "gradsuite".into(),
            msg: other.to_string(),
        },
    })
}

/// `sum(out * w)` with a fixed random weight, so every output element
/// carries a distinct cotangent.
fn weighted(g: &Graph, out: Var, seed: u64) -> Result<Var, TensorError> {
    let w = g.constant(random_tensor(g.shape(out), seed ^ 0x5eed))?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

struct Case {
    name: &'static str,
    inputs: Box<dyn Fn(u64) -> Vec<Tensor>>,
    build: Box<Build>,
    max_coords: Option<usize>,
}

fn shapes(s: &'static [&'static [usize]]) -> Box<dyn Fn(u64) -> Vec<Tensor>> {
    Box::new(move |seed| {
        s.iter()
            .enumerate()
            .map(|(i, sh)| random_tensor(sh.to_vec(), seed * 31 + i as u64))
            .collect()
    })
}

fn map_input(t: Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    t.map(f)
}

fn unary(name: &'static str, op: fn(&Graph, Var) -> Result<Var, TensorError>) -> Case {
    Case {
        name,
        inputs: shapes(&[&[2, 3, 4]]),
        build: Box::new(move |g, v| {
            let y = op(g, v[0])?;
            weighted(g, y, 1)
        }),
        max_coords: None,
    }
}

fn binary(name: &'static str, op: fn(&Graph, Var, Var) -> Result<Var, TensorError>) -> Case {
    Case {
        name,
        inputs: shapes(&[&[3, 5], &[3, 5]]),
        build: Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted(g, y, 2)
        }),
        max_coords: None,
    }
}

fn small_network_config() -> NetworkConfig {
    NetworkConfig {
        in_channels: 2,
        base_width: 4,
        n_residual_blocks: 9,
        kernel_size: 3,
        out_activations: vec![OutputActivation::Softplus, OutputActivation::BoundedSigmoid { min: 1.0, max: 3000.0 }],
    }
}

fn toy_basis() -> SubspaceBasis {
    // orthonormal rows of a normalized 6-point DCT-II
    let (k, t) = (3, 6);
    let mut phi = Vec::with_capacity(k * t);
    for r in 0..k {
        let norm = if r == 0 { (1.0 / t as f64).sqrt() } else { (2.0 / t as f64).sqrt() };
        for j in 0..t {
            phi.push(norm * (std::f64::consts::PI * r as f64 * (j as f64 + 0.5) / t as f64).cos());
        }
    }
    SubspaceBasis::from_parts(k, t, phi, vec![3.0, 2.0, 1.0], 1.0).expect("DCT rows are orthonormal")
}

fn cases() -> Vec<Case> {
    let mut c = vec![
        binary("add", |g, a, b| g.add(a, b)),
        binary("sub", |g, a, b| g.sub(a, b)),
        binary("mul", |g, a, b| g.mul(a, b)),
        Case {
            name: "div",
            inputs: Box::new(|seed| {
                let a = random_tensor(vec![3, 5], seed * 31);
                let b = map_input(random_tensor(vec![3, 5], seed * 31 + 1), |x| x + 2.5);
                vec![a, b]
            }),
            build: Box::new(|g, v| {
                let y = g.div(v[0], v[1])?;
                weighted(g, y, 3)
            }),
            max_coords: None,
        },
        unary("scale", |g, a| g.scale(a, -1.7)),
        unary("add_scalar", |g, a| g.add_scalar(a, 0.3)),
        unary("square", |g, a| g.square(a)),
        unary("exp", |g, a| g.exp(a)),
        unary("relu", |g, a| g.relu(a)),
        unary("softplus", |g, a| g.softplus(a)),
        unary("sigmoid", |g, a| g.sigmoid(a)),
        Case {
            name: "matmul",
            inputs: shapes(&[&[3, 4], &[4, 2]]),
            build: Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted(g, y, 4)
            }),
            max_coords: None,
        },
        unary("sum", |g, a| g.sum(a)),
        unary("reduce_mean", |g, a| g.reduce_mean(a)),
        unary("reduce_abs_mean", |g, a| g.reduce_abs_mean(a)),
        unary("reshape", |g, a| g.reshape(a, vec![4, 6])),
        Case {
            name: "slice_channels",
            inputs: shapes(&[&[2, 4, 3, 3]]),
            build: Box::new(|g, v| {
                let y = g.slice_channels(v[0], 1, 2)?;
                weighted(g, y, 5)
            }),
            max_coords: None,
        },
        Case {
            name: "conv2d_k3",
            inputs: shapes(&[&[2, 3, 5, 4], &[2, 3, 3, 3], &[2]]),
            build: Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                weighted(g, y, 6)
            }),
            max_coords: None,
        },
        Case {
            name: "conv2d_k1",
            inputs: shapes(&[&[1, 3, 4, 4], &[2, 3, 1, 1], &[2]]),
            build: Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                weighted(g, y, 7)
            }),
            max_coords: None,
        },
        Case {
            name: "instance_norm",
            inputs: shapes(&[&[2, 3, 4, 3], &[3], &[3]]),
            build: Box::new(|g, v| {
                let y = g.instance_norm(v[0], v[1], v[2], 1e-5)?;
                weighted(g, y, 8)
            }),
            max_coords: None,
        },
        Case {
            name: "out_activation_t2",
            inputs: shapes(&[&[1, 1, 3, 3]]),
            build: Box::new(|g, v| {
                let y = lift(out_activation_t2(g, v[0], 1.0, 3000.0))?;
                weighted(g, y, 9)
            }),
            max_coords: None,
        },
        Case {
            name: "mono_exp_synth",
            inputs: Box::new(|seed| {
                let m0 = map_input(random_tensor(vec![1, 1, 3, 4], seed * 31), |x| 1.0 + 0.5 * x);
                let t2 = map_input(random_tensor(vec![1, 1, 3, 4], seed * 31 + 1), |x| 60.0 + 40.0 * x);
                vec![m0, t2]
            }),
            build: Box::new(|g, v| {
                let y = lift(mono_exp_synth_graph(g, v[0], v[1], &EchoProtocol::gre_10_echo()))?;
                weighted(g, y, 10)
            }),
            max_coords: None,
        },
        Case {
            name: "ssim_loss",
            inputs: shapes(&[&[1, 2, 13, 12], &[1, 2, 13, 12]]),
            build: Box::new(|g, v| {
                let cfg = SsimConfig {
                    dynamic_range: 2.0,
                    ..SsimConfig::default()
                };
                lift(ssim_loss(g, v[0], v[1], &cfg))
            }),
            max_coords: None,
        },
        Case {
            name: "l1_loss",
            inputs: shapes(&[&[2, 3, 4], &[2, 3, 4]]),
            build: Box::new(|g, v| lift(l1_loss(g, v[0], v[1]))),
            max_coords: None,
        },
        Case {
            name: "synth_timeseries",
            inputs: shapes(&[&[1, 6, 3, 3]]),
            build: Box::new(|g, v| {
                let y = lift(synth_timeseries_graph(g, v[0], &toy_basis()))?;
                weighted(g, y, 11)
            }),
            max_coords: None,
        },
    ];
    let net = Network::build(small_network_config(), 0).expect("valid layout");
    let n_params = net.params().len();
    c.push(Case {
        name: "network_head_9_blocks",
        inputs: Box::new(move |seed| {
            let mut p: Vec<Tensor> = Network::build(small_network_config(), seed)
                .expect("valid layout")
                .params()
                .to_vec();
            p.push(random_tensor(vec![1, 2, 6, 6], seed * 31 + 99));
            p
        }),
        build: Box::new(move |g, v| {
            let net = Network::build(small_network_config(), 0).expect("valid layout");
            let bound = BoundParams {
                vars: v[..n_params].to_vec(),
            };
            let outs = lift(net.forward(g, &bound, v[n_params]))?;
            let both = g.add(outs[0], g.scale(outs[1], 1e-3)?)?;
            weighted(g, both, 12)
        }),
        max_coords: Some(400),
    });
    c
}

/// Runs every case at `POINTS` random points.
pub fn run_gradcheck_suite() -> Vec<GradCheckEntry> {
    cases()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            let mut checked = 0;
            let mut failed = false;
            for point in 0..POINTS as u64 {
                let inputs = (case.inputs)(point + 1);
                let cfg = GradCheckConfig {
                    max_coords: case.max_coords,
                    seed: point,
                    ..GradCheckConfig::default()
                };
                match check(&*case.build, &inputs, &cfg) {
                    Ok(r) => {
                        worst = worst.max(r.max_rel_error);
                        checked += r.checked;
                    }
                    Err(_) => failed = true,
                }
            }
            GradCheckEntry {
                name: case.name.into(),
                points: POINTS,
                coords_checked: checked,
                max_rel_error: worst,
                passed: !failed && worst < TOLERANCE,
            }
        })
        .collect()
}
