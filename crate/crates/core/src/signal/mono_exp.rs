//! Mono-exponential multi-echo model `s(TE) = M0 exp(-TE / T2)`.

use std::rc::Rc;

use qfit_autodiff::{CustomOp, Graph, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{QfitError, Result};
use crate::stack::{ContrastStack, ParameterMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoProtocol {
    pub echo_times_ms: Vec<f64>,
}

impl EchoProtocol {
    pub fn new(echo_times_ms: Vec<f64>) -> Result<Self> {
        let p = Self { echo_times_ms };
        p.validate()?;
        Ok(p)
    }

    /// `n` echoes at `first, first + spacing, ...`.
    pub fn uniform(n: usize, first_ms: f64, spacing_ms: f64) -> Result<Self> {
        Self::new((0..n).map(|i| first_ms + spacing_ms * i as f64).collect())
    }

    /// 10-echo gradient-echo protocol: TE = 6, 12, ..., 60 ms.
    pub fn gre_10_echo() -> Self {
        Self::uniform(10, 6.0, 6.0).expect("valid constants")
    }

    /// 4-echo spin-echo protocol: TE = 43, 67, 91, 115 ms.
    pub fn se_4_echo() -> Self {
        Self::uniform(4, 43.0, 24.0).expect("valid constants")
    }

    pub fn len(&self) -> usize {
        self.echo_times_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.echo_times_ms.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.echo_times_ms.is_empty() {
            return Err(QfitError::Config("echo protocol has no echoes".into()));
        }
        if self.echo_times_ms.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(QfitError::Config("echo times must be positive".into()));
        }
        if self.echo_times_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(QfitError::Config("echo times must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn mono_exp(m0: f64, t2: f64, te: f64) -> f64 {
    m0 * (-te / t2).exp()
}

/// Synthesizes the echo stack; voxels outside either map's mask are zero.
pub fn mono_exp_synth(m0: &ParameterMap, t2: &ParameterMap, proto: &EchoProtocol) -> Result<ContrastStack> {
    proto.validate()?;
    if (m0.height, m0.width) != (t2.height, t2.width) {
        return Err(QfitError::shape(
            "mono_exp_synth maps",
            (m0.height, m0.width),
            (t2.height, t2.width),
        ));
    }
    let hw = m0.len();
    let mut data = vec![0.0; proto.len() * hw];
    for v in 0..hw {
        if !(m0.mask[v] && t2.mask[v]) {
            continue;
        }
        let t = t2.values[v];
        if !(t > 0.0) {
            return Err(QfitError::Invalid(format!("non-positive T2 {t} at voxel {v}")));
        }
        for (e, &te) in proto.echo_times_ms.iter().enumerate() {
            data[e * hw + v] = mono_exp(m0.values[v], t, te);
        }
    }
    ContrastStack::real(proto.len(), m0.height, m0.width, data, proto.echo_times_ms.clone())
}

/// Differentiable synthesis: `(N,1,H,W)` M0 and T2 to `(N,E,H,W)` echoes.
struct MonoExpOp {
    echo_times: Vec<f64>,
}

impl CustomOp for MonoExpOp {
    fn name(&self) -> &str {
        "mono_exp_synth"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let (m0, t2) = (inputs[0], inputs[1]);
        let [n, c, h, w] = m0.dims4("mono_exp_synth")?;
        if c != 1 || m0.shape() != t2.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mono_exp_synth",
                lhs: m0.shape().to_vec(),
                rhs: t2.shape().to_vec(),
            });
        }
        let hw = h * w;
        let e = self.echo_times.len();
        let mut out = vec![0.0; n * e * hw];
        for s in 0..n {
            for (k, &te) in self.echo_times.iter().enumerate() {
                let dst = &mut out[(s * e + k) * hw..(s * e + k + 1) * hw];
                let (mp, tp) = (&m0.data()[s * hw..(s + 1) * hw], &t2.data()[s * hw..(s + 1) * hw]);
                for ((d, &m), &t) in dst.iter_mut().zip(mp).zip(tp) {
                    *d = mono_exp(m, t, te);
                }
            }
        }
        Tensor::new(vec![n, e, h, w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (m0, t2) = (inputs[0], inputs[1]);
        let [n, _, h, w] = m0.dims4("mono_exp_synth").expect("checked in forward");
        let hw = h * w;
        let e = self.echo_times.len();
        let mut gm = vec![0.0; m0.len()];
        let mut gt = vec![0.0; t2.len()];
        for s in 0..n {
            for (k, &te) in self.echo_times.iter().enumerate() {
                let go = &grad.data()[(s * e + k) * hw..(s * e + k + 1) * hw];
                for i in 0..hw {
                    let (m, t) = (m0.data()[s * hw + i], t2.data()[s * hw + i]);
                    let decay = (-te / t).exp();
                    gm[s * hw + i] += go[i] * decay;
                    gt[s * hw + i] += go[i] * m * decay * te / (t * t);
                }
            }
        }
        vec![
            Tensor::new(m0.shape().to_vec(), gm).expect("shape"),
            Tensor::new(t2.shape().to_vec(), gt).expect("shape"),
        ]
    }
}

pub fn mono_exp_synth_graph(g: &Graph, m0: Var, t2: Var, proto: &EchoProtocol) -> Result<Var> {
    let op: Rc<dyn CustomOp> = Rc::new(MonoExpOp {
        echo_times: proto.echo_times_ms.clone(),
    });
    Ok(g.custom(op, &[m0, t2])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_model_values() {
        assert_eq!(mono_exp(1.0, 80.0, 0.0), 1.0);
        assert!((mono_exp(1.0, 80.0, 80.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn named_protocols() {
        assert_eq!(
            EchoProtocol::gre_10_echo().echo_times_ms,
            vec![6., 12., 18., 24., 30., 36., 42., 48., 54., 60.]
        );
        assert_eq!(EchoProtocol::se_4_echo().echo_times_ms, vec![43., 67., 91., 115.]);
    }

    #[test]
    fn protocol_validation() {
        assert!(EchoProtocol::new(vec![]).is_err());
        assert!(EchoProtocol::new(vec![5.0, 5.0]).is_err());
        assert!(EchoProtocol::new(vec![0.0, 5.0]).is_err());
    }

    #[test]
    fn synth_matches_scalar_evaluation() {
        let proto = EchoProtocol::gre_10_echo();
        let m0 = ParameterMap::filled(1, 1, 100.0);
        let t2 = ParameterMap::filled(1, 1, 50.0);
        let s = mono_exp_synth(&m0, &t2, &proto).unwrap();
        for (e, te) in proto.echo_times_ms.iter().enumerate() {
            let want = 100.0 * (-te / 50.0f64).exp();
            assert!((s.real[e] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_t2_in_mask_is_error_and_masked_voxels_are_zero() {
        let proto = EchoProtocol::se_4_echo();
        let m0 = ParameterMap::filled(1, 2, 1.0);
        let mut t2 = ParameterMap::filled(1, 2, 0.0);
        assert!(mono_exp_synth(&m0, &t2, &proto).is_err());
        t2.values[1] = 60.0;
        t2.mask[0] = false;
        let s = mono_exp_synth(&m0, &t2, &proto).unwrap();
        assert!((0..4).all(|e| s.real[2 * e] == 0.0 && s.real[2 * e + 1] > 0.0));
    }
}
