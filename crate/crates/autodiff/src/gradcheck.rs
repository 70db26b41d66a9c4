//! Central finite-difference gradient checking.
//!
//! The comparison for one coordinate is `|a - n| / max(|a|, |n|)`, except
//! that differences at or below `abs_floor` count as exact agreement.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub abs_floor: f64,
    /// Check at most this many coordinates (sampled without replacement).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            abs_floor: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&Graph, &[Var]) -> Result<Var, TensorError>,
{
    let g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&g, &vars)?;
    g.item(out)
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences with respect to every input tensor.
pub fn check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Graph, &[Var]) -> Result<Var, TensorError>,
{
    let g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(g);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |c| (i, c)))
        .collect();
    let chosen: Vec<(usize, usize)> = match cfg.max_coords {
        Some(m) if m < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, coords.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (i, c) in chosen {
        let orig = work[i].data()[c];
        work[i].data_mut()[c] = orig + cfg.step;
        let plus = eval(&f, &work)?;
        work[i].data_mut()[c] = orig - cfg.step;
        let minus = eval(&f, &work)?;
        work[i].data_mut()[c] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[i].data()[c];
        let err = relative_error(a, numeric, cfg.abs_floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(Mismatch {
                input: i,
                coord: c,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}

/// Uniform values in `[-1, 1)` from a seeded generator.
pub fn random_tensor(shape: impl Into<Vec<usize>>, seed: u64) -> Tensor {
    use rand::Rng;
    let shape = shape.into();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_treats_tiny_differences_as_agreement() {
        assert_eq!(relative_error(1e-12, 2e-12, 1e-8), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-8) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // exp registered correctly; a deliberately wrong custom op must be caught
        struct Wrong;
        impl crate::CustomOp for Wrong {
            fn name(&self) -> &str {
                "wrong"
            }
            fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
                Ok(inputs[0].map(|v| v * v))
            }
            fn backward(&self, inputs: &[&Tensor], _: &Tensor, go: &Tensor) -> Vec<Tensor> {
                vec![Tensor::new(
                    inputs[0].shape().to_vec(),
                    inputs[0].data().iter().zip(go.data()).map(|(x, g)| x * g).collect(),
                )
                .unwrap()]
            }
        }
        let op: std::rc::Rc<dyn crate::CustomOp> = std::rc::Rc::new(Wrong);
        let r = check(
            |g, v| {
                let y = g.custom(op.clone(), &[v[0]])?;
                g.sum(y)
            },
            &[random_tensor(vec![5], 3)],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
