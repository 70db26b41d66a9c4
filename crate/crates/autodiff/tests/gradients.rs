use qfit_autodiff::gradcheck::{check, random_tensor, GradCheckConfig};
use qfit_autodiff::{Graph, Tensor, TensorError, Var};

const TOL: f64 = 1e-5;
const POINTS: u64 = 10;

fn assert_grad<F>(name: &str, shapes: &[Vec<usize>], f: F)
where
    F: Fn(&Graph, &[Var]) -> Result<Var, TensorError>,
{
    for point in 0..POINTS {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| random_tensor(s.clone(), 1000 * point + i as u64))
            .collect();
        let r = check(&f, &inputs, &GradCheckConfig::default()).unwrap();
        assert!(r.passes(TOL), "{name} point {point}: {r:?}");
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let s = vec![vec![3, 4], vec![3, 4]];
    assert_grad("add", &s, |g, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.mul(y, v[0])?;
        g.reduce_mean(y)
    });
    assert_grad("sub", &s, |g, v| {
        let y = g.sub(v[0], v[1])?;
        let y = g.square(y)?;
        g.sum(y)
    });
    assert_grad("mul", &s, |g, v| {
        let y = g.mul(v[0], v[1])?;
        g.sum(y)
    });
    assert_grad("div", &s, |g, v| {
        let d = g.add_scalar(v[1], 3.0)?;
        let y = g.div(v[0], d)?;
        g.sum(y)
    });
    assert_grad("exp/scale", &s[..1], |g, v| {
        let y = g.scale(v[0], 1.7)?;
        let y = g.exp(y)?;
        g.reduce_mean(y)
    });
    assert_grad("softplus", &s[..1], |g, v| {
        let y = g.scale(v[0], 4.0)?;
        let y = g.softplus(y)?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    assert_grad("sigmoid", &s[..1], |g, v| {
        let y = g.scale(v[0], 3.0)?;
        let y = g.sigmoid(y)?;
        let y = g.square(y)?;
        g.sum(y)
    });
    assert_grad("relu", &s, |g, v| {
        let y = g.relu(v[0])?;
        let y = g.mul(y, v[1])?;
        g.sum(y)
    });
    assert_grad("reduce_abs_mean", &s, |g, v| {
        let y = g.mul(v[0], v[1])?;
        g.reduce_abs_mean(y)
    });
}

#[test]
fn matmul_and_reshape_match_finite_differences() {
    assert_grad("matmul", &[vec![3, 5], vec![5, 2], vec![3, 2]], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.mul(y, v[2])?;
        g.sum(y)
    });
    assert_grad("reshape+slice", &[vec![1, 4, 2, 3]], |g, v| {
        let s = g.slice_channels(v[0], 1, 2)?;
        let s = g.square(s)?;
        let r = g.reshape(s, vec![12])?;
        g.reduce_mean(r)
    });
}

#[test]
fn conv2d_matches_finite_differences() {
    for k in [1, 3, 5] {
        assert_grad(
            &format!("conv2d k{k}"),
            &[vec![2, 3, 5, 6], vec![4, 3, k, k], vec![4], vec![2, 4, 5, 6]],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                let y = g.mul(y, v[3])?;
                g.sum(y)
            },
        );
    }
}

#[test]
fn instance_norm_matches_finite_differences() {
    assert_grad(
        "instance_norm",
        &[vec![2, 3, 4, 5], vec![3], vec![3], vec![2, 3, 4, 5]],
        |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], 1e-5)?;
            let y = g.mul(y, v[3])?;
            g.sum(y)
        },
    );
}

#[test]
fn composite_conv_norm_relu_mean_matches_finite_differences() {
    assert_grad(
        "composite",
        &[vec![1, 2, 6, 6], vec![3, 2, 3, 3], vec![3], vec![3], vec![3]],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            let y = g.instance_norm(y, v[3], v[4], 1e-5)?;
            let y = g.relu(y)?;
            g.reduce_mean(y)
        },
    );
}

#[test]
fn mean_gradient_is_uniform() {
    let g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0, 4.0])).unwrap();
    let l = g.reduce_mean(x).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).data(), &[0.25; 4]);
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let y = g.mul(x, x).unwrap();
    let l = g.sum(y).unwrap();
    assert_eq!(g.backward(l).unwrap().get(x).data(), &[2.0, 4.0]);
}

#[test]
fn relu_values_and_zero_subgradient() {
    let g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0])).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let l = g.sum(y).unwrap();
    assert_eq!(g.backward(l).unwrap().get(x).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn identity_matmul_is_identity() {
    let g = Graph::new();
    let eye = g
        .constant(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap())
        .unwrap();
    let b = random_tensor(vec![3, 4], 9);
    let bv = g.constant(b.clone()).unwrap();
    let y = g.matmul(eye, bv).unwrap();
    assert_eq!(*g.value(y), b);
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let g = Graph::new();
    let a = g.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let unused = g.param(Tensor::from_vec(vec![5.0; 3])).unwrap();
    let l = g.sum(a).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(unused).data(), &[0.0; 3]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let g = Graph::new();
    let a = g.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let g = Graph::new();
    let a = g.param(Tensor::from_vec(vec![1.0, 0.0])).unwrap();
    let z = g.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
    assert!(matches!(g.div(a, z), Err(TensorError::NonFinite { .. })));
    let big = g.constant(Tensor::from_vec(vec![1000.0])).unwrap();
    assert!(matches!(g.exp(big), Err(TensorError::NonFinite { .. })));
}

#[test]
fn shape_mismatches_are_errors() {
    let g = Graph::new();
    let a = g.param(Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.param(Tensor::zeros(vec![3, 2])).unwrap();
    assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    assert!(g.matmul(a, b).is_ok());
    assert!(matches!(g.matmul(a, a), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn instance_norm_normalizes_each_plane() {
    let g = Graph::new();
    // input variance ~33, so eps shifts the output variance by < 1e-6
    let x = g.constant(random_tensor(vec![2, 3, 8, 8], 4).map(|v| 10.0 * v)).unwrap();
    let gamma = g.constant(Tensor::full(vec![3], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(vec![3])).unwrap();
    let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
    for plane in g.value(y).data().chunks(64) {
        let mean = plane.iter().sum::<f64>() / 64.0;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
}

#[test]
fn instance_norm_of_constant_plane_is_beta() {
    let g = Graph::new();
    let x = g.constant(Tensor::full(vec![1, 2, 3, 3], 4.2)).unwrap();
    let gamma = g.constant(Tensor::from_vec(vec![2.0, 3.0])).unwrap();
    let beta = g.constant(Tensor::from_vec(vec![0.5, -1.0])).unwrap();
    let y = g.instance_norm(x, gamma, beta, 1e-5).unwrap();
    let v = g.value(y);
    assert!(v.data()[..9].iter().all(|&a| a == 0.5));
    assert!(v.data()[9..].iter().all(|&a| a == -1.0));
}

#[test]
fn instance_norm_needs_two_pixels() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 1, 1])).unwrap();
    let one = g.constant(Tensor::full(vec![1], 1.0)).unwrap();
    assert!(matches!(
        g.instance_norm(x, one, one, 1e-5),
        Err(TensorError::PlaneTooSmall(1))
    ));
}

fn composite_grads(seed: u64) -> (f64, Vec<f64>) {
    let g = Graph::new();
    let x = g.constant(random_tensor(vec![1, 2, 5, 5], seed)).unwrap();
    let w = g.param(random_tensor(vec![3, 2, 3, 3], seed + 1)).unwrap();
    let b = g.param(random_tensor(vec![3], seed + 2)).unwrap();
    let y = g.conv2d(x, w, b).unwrap();
    let y = g.softplus(y).unwrap();
    let l = g.reduce_mean(y).unwrap();
    let grads = g.backward(l).unwrap();
    (g.item(l).unwrap(), grads.get(w).into_data())
}

#[test]
fn repeated_runs_are_bit_identical() {
    let (l1, g1) = composite_grads(11);
    let (l2, g2) = composite_grads(11);
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn backward_is_linear_in_the_loss(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let x0 = random_tensor(vec![1, 2, 4, 4], seed);
            let w0 = random_tensor(vec![2, 2, 3, 3], seed + 7);
            let grad_of = |ca: f64, cb: f64| {
                let g = Graph::new();
                let x = g.param(x0.clone()).unwrap();
                let w = g.constant(w0.clone()).unwrap();
                let bias = g.constant(Tensor::zeros(vec![2])).unwrap();
                let y = g.conv2d(x, w, bias).unwrap();
                let l1 = g.reduce_mean(g.sigmoid(y).unwrap()).unwrap();
                let l2 = g.reduce_abs_mean(g.square(y).unwrap()).unwrap();
                let l = g.add(g.scale(l1, ca).unwrap(), g.scale(l2, cb).unwrap()).unwrap();
                g.backward(l).unwrap().get(x).into_data()
            };
            let combined = grad_of(a, b);
            let first = grad_of(1.0, 0.0);
            let second = grad_of(0.0, 1.0);
            for i in 0..combined.len() {
                let want = a * first[i] + b * second[i];
                prop_assert!((combined[i] - want).abs() < 1e-12);
            }
        }
    }
}
