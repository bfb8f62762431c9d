use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::rng::Rng;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
}

/// Contracts `out` with a fixed random probe so every output coordinate
/// contributes to the checked scalar.
fn probe_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = Rng::new(seed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(random(&mut rng, &shape));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::<f64>::new();
    let mut rng = Rng::new(1);
    let x = g.constant(random(&mut rng, &[2, 3]));
    let i = g.constant(Tensor::identity(2));
    let y = g.matmul(i, x).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let a = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::matrix(&[&[1.0], &[1.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = Rng::new(2);
    let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])];
    let r = grad_check_multi(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_sum(g, y, 3)
        },
        &inputs,
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");

    let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4])];
    let r = grad_check_multi(
        |g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            probe_sum(g, y, 4)
        },
        &inputs,
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_uniform_and_shift_invariant() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let s = g.softmax(x, 1).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let mut rng = Rng::new(5);
    let x = g.constant(random(&mut rng, &[4, 5]));
    let shifted = g.offset(x, 123.456);
    let a = g.softmax(x, 1).unwrap();
    let b = g.softmax(shifted, 1).unwrap();
    for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((p - q).abs() < 1e-12);
    }
    for r in 0..4 {
        assert!((g.value(a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(matches!(g.softmax(x, 2), Err(Error::Argument(_))));
}

#[test]
fn softmax_gradients_each_axis() {
    let mut rng = Rng::new(6);
    for (shape, axis) in [(vec![3, 4], 1), (vec![3, 4], 0), (vec![2, 3, 4], 1)] {
        let x = random(&mut rng, &shape);
        let err = grad_check(
            |g, v| {
                let y = g.softmax(v, axis)?;
                probe_sum(g, y, 7)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{shape:?} axis {axis}: {err}");
    }
}

#[test]
fn layernorm_constant_row_and_moments() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 6], 3.5));
    let gamma = g.constant(Tensor::full(&[6], 1.0));
    let beta = g.constant(Tensor::zeros(&[6]));
    let y = g.layernorm(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = Rng::new(8);
    let x = g.constant(random(&mut rng, &[3, 64]));
    let gamma = g.constant(Tensor::full(&[64], -2.0));
    let beta = g.constant(Tensor::full(&[64], 0.75));
    let y = g.layernorm(x, gamma, beta, 1e-5).unwrap();
    for r in 0..3 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 64.0;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!((mean - 0.75).abs() < 1e-9);
        assert!((std - 2.0).abs() < 1e-3);
    }
}

#[test]
fn layernorm_gradients() {
    let mut rng = Rng::new(9);
    for shape in [vec![1, 5], vec![4, 8], vec![2, 3, 6]] {
        let c = *shape.last().unwrap();
        let inputs = [
            random(&mut rng, &shape),
            random(&mut rng, &[c]),
            random(&mut rng, &[c]),
        ];
        let r = grad_check_multi(
            |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
                probe_sum(g, y, 10)
            },
            &inputs,
            DEFAULT_STEP,
            None,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{shape:?}: {r:?}");
    }
}

#[test]
fn cosine_distance_reference_values() {
    let u = [1.0, 2.0, -0.5];
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    assert!(cosine_distance(&u, &u).unwrap().value.abs() < 1e-15);
    assert!((cosine_distance(&u, &neg).unwrap().value - 2.0).abs() < 1e-15);
    assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap().value - 1.0).abs() < 1e-15);
    let d = cosine_distance(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
    assert_eq!(d.value, 1.0);
    assert!(d.degenerate);
    assert!(cosine_distance(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn graph_cosine_matches_value_route_and_flags_degenerate() {
    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let v = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.5, 2.0]).unwrap());
    let d = g.cosine_distance(u, v).unwrap();
    let expected = cosine_distance(&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0])
        .unwrap()
        .value;
    assert!((g.value(d).item() - expected).abs() < 1e-15);
    let z = g.constant(Tensor::zeros(&[3]));
    let dz = g.cosine_distance(u, z).unwrap();
    assert_eq!(g.value(dz).item(), 1.0);
    assert_eq!(g.degenerate_cosines(), 1);
}

#[test]
fn cosine_gradients_both_arguments() {
    let mut rng = Rng::new(11);
    let inputs = [random(&mut rng, &[7]), random(&mut rng, &[7])];
    let r = grad_check_multi(
        |g, v| g.cosine_distance(v[0], v[1]),
        &inputs,
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");

    let inputs = [random(&mut rng, &[5, 4]), random(&mut rng, &[5, 4])];
    let r = grad_check_multi(
        |g, v| {
            let d = g.row_cosine_distance(v[0], v[1])?;
            probe_sum(g, d, 12)
        },
        &inputs,
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");

    let inputs = [random(&mut rng, &[6, 4]), random(&mut rng, &[3, 4])];
    let r = grad_check_multi(
        |g, v| {
            let d = g.cosine_distance_matrix(v[0], v[1])?;
            probe_sum(g, d, 13)
        },
        &inputs,
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn elementwise_and_structural_gradients() {
    let mut rng = Rng::new(14);
    for shape in [vec![2, 3], vec![4, 6], vec![1, 9]] {
        let (r, c) = (shape[0], shape[1]);
        let inputs = [
            random(&mut rng, &shape),
            random(&mut rng, &shape),
            random(&mut rng, &[c]),
        ];
        let rep = grad_check_multi(
            |g, v| {
                let a = g.mul(v[0], v[1])?;
                let b = g.sub(a, v[1])?;
                let b = g.add_row(b, v[2])?;
                let b = g.gelu(b);
                let t = g.transpose(b)?;
                let t = g.transpose(t)?;
                let s = g.slice_cols(t, 0, c / 2 + 1)?;
                let cat = g.concat_cols(&[s, v[0]])?;
                let m = g.scale(cat, 0.5);
                let m = g.offset(m, 1.0);
                let flat = g.reshape(m, &[r * (c / 2 + 1 + c)])?;
                let avg = g.mean_of(&[v[0], v[1], a])?;
                let s1 = probe_sum(g, flat, 15)?;
                let s2 = g.mean(avg);
                let s2 = g.scale(s2, 3.0);
                let both = g.add(s1, s2)?;
                Ok(both)
            },
            &inputs,
            DEFAULT_STEP,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{shape:?}: {rep:?}");
    }
}

#[test]
fn quadratic_grad_check_is_tight() {
    let mut rng = Rng::new(16);
    let x = random(&mut rng, &[3, 5]);
    let err = grad_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_rejects_non_finite() {
    let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
    let r = grad_check(
        |g, v| {
            let big = g.scale(v, 1e308);
            let sq = g.mul(big, big)?;
            Ok(g.sum(sq))
        },
        &x,
        DEFAULT_STEP,
    );
    assert!(matches!(r, Err(Error::Numeric { .. })));
}

#[test]
fn stop_gradient_is_transparent_forward_and_opaque_backward() {
    let mut rng = Rng::new(17);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random(&mut rng, &[3, 3]), true);
    let sx = g.stop_gradient(x);
    assert_eq!(g.value(sx), g.value(x));
    let sq = g.mul(sx, sx).unwrap();
    let direct = g.sum(x);
    let s = g.sum(sq);
    let total = g.add(s, direct).unwrap();
    let grads = g.backward(total).unwrap();
    // only the direct path contributes
    assert!(grads.wrt(x).data().iter().all(|&v| v == 1.0));
    assert!(grads.get(sx).is_none());
}

#[test]
fn second_backward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(2.0), true);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::State(_))));
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(x), Err(Error::Dimension { .. })));
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
    assert_eq!(t.numel(), 6);
    assert!(t.clone().reshape(&[4]).is_err());
    assert_eq!(t.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
}

#[test]
fn f32_and_f64_agree() {
    let mut rng = Rng::new(18);
    let a = random(&mut rng, &[4, 8]);
    let b = random(&mut rng, &[8, 3]);
    let mut g64 = Graph::<f64>::new();
    let (x, y) = (g64.constant(a.clone()), g64.constant(b.clone()));
    let c64 = g64.matmul(x, y).unwrap();
    let mut g32 = Graph::<f32>::new();
    let (x, y) = (g32.constant(a.cast()), g32.constant(b.cast()));
    let c32 = g32.matmul(x, y).unwrap();
    for (p, q) in g64.value(c64).data().iter().zip(g32.value(c32).data()) {
        assert!((p - *q as f64).abs() < 1e-4);
    }
}

proptest! {
    #[test]
    fn cosine_symmetric_and_scale_invariant(
        u in proptest::collection::vec(-10.0f64..10.0, 6),
        v in proptest::collection::vec(-10.0f64..10.0, 6),
        alpha in 0.01f64..100.0,
    ) {
        let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(nu > 1e-3 && nv > 1e-3);
        let d = cosine_distance(&u, &v).unwrap().value;
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert!((d - cosine_distance(&v, &u).unwrap().value).abs() < 1e-12);
        let scaled: Vec<f64> = u.iter().map(|x| x * alpha).collect();
        prop_assert!((d - cosine_distance(&scaled, &v).unwrap().value).abs() < 1e-12);
    }
}
