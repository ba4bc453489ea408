use super::Rng;
use super::*;
use proptest::prelude::{prop_assert, proptest};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(rng.normals(n, 1.0), shape).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_hand_cases() {
    let m = Tensor::new(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
    assert_eq!(Tensor::eye(2).matmul(&m).unwrap().data(), m.data());
    let a = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = Tensor::new(vec![3.0, 4.0], &[2, 1]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    assert!(close(a.matmul(&b).unwrap().data(), &triple_loop(&a, &b), 1e-12));
    // transposed-rhs route agrees with an explicit transpose
    let bt = b.transpose().unwrap();
    assert!(close(a.matmul_t(&bt).unwrap().data(), &triple_loop(&a, &b), 1e-12));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_batched_matches_per_slice() {
    let mut rng = Rng::new(2);
    let a = random(&[3, 2, 4], &mut rng);
    let b = random(&[3, 4, 5], &mut rng);
    let c = a.matmul(&b).unwrap();
    for bi in 0..3 {
        let asl = a.narrow(0, bi, 1).unwrap().reshape(&[2, 4]).unwrap();
        let bsl = b.narrow(0, bi, 1).unwrap().reshape(&[4, 5]).unwrap();
        assert!(close(&c.data()[bi * 10..(bi + 1) * 10], &triple_loop(&asl, &bsl), 1e-12));
    }
}

#[test]
fn softmax_examples() {
    let s = Tensor::new(vec![0.0, 0.0], &[2]).unwrap().softmax(0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    for c in [-3.0, 0.0, 17.5] {
        let s = Tensor::new(vec![c, c + 2f64.ln()], &[2]).unwrap().softmax(0).unwrap();
        assert!(close(s.data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-12));
    }
    let s = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap().softmax(0).unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    assert!(close(s.data(), &oracle, 1e-15));
}

#[test]
fn softmax_along_leading_axis() {
    let x = Tensor::new(vec![1.0, 5.0, 2.0, 5.0], &[2, 2]).unwrap();
    let s = x.softmax(0).unwrap();
    let e = 1.0 / (1.0 + 1f64.exp());
    assert!(close(s.data(), &[e, 0.5, 1.0 - e, 0.5], 1e-15));
}

#[test]
fn layernorm_examples() {
    let y = Tensor::ones(&[4]).layernorm(0, LN_EPS).unwrap();
    assert_eq!(y.data(), &[0.0; 4]);
    let y = Tensor::new(vec![-2.5, 2.5], &[2]).unwrap().layernorm(0, 1e-14).unwrap();
    assert!(close(y.data(), &[-1.0, 1.0], 1e-12));
    let mut rng = Rng::new(3);
    let x = random(&[64], &mut rng).scale(3.0).add_scalar(7.0);
    let y = x.layernorm(0, LN_EPS).unwrap();
    let mean = y.data().iter().sum::<f64>() / 64.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn sinusoidal_examples() {
    let e0 = sinusoidal_embed(0.0, 8).unwrap();
    for i in 0..4 {
        assert_eq!(e0.data()[2 * i], 0.0);
        assert_eq!(e0.data()[2 * i + 1], 1.0);
    }
    let e1 = sinusoidal_embed(1.0, 8).unwrap();
    assert_ne!(e0.data()[0], e1.data()[0]);
    let e7 = sinusoidal_embed(7.0, 8).unwrap();
    let oracle: Vec<f64> = (0..8)
        .map(|j| {
            let w = 1.0 / 10000f64.powf((j / 2 * 2) as f64 / 8.0);
            if j % 2 == 0 {
                (7.0 * w).sin()
            } else {
                (7.0 * w).cos()
            }
        })
        .collect();
    assert!(close(e7.data(), &oracle, 1e-15));
    assert!(matches!(sinusoidal_embed(1.0, 7), Err(TensorError::Config(_))));
}

#[test]
fn backward_examples() {
    let x = Tensor::param(vec![0.5, -1.0, 2.0], &[3]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    // accumulates on repeated calls
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    x.zero_grad();
    assert!(x.grad().is_none());

    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    x.square().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);

    let err = x.square().backward().unwrap_err();
    assert!(matches!(err, TensorError::NonScalarLoss(_)));
}

#[test]
fn backward_through_shared_subexpression() {
    // y = x*x + x, reused node must accumulate both paths.
    let x = Tensor::param(vec![3.0], &[1]).unwrap();
    let sq = x.mul(&x).unwrap();
    sq.add(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![7.0]);
}

#[test]
fn finite_diff_examples() {
    let mut rng = Rng::new(4);
    let x = random(&[5], &mut rng);
    let g = finite_diff_grad(|t| Ok(t.sum().item()), &x, 1e-4).unwrap();
    assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    let s = Tensor::new(vec![3.0], &[1]).unwrap();
    let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &s, 1e-4).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
}

#[test]
fn finite_diff_agrees_with_backward_on_mlp() {
    let mut rng = Rng::new(5);
    let x = random(&[4, 3], &mut rng);
    let w1 = random(&[3, 6], &mut rng);
    let b1 = random(&[6], &mut rng);
    let w2 = random(&[6, 2], &mut rng);
    let report = check_gradients(
        &[x, w1, b1, w2],
        |p| {
            let h = p[0].matmul(&p[1])?.add(&p[2])?.gelu();
            Ok(h.matmul(&p[3])?.square().mean())
        },
        1e-5,
    )
    .unwrap();
    assert!(report.worst() < 1e-4, "{report:?}");
}

#[test]
fn backward_matches_finite_differences_for_each_op() {
    let mut rng = Rng::new(6);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 3], &mut rng);
    let v = random(&[4], &mut rng);
    let pos = Tensor::new(a.data().iter().map(|x| x.abs() + 0.5).collect(), a.shape()).unwrap();
    let w = random(&[2, 3, 4], &mut rng);
    type LossFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;
    let cases: Vec<(&str, Vec<Tensor>, LossFn)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|p| Ok(p[0].matmul(&p[1])?.square().sum()))),
        ("matmul_t", vec![a.clone(), a.clone()], Box::new(|p| Ok(p[0].matmul_t(&p[1])?.tanh().sum()))),
        (
            "linear",
            vec![a.clone(), b.narrow(0, 0, 1).unwrap().reshape(&[4, 3]).unwrap()],
            Box::new(|p| Ok(p[0].matmul(&p[1])?.square().sum())),
        ),
        ("broadcast_add", vec![a.clone(), v.clone()], Box::new(|p| Ok(p[0].add(&p[1])?.square().sum()))),
        ("broadcast_mul", vec![a.clone(), v.clone()], Box::new(|p| Ok(p[0].mul(&p[1])?.square().sum()))),
        ("sub", vec![a.clone(), w.clone()], Box::new(|p| Ok(p[0].sub(&p[1])?.square().sum()))),
        ("div", vec![a.clone(), pos.clone()], Box::new(|p| Ok(p[0].div(&p[1])?.sum()))),
        ("softmax_last", vec![a.clone(), w.clone()], Box::new(|p| Ok(p[0].softmax(2)?.mul(&p[1])?.sum()))),
        ("softmax_mid", vec![a.clone(), w.clone()], Box::new(|p| Ok(p[0].softmax(1)?.mul(&p[1])?.sum()))),
        ("log_softmax", vec![a.clone(), w.clone()], Box::new(|p| Ok(p[0].log_softmax(2)?.mul(&p[1])?.sum()))),
        ("layernorm", vec![a.clone(), w.clone()], Box::new(|p| Ok(p[0].layernorm(2, LN_EPS)?.mul(&p[1])?.sum()))),
        ("layernorm_mid", vec![a.clone(), w.clone()], Box::new(|p| Ok(p[0].layernorm(1, LN_EPS)?.mul(&p[1])?.sum()))),
        ("gelu", vec![a.clone()], Box::new(|p| Ok(p[0].gelu().square().sum()))),
        ("silu", vec![a.clone()], Box::new(|p| Ok(p[0].silu().square().sum()))),
        ("exp_ln", vec![pos.clone()], Box::new(|p| Ok(p[0].ln().exp().sum()))),
        (
            "permute",
            vec![a.clone(), w.clone()],
            Box::new(|p| Ok(p[0].permute(&[2, 0, 1])?.permute(&[1, 2, 0])?.mul(&p[1])?.square().sum())),
        ),
        (
            "concat_narrow",
            vec![a.clone(), w.clone()],
            Box::new(|p| {
                let c = Tensor::concat(&[p[0].clone(), p[1].clone()], 1)?;
                Ok(c.narrow(1, 2, 3)?.square().sum())
            }),
        ),
        (
            "index_select",
            vec![a.clone()],
            Box::new(|p| Ok(p[0].reshape(&[6, 4])?.index_select(&[5, 0, 0, 3])?.square().sum())),
        ),
        ("pick", vec![a.clone()], Box::new(|p| Ok(p[0].reshape(&[6, 4])?.pick(&[0, 3, 1, 1, 2, 0])?.square().sum()))),
        ("sum_axis", vec![a.clone()], Box::new(|p| Ok(p[0].sum_axis(1)?.square().sum()))),
        ("mean_axis", vec![a.clone()], Box::new(|p| Ok(p[0].mean_axis(0)?.square().sum()))),
    ];
    for (name, inputs, f) in cases {
        let report = check_gradients(&inputs, |p| f(p), 1e-5).unwrap();
        assert!(report.worst() < 1e-4, "{name}: {report:?}");
    }
}

#[test]
fn straight_through_forward_hard_backward_soft() {
    let soft = Tensor::param(vec![0.3, 0.7], &[2]).unwrap();
    let st = soft.straight_through(vec![1.0, 0.0]).unwrap();
    assert_eq!(st.data(), &[1.0, 0.0]);
    st.scale(2.0).sum().backward().unwrap();
    assert_eq!(soft.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn constants_do_not_record_graph() {
    let a = Tensor::ones(&[2, 2]);
    let b = a.matmul(&a).unwrap();
    assert!(!b.requires_grad() && b.is_leaf());
}

#[test]
fn rng_is_deterministic_and_streams_differ() {
    let mut a = Rng::new(42);
    let mut b = Rng::new(42);
    let xa: Vec<f64> = (0..16).map(|_| a.normal()).collect();
    let xb: Vec<f64> = (0..16).map(|_| b.normal()).collect();
    assert_eq!(xa, xb);
    let mut s1 = a.derive(1);
    let mut s2 = a.derive(2);
    assert_ne!(s1.uniform(), s2.uniform());
    let g: Vec<f64> = (0..1000).map(|_| a.gumbel()).collect();
    assert!(g.iter().all(|v| v.is_finite()));
}

proptest! {
    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 5), 1..6),
        shift in -50.0f64..50.0,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let x = Tensor::new(flat.clone(), &[n, 5]).unwrap();
        let s = x.softmax(1).unwrap();
        for r in 0..n {
            let total: f64 = s.data()[r * 5..(r + 1) * 5].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        let shifted = x.add_scalar(shift).softmax(1).unwrap();
        prop_assert!(close(s.data(), shifted.data(), 1e-12));
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, l in 1usize..5, n in 1usize..5) {
        let mut rng = Rng::new(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, l], &mut rng);
        let c = random(&[l, n], &mut rng);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(vals in proptest::collection::vec(-1e3f64..1e3, 12)) {
        let x = Tensor::new(vals, &[3, 4]).unwrap();
        for y in [x.softmax(1).unwrap(), x.layernorm(1, LN_EPS).unwrap(), x.gelu(), x.log_softmax(0).unwrap()] {
            prop_assert!(y.all_finite());
        }
    }
}
