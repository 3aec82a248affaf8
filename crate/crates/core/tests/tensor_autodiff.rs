use occgen_core::tensor::{grad_check, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let tape = Tape::new();
    let a = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
    let eye = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
    assert_eq!(a.matmul(eye).unwrap().value().data(), &[1., 2., 3., 4.]);
    let b = tape.constant(&t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
    // 1*5+2*7, 1*6+2*8, 3*5+4*7, 3*6+4*8
    assert_eq!(a.matmul(b).unwrap().value().data(), &[19., 22., 43., 50.]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![3])).unwrap();
    for v in x.softmax().unwrap().value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(vec![2, 3])).unwrap();
    let b = tape.constant(&Tensor::zeros(vec![2, 2])).unwrap();
    match a.matmul(b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let err = a.add(b).unwrap_err();
    assert!(err.to_string().contains("add"));
}

#[test]
fn product_rule_and_square_sum() {
    let tape = Tape::new();
    let x = tape.param(&Tensor::scalar(2.0)).unwrap();
    let y = tape.param(&Tensor::scalar(3.0)).unwrap();
    let g = tape.backward(x.mul(y).unwrap()).unwrap();
    assert_eq!(g.wrt(x).item(), 3.0);
    assert_eq!(g.wrt(y).item(), 2.0);

    let tape = Tape::new();
    let x = tape.param(&t(&[2], &[1., 2.])).unwrap();
    let loss = x.square().unwrap().sum().unwrap();
    assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[2., 4.]);
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let x = tape.param(&t(&[2], &[1., 2.])).unwrap();
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    let c = tape.constant(&Tensor::scalar(1.0)).unwrap();
    let d = c.scale(2.0).unwrap();
    assert_eq!(tape.backward(d).unwrap_err(), TensorError::DetachedLoss);
}

#[test]
fn backward_is_idempotent_and_unused_leaf_is_zero() {
    let tape = Tape::new();
    let x = tape.param(&t(&[3], &[0.1, -0.4, 0.9])).unwrap();
    let unused = tape.param(&t(&[2], &[5.0, 6.0])).unwrap();
    let loss = x.tanh().unwrap().square().unwrap().sum().unwrap();
    let g1 = tape.backward(loss).unwrap();
    let g2 = tape.backward(loss).unwrap();
    assert_eq!(g1.wrt(x), g2.wrt(x));
    assert_eq!(g1.wrt(unused).data(), &[0.0, 0.0]);
}

#[test]
fn softmax_dot_composite_matches_finite_differences() {
    let w = t(&[4], &[0.3, -1.2, 0.8, 2.0]);
    let x = t(&[4], &[0.5, -0.1, 1.3, -0.7]);
    let err = grad_check(
        |tape, x| {
            let w = tape.constant(&w)?;
            x.softmax()?.mul(w)?.sum()
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn grad_check_examples() {
    let x = t(&[3], &[0.2, -1.0, 4.0]);
    let err = grad_check(|_, x| x.sum(), &x, 1e-5).unwrap();
    assert!(err < 1e-10);

    let x = t(&[2], &[0.3, -0.7]);
    let err = grad_check(|_, x| x.tanh()?.sum(), &x, 1e-5).unwrap();
    assert!(err < 1e-6);

    // bilinear sampling with the sample positions as the checked input
    let grid = Tensor::from_fn(vec![3, 4, 2], |i| ((i * 7 % 11) as f64) * 0.3 - 1.0);
    let coords = t(&[3, 2], &[0.3, 1.7, 1.25, 2.6, 1.9, 0.45]);
    let err = grad_check(
        |tape, c| {
            let g = tape.constant(&grid)?;
            Var::bilinear_sample(g, c)?.square()?.sum()
        },
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "bilinear coordinate gradient error {err}");
}

#[test]
fn grad_check_rejects_bad_step_and_non_finite() {
    let x = t(&[1], &[1.0]);
    assert!(grad_check(|_, x| x.sum(), &x, 0.0).is_err());
    let x = t(&[1], &[0.0]);
    assert!(grad_check(|tape, x| x.div(tape.constant(&Tensor::zeros(vec![1]))?)?.sum(), &x, 1e-5).is_err());
}

#[test]
fn bilinear_interpolation_nodes() {
    let tape = Tape::new();
    let grid = tape
        .constant(&t(&[2, 2, 1], &[0.0, 5.0, 2.0, 7.0]))
        .unwrap();
    let at_node = tape.constant(&t(&[1, 2], &[1.0, 1.0])).unwrap();
    let v = Var::bilinear_sample(grid, at_node).unwrap().value();
    assert!((v.data()[0] - 7.0).abs() < 1e-12);
    // halfway between (0,0)=0 and (1,0)=2
    let mid = tape.constant(&t(&[1, 2], &[0.5, 0.0])).unwrap();
    let v = Var::bilinear_sample(grid, mid).unwrap().value();
    assert!((v.data()[0] - 1.0).abs() < 1e-12);
    let outside = tape.constant(&t(&[1, 2], &[-3.0, 9.0])).unwrap();
    assert_eq!(Var::bilinear_sample(grid, outside).unwrap().value().data(), &[0.0]);
}

#[test]
fn concat_slice_permute_broadcast_values() {
    let tape = Tape::new();
    let a = tape.constant(&t(&[2, 1], &[1., 2.])).unwrap();
    let b = tape.constant(&t(&[2, 2], &[3., 4., 5., 6.])).unwrap();
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(c.value().data(), &[1., 3., 4., 2., 5., 6.]);
    assert_eq!(c.slice(1, 1, 2).unwrap().value().data(), &[3., 4., 5., 6.]);
    assert_eq!(c.permute(&[1, 0]).unwrap().value().data(), &[1., 2., 3., 5., 4., 6.]);
    let row = tape.constant(&t(&[3], &[1., 2., 3.])).unwrap();
    assert_eq!(
        row.broadcast_to(&[2, 3]).unwrap().value().data(),
        &[1., 2., 3., 1., 2., 3.]
    );
    assert_eq!(c.sum_axis(0).unwrap().value().data(), &[3., 8., 10.]);
}

#[test]
fn tape_limit_is_enforced() {
    let tape = Tape::with_limit(3);
    let x = tape.param(&Tensor::scalar(1.0)).unwrap();
    let y = x.scale(2.0).unwrap();
    let z = y.scale(2.0).unwrap();
    assert!(matches!(z.scale(2.0), Err(TensorError::TapeExhausted { limit: 3 })));
}

#[test]
fn untracked_values_are_shareable_across_threads() {
    let t = Tensor::from_fn(vec![4, 4], |i| i as f64);
    let shared = std::sync::Arc::new(t);
    let h = {
        let s = shared.clone();
        std::thread::spawn(move || s.data().iter().sum::<f64>())
    };
    assert_eq!(h.join().unwrap(), shared.data().iter().sum::<f64>());
}

fn arb_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

// One composite per primitive; each maps the checked input through the
// primitive and a fixed random projection to a scalar.
fn check_primitive(name: &str, x: &Tensor) -> f64 {
    let weights = |n: usize| Tensor::from_fn(vec![n], |i| ((i as f64 + 1.0) * 0.731).sin());
    grad_check(
        |tape, x| {
            let y = match name {
                "mul" => x.mul(x.scale(0.7)?.offset(0.3)?)?,
                "div" => x.div(x.square()?.offset(1.5)?)?,
                "sub" => x.sub(x.scale(0.5)?.tanh()?)?,
                "tanh" => x.tanh()?,
                "sqrt" => x.square()?.offset(0.5)?.sqrt()?,
                "exp" => x.scale(0.5)?.exp()?,
                "softmax" => x.reshape(vec![2, 3])?.softmax()?.reshape(vec![6])?,
                "matmul" => {
                    let m = x.reshape(vec![2, 3])?;
                    m.matmul_t(m)?.reshape(vec![4])?
                }
                "matmul_batched" => {
                    let m = x.reshape(vec![2, 1, 3])?;
                    let k = x.reshape(vec![2, 3, 1])?;
                    m.matmul(k)?.reshape(vec![2])?
                }
                "concat" => {
                    let m = x.reshape(vec![2, 3])?;
                    tape.concat(&[m, m.tanh()?], 1)?.reshape(vec![12])?
                }
                "slice" => x.reshape(vec![2, 3])?.slice(1, 1, 2)?.reshape(vec![4])?,
                "sum_axis" => x.reshape(vec![2, 3])?.sum_axis(1)?,
                "mean" => x.square()?.mean()?.reshape(vec![1])?,
                "broadcast" => x.reshape(vec![2, 1, 3])?.broadcast_to(&[2, 2, 3])?.reshape(vec![12])?,
                "permute" => x.reshape(vec![2, 3])?.permute(&[1, 0])?.reshape(vec![6])?,
                _ => unreachable!(),
            };
            let n = y.value().len();
            let w = tape.constant(&weights(n))?;
            y.mul(w)?.sum()
        },
        x,
        1e-5,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitive_gradients_match_central_differences(vals in arb_vals(6)) {
        let x = Tensor::new(vec![6], vals).unwrap();
        for name in ["mul", "div", "sub", "tanh", "sqrt", "exp", "softmax", "matmul",
                     "matmul_batched", "concat", "slice", "sum_axis", "mean", "broadcast", "permute"] {
            let err = check_primitive(name, &x);
            prop_assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }

    #[test]
    fn bilinear_grid_gradient_matches(vals in arb_vals(12), cx in 0.05f64..1.9, cy in 0.05f64..2.9) {
        // keep coordinates off integer kinks
        prop_assume!((cx.fract() - 0.0).abs() > 1e-3 && (cy.fract()).abs() > 1e-3);
        let grid = Tensor::new(vec![2, 3, 2], vals).unwrap();
        let coords = Tensor::new(vec![1, 2], vec![cx, cy]).unwrap();
        let err = grad_check(|tape, g| {
            let c = tape.constant(&coords)?;
            Var::bilinear_sample(g, c)?.square()?.sum()
        }, &grid, 1e-5).unwrap();
        prop_assert!(err < 1e-5, "grid gradient error {err}");
    }

    #[test]
    fn forward_is_bit_deterministic(vals in arb_vals(6)) {
        let x = Tensor::new(vec![2, 3], vals).unwrap();
        let run = || {
            let tape = Tape::new();
            let v = tape.constant(&x).unwrap();
            (*v.matmul_t(v).unwrap().softmax().unwrap().value()).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn backward_is_linear_in_the_loss(vals in arb_vals(4)) {
        let x = Tensor::new(vec![4], vals).unwrap();
        let tape = Tape::new();
        let xv = tape.param(&x).unwrap();
        let l1 = xv.tanh().unwrap().sum().unwrap();
        let l2 = xv.square().unwrap().mean().unwrap();
        let g1 = tape.backward(l1).unwrap().wrt(xv);
        let g2 = tape.backward(l2).unwrap().wrt(xv);
        let g12 = tape.backward(l1.add(l2).unwrap()).unwrap().wrt(xv);
        for i in 0..4 {
            prop_assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
        }
    }
}
