use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stmixer_tensor::{grad_check, Conv3dGeometry, Tape, Tensor, TensorError, Var};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>) -> Var<'t> {
    let shape = y.shape();
    let w = tape.constant(Tensor::from_fn(shape, |i| ((i * 7 % 11) as f64 - 5.0) / 3.0));
    y.mul(w).unwrap().sum_all()
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let i2 = tape.var(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.var(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    assert_eq!(i2.matmul(m).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
    let a = tape.var(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.var(t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.var(Tensor::zeros([2, 3]));
    let b = tape.var(Tensor::zeros([2, 3]));
    match a.matmul(b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_is_exact_to_linear_tolerance() {
    let r = grad_check(
        |_, x| Ok(x[0].matmul(x[1])?.sum_all()),
        &[random(&[5, 4], 1), random(&[4, 3], 2)],
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn bmm_gradient() {
    let r = grad_check(
        |tape, x| Ok(weighted_sum(tape, x[0].bmm(x[1])?)),
        &[random(&[3, 2, 4], 3), random(&[3, 4, 5], 4)],
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn layernorm_examples() {
    let tape = Tape::new();
    let g = tape.var(Tensor::ones([3]));
    let b = tape.var(Tensor::zeros([3]));
    let x = tape.var(t(&[3], &[5.0, 5.0, 5.0]));
    assert_eq!(x.layernorm(g, b, 1e-5).unwrap().value().data(), &[0.0, 0.0, 0.0]);

    let g = tape.var(Tensor::ones([2]));
    let b = tape.var(Tensor::zeros([2]));
    let x = tape.var(t(&[2], &[1.0, 3.0]));
    let y = x.layernorm(g, b, 1e-15).unwrap().value();
    assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn layernorm_empty_axis_rejected() {
    let tape = Tape::new();
    let x = tape.var(Tensor::zeros([2, 0]));
    let g = tape.var(Tensor::zeros([0]));
    assert!(matches!(
        x.layernorm(g, g, 1e-5),
        Err(TensorError::EmptyAxis { .. })
    ));
}

#[test]
fn layernorm_gradient() {
    let r = grad_check(
        |tape, x| Ok(weighted_sum(tape, x[0].layernorm(x[1], x[2], 1e-5)?)),
        &[random(&[4, 8], 5), random(&[8], 6), random(&[8], 7)],
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
}

#[test]
fn conv3d_examples() {
    let tape = Tape::new();
    let x = random(&[1, 2, 3, 3], 8);
    let xv = tape.var(x.clone());
    let w = tape.var(Tensor::full([1, 1, 1, 1, 1], 2.0));
    let y = xv.conv3d(w, None, Conv3dGeometry::new(1, 0)).unwrap().value();
    assert_eq!(y.data(), x.map(|v| 2.0 * v).data());

    let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.5]);
    let y = tape
        .var(x)
        .conv3d(tape.var(Tensor::ones([1, 1, 1, 2, 2])), None, Conv3dGeometry::new(2, 0))
        .unwrap()
        .value();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[10.5]);
}

#[test]
fn conv3d_output_extent() {
    let tape = Tape::new();
    let x = tape.var(Tensor::zeros([1, 8, 64, 64]));
    let stem = x
        .conv3d(tape.var(Tensor::zeros([8, 1, 1, 5, 5])), None, Conv3dGeometry::new(4, 2))
        .unwrap();
    assert_eq!(stem.shape(), vec![8, 8, 16, 16]);
    let s1 = stem
        .conv3d(tape.var(Tensor::zeros([16, 8, 1, 3, 3])), None, Conv3dGeometry::new(2, 1))
        .unwrap();
    assert_eq!(s1.shape(), vec![16, 8, 8, 8]);
}

#[test]
fn conv3d_kernel_too_large() {
    let tape = Tape::new();
    let x = tape.var(Tensor::zeros([1, 1, 2, 2]));
    let w = tape.var(Tensor::zeros([1, 1, 1, 5, 5]));
    assert!(matches!(
        x.conv3d(w, None, Conv3dGeometry::new(1, 0)),
        Err(TensorError::Geometry { .. })
    ));
}

#[test]
fn conv3d_gradient_with_temporal_kernel() {
    let r = grad_check(
        |tape, x| {
            let y = x[0].conv3d(x[1], Some(x[2]), Conv3dGeometry::new(2, 1))?;
            Ok(weighted_sum(tape, y))
        },
        &[random(&[2, 3, 5, 5], 9), random(&[3, 2, 3, 3, 3], 10), random(&[3], 11)],
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
}

#[test]
fn conv_transpose3d_gradient_and_extent() {
    let r = grad_check(
        |tape, x| {
            let y = x[0].conv_transpose3d(x[1], Some(x[2]), 2)?;
            assert_eq!(y.shape(), vec![3, 2, 6, 6]);
            Ok(weighted_sum(tape, y))
        },
        &[random(&[2, 2, 3, 3], 12), random(&[2, 3, 1, 2, 2], 13), random(&[3], 14)],
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
}

#[test]
fn upsample_nearest_index_rule() {
    let x = random(&[2, 1, 2, 3], 15);
    let tape = Tape::new();
    let y = tape.var(x.clone()).upsample_nearest(4).unwrap().value();
    assert_eq!(y.shape(), &[2, 1, 8, 12]);
    for c in 0..2 {
        for yy in 0..8 {
            for xx in 0..12 {
                assert_eq!(y.at(&[c, 0, yy, xx]), x.at(&[c, 0, yy / 4, xx / 4]));
            }
        }
    }
}

#[test]
fn elementwise_gradients() {
    // inputs kept away from the kinks of relu/abs/min/max
    let a = Tensor::from_fn([3, 4], |i| 0.3 + 0.17 * i as f64 * if i % 2 == 0 { 1.0 } else { -1.0 });
    let b = Tensor::from_fn([3, 4], |i| 1.1 + 0.05 * i as f64);
    let r = grad_check(
        |tape, x| {
            let y = x[0]
                .mul(x[1])?
                .add(x[0].relu())?
                .sub(x[1].sigmoid())?
                .add(x[0].abs().div(x[1])?)?
                .add(x[0].minimum(x[1])?)?
                .add(x[0].maximum(x[1].scale(0.5))?)?
                .add(x[1].ln())?
                .add(x[0].exp2())?
                .add(x[0].softplus())?
                .add(x[0].square().exp().scale(0.1))?
                .add(x[0].clamp(-0.5, 0.5))?;
            Ok(weighted_sum(tape, y))
        },
        &[a, b],
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{} at {:?}", r.max_rel_error, r.worst);
}

#[test]
fn sum_of_x_has_all_ones_gradient() {
    let r = grad_check(|_, x| Ok(x[0].sum_all()), &[random(&[3, 3], 16)]).unwrap();
    assert!(r.max_rel_error < 1e-9);
    assert!(r.analytic[0].data().iter().all(|&g| g == 1.0));
}

#[test]
fn relu_sum_above_one_is_locally_linear() {
    let x = Tensor::from_fn([10], |i| 1.5 + i as f64);
    let r = grad_check(|_, x| Ok(x[0].relu().sum_all()), &[x]).unwrap();
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn shape_op_gradients() {
    let r = grad_check(
        |tape, x| {
            let p = x[0].permute(&[2, 0, 1])?; // [4,2,3]
            let c = Var::concat(&[p, x[1]], 1)?; // [4,3,3]
            let n = c.narrow(1, 1, 2)?; // [4,2,3]
            let s = n.index_select(&[3, 0, 0])?; // [3,2,3]
            let m = s.mean_axis(1)?.add(s.sum_axis(1)?)?; // [3,3]
            let r = m.reshape(&[9])?.repeat_leading(2); // [2,9]
            let b = r.add_bias(x[2])?.mul_bias(x[2])?;
            Ok(weighted_sum(tape, b).add(x[0].transpose(0, 2)?.mean_all())?)
        },
        &[random(&[2, 3, 4], 17), random(&[4, 1, 3], 18), random(&[9], 19)],
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn softmax_family_gradients() {
    let valid = [true, false, true, true, false];
    let r = grad_check(
        |tape, x| {
            let a = x[0].softmax()?;
            let b = x[0].masked_softmax(Some(&valid))?;
            let c = x[0].log_softmax()?;
            Ok(weighted_sum(tape, a.add(b)?.add(c)?))
        },
        &[random(&[3, 5], 20)],
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn masked_positions_get_zero_weight() {
    let tape = Tape::new();
    let x = tape.var(random(&[2, 4], 21));
    let y = x.masked_softmax(Some(&[true, false, true, false])).unwrap().value();
    assert_eq!(y.at(&[0, 1]), 0.0);
    assert_eq!(y.at(&[1, 3]), 0.0);
    assert!(x.masked_softmax(Some(&[false; 4])).is_err());
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let tape = Tape::new();
        let a = tape.var(random(&[6, 5], 22));
        let w = tape.var(random(&[5, 5], 23));
        let g = tape.var(Tensor::ones([5]));
        let b = tape.var(Tensor::zeros([5]));
        let y = a.matmul(w).unwrap().layernorm(g, b, 1e-5).unwrap().relu().softmax().unwrap();
        let loss = weighted_sum(&tape, y);
        let grads = tape.backward(loss);
        (grads.get(a), grads.get(w))
    };
    let (a1, w1) = run();
    let (a2, w2) = run();
    assert!(a1.bitwise_eq(&a2) && w1.bitwise_eq(&w2));
}

#[test]
fn constants_receive_no_gradient_work() {
    let tape = Tape::new();
    let c = tape.constant(random(&[3], 24));
    let y = c.square().sum_all();
    assert!(!y.requires_grad());
    let x = tape.var(random(&[3], 25));
    let z = x.mul(c).unwrap().sum_all();
    let grads = tape.backward(z);
    assert_eq!(grads.get(x).data(), c.value().data());
    assert_eq!(grads.get(c).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.var(Tensor::full([2], 3.0));
    let y = x.mul(x.detach()).unwrap().sum_all();
    let grads = tape.backward(y);
    assert_eq!(grads.get(x).data(), &[3.0, 3.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let tape = Tape::new();
        let x = tape.var(random(&[rows, cols], seed).map(|v| v * scale));
        let y = x.softmax().unwrap().value();
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_in_open_unit_interval(v in -30.0f64..30.0) {
        let tape = Tape::new();
        let y = tape.var(Tensor::scalar(v)).sigmoid().value().item();
        prop_assert!(y > 0.0 && y < 1.0);
    }

    #[test]
    fn permute_roundtrip(seed in any::<u64>(), a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let x = random(&[a, b, c], seed);
        let tape = Tape::new();
        let y = tape.var(x.clone()).permute(&[1, 2, 0]).unwrap().permute(&[2, 0, 1]).unwrap();
        prop_assert!(y.value().bitwise_eq(&x));
    }
}
