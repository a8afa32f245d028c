mod common;

use cainet::nn::SeparableConv;
use cainet::tensor::{GradCheck, ParamBuilder, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use common::{naive_conv, rand_tensor};

#[test]
fn matmul_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 5)] {
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let mut tape = Tape::no_grad();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.get(&[i, p]) * b.get(&[p, j])).sum();
                assert!((tape.value(c).get(&[i, j]) - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(c, h, w, co, k, stride, pad) in &[
        (1, 5, 5, 1, 3, 1, 1),
        (3, 7, 6, 4, 3, 2, 1),
        (2, 8, 8, 5, 1, 1, 0),
        (1, 9, 9, 1, 7, 1, 3),
        (4, 6, 6, 2, 3, 1, 0),
    ] {
        let x = rand_tensor(&mut rng, &[c, h, w]);
        let wt = rand_tensor(&mut rng, &[co, c, k, k]);
        let b = rand_tensor(&mut rng, &[co]);
        let mut tape = Tape::no_grad();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
        let (shape, want) = naive_conv(&x, &wt, Some(b.data()), stride, pad, 1);
        assert_eq!(tape.shape(y), shape.as_slice());
        let got = tape.value(y).data();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
    }
}

#[test]
fn depthwise_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(c, h, w, stride) in &[(3, 6, 6, 1), (4, 7, 5, 2), (1, 4, 4, 1)] {
        let x = rand_tensor(&mut rng, &[c, h, w]);
        let wt = rand_tensor(&mut rng, &[c, 1, 3, 3]);
        let b = rand_tensor(&mut rng, &[c]);
        let mut tape = Tape::no_grad();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.depthwise_conv2d(vx, vw, Some(vb), stride, 1).unwrap();
        let (shape, want) = naive_conv(&x, &wt, Some(b.data()), stride, 1, c);
        assert_eq!(tape.shape(y), shape.as_slice());
        for (g, w) in tape.value(y).data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
    }
}

#[test]
fn f32_conv_tracks_f64_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[8, 6, 6]);
    let w = rand_tensor(&mut rng, &[8, 8, 3, 3]);
    let (_, want) = naive_conv(&x, &w, None, 1, 1, 1);
    let mut tape = Tape::<f32>::no_grad();
    let (vx, vw) = (tape.constant(x.cast()), tape.constant(w.cast()));
    let y = tape.conv2d(vx, vw, None, 1, 1).unwrap();
    for (g, w) in tape.value(y).data().iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-5);
    }
}

#[test]
fn bilinear_resize_hand_values() {
    // Half-pixel centres: upsampling [0, 1] to four samples gives 0, .25, .75, 1.
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::from_f64([1, 1, 2], &[0.0, 1.0]).unwrap());
    let y = tape.resize_bilinear(x, 1, 4).unwrap();
    let got = tape.value(y).data();
    for (g, w) in got.iter().zip([0.0, 0.25, 0.75, 1.0]) {
        assert!((g - w).abs() < 1e-12, "{got:?}");
    }
    // Same extents is the identity.
    let z = tape.resize_bilinear(x, 1, 2).unwrap();
    assert_eq!(tape.value(z).data(), &[0.0, 1.0]);
    // A constant map stays constant at any size.
    let c = tape.constant(Tensor::full([2, 3, 5], 0.7));
    let d = tape.resize_bilinear(c, 7, 2).unwrap();
    assert!(tape.value(d).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn separable_conv_parameter_count() {
    // 4→8 with a 3×3 depthwise and biases: 4·9 + 4 + 8·4 + 8 = 80; without bias 36 + 32 = 68.
    let mut store = ParamStore::<f32>::new();
    SeparableConv::new(&mut ParamBuilder::new(&mut store, 0), "sep", 4, 8, 3, false).unwrap();
    assert_eq!(store.num_weights(), 68);
    let mut store = ParamStore::<f32>::new();
    SeparableConv::new(&mut ParamBuilder::new(&mut store, 0), "sep", 4, 8, 3, true).unwrap();
    assert_eq!(store.num_weights(), 80);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..3) {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::new([2, 3, 2], data).unwrap());
        let y = tape.softmax(x, axis).unwrap();
        let v = tape.value(y);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        let shape = [2usize, 3, 2];
        let n = shape[axis];
        let total: f64 = v.sum();
        prop_assert!((total - (12 / n) as f64).abs() < 1e-6 * 12.0);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..2 {
                    let mut idx = [i, j, k];
                    if idx[axis] != 0 { continue; }
                    let mut s = 0.0;
                    for a in 0..n {
                        idx[axis] = a;
                        s += v.get(&idx);
                    }
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn f32_softmax_sums_to_one(data in prop::collection::vec(-80.0f32..80.0, 8)) {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::new([8], data).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        prop_assert!((tape.value(y).sum() - 1.0).abs() < 1e-6);
    }
}

/// Gradient check of one op applied to random parameter inputs, projected to a scalar.
fn check_op(name: &str, shapes: &[&[usize]], seed: u64, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), rand_tensor(&mut rng, s)).unwrap())
        .collect();
    let mut probe = Tape::no_grad();
    let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id)).collect();
    let out = op(&mut probe, &vars);
    let r = rand_tensor(&mut rng, probe.shape(out));
    let report = GradCheck::default()
        .check(name, &mut store, |tape, store| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            let out = op(tape, &vars);
            let rv = tape.constant(r.clone());
            let m = tape.mul(out, rv)?;
            Ok(tape.sum(m))
        })
        .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn elementwise_gradients() {
    let s: &[usize] = &[2, 3, 3];
    check_op("add", &[s, s], 1, |t, v| t.add(v[0], v[1]).unwrap());
    check_op("sub", &[s, s], 2, |t, v| t.sub(v[0], v[1]).unwrap());
    check_op("mul", &[s, s], 3, |t, v| t.mul(v[0], v[1]).unwrap());
    check_op("scale", &[s], 4, |t, v| t.scale(v[0], -2.5));
    check_op("relu", &[s], 5, |t, v| t.relu(v[0]));
    check_op("relu6", &[s], 6, |t, v| {
        let x = t.scale(v[0], 8.0);
        t.relu6(x)
    });
    check_op("sigmoid", &[s], 7, |t, v| t.sigmoid(v[0]));
    check_op("sum", &[s], 8, |t, v| t.sum(v[0]));
    check_op("mean", &[s], 9, |t, v| t.mean(v[0]));
}

#[test]
fn broadcast_gradients() {
    check_op("add_spatial", &[&[3, 2, 4], &[1, 2, 4]], 1, |t, v| t.add_spatial(v[0], v[1]).unwrap());
    check_op("mul_channel", &[&[3, 2, 4], &[3, 1, 1]], 2, |t, v| t.mul_channel(v[0], v[1]).unwrap());
    check_op("mul_spatial", &[&[3, 2, 4], &[1, 2, 4]], 3, |t, v| t.mul_spatial(v[0], v[1]).unwrap());
    check_op("global_avg_pool", &[&[3, 4, 5]], 4, |t, v| t.global_avg_pool(v[0]).unwrap());
    check_op("channel_max", &[&[4, 3, 3]], 5, |t, v| t.channel_max(v[0]).unwrap());
}

#[test]
fn linear_algebra_gradients() {
    check_op("matmul", &[&[3, 4], &[4, 5]], 1, |t, v| t.matmul(v[0], v[1]).unwrap());
    check_op("transpose", &[&[3, 4]], 2, |t, v| t.transpose(v[0]).unwrap());
    check_op("reshape", &[&[2, 3, 4]], 3, |t, v| t.reshape(v[0], &[6, 4]).unwrap());
    check_op("concat", &[&[2, 3, 3], &[1, 3, 3]], 4, |t, v| t.concat(&[v[0], v[1]]).unwrap());
    for axis in 0..3 {
        check_op("softmax", &[&[3, 2, 4]], 5 + axis as u64, move |t, v| t.softmax(v[0], axis).unwrap());
    }
}

#[test]
fn convolution_gradients() {
    check_op("conv2d", &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], 1, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap());
    check_op("conv2d_s2", &[&[2, 6, 6], &[3, 2, 3, 3]], 2, |t, v| t.conv2d(v[0], v[1], None, 2, 1).unwrap());
    check_op("conv2d_1x1", &[&[4, 3, 3], &[2, 4, 1, 1], &[2]], 3, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0).unwrap());
    check_op("depthwise", &[&[3, 5, 5], &[3, 1, 3, 3], &[3]], 4, |t, v| {
        t.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()
    });
    check_op("depthwise_s2", &[&[2, 6, 6], &[2, 1, 3, 3]], 5, |t, v| t.depthwise_conv2d(v[0], v[1], None, 2, 1).unwrap());
    check_op("resize_up", &[&[2, 3, 2]], 6, |t, v| t.resize_bilinear(v[0], 7, 5).unwrap());
    check_op("resize_down", &[&[2, 8, 6]], 7, |t, v| t.resize_bilinear(v[0], 3, 4).unwrap());
}

#[test]
fn two_layer_conv_net_agrees_with_finite_differences() {
    check_op("conv_relu_conv", &[&[2, 6, 6], &[4, 2, 3, 3], &[4], &[3, 4, 3, 3]], 11, |t, v| {
        let h = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
        let h = t.relu(h);
        t.conv2d(h, v[3], None, 2, 1).unwrap()
    });
}

#[test]
fn mismatched_shapes_are_errors() {
    let mut tape = Tape::<f32>::no_grad();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(a, a).is_err());
    let x = tape.constant(Tensor::zeros([2, 4, 4]));
    let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
    assert!(tape.conv2d(x, w, None, 1, 1).is_err());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut store = ParamStore::<f32>::new();
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::ones([2]), true);
    assert!(tape.backward(a, &mut store).is_err());
    // A cleared tape has nothing to differentiate.
    let mut other = Tape::<f32>::new();
    let v = other.constant(Tensor::scalar(1.0));
    other.clear();
    assert!(other.backward(v, &mut store).is_err());
}
