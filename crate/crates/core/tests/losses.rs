mod common;

use cainet::losses::{
    attention_loss, attention_loss_value, class_frequencies, enet_class_weights, lovasz_softmax, lovasz_softmax_value,
    weighted_binary_cross_entropy, weighted_cross_entropy, LovaszClasses,
};
use cainet::tensor::{Tape, Tensor};
use common::{lovasz_oracle, simplex_grid};

#[test]
fn lovasz_matches_level_set_oracle_on_one_pixel() {
    for set in [LovaszClasses::Present, LovaszClasses::All] {
        for p in simplex_grid() {
            for label in 0..3 {
                let probs = [p[0], p[1], p[2]];
                let got = lovasz_softmax_value(&probs, &[label], 3, set);
                let want = lovasz_oracle(&probs, &[label], 3, set);
                assert!((got - want).abs() < 1e-6, "p={p:?} y={label} {got} vs {want}");
            }
        }
    }
}

#[test]
fn lovasz_matches_level_set_oracle_on_two_pixels() {
    let grid = simplex_grid();
    for set in [LovaszClasses::Present, LovaszClasses::All] {
        for a in &grid {
            for b in grid.iter().step_by(3) {
                for labels in [[0u32, 0], [0, 1], [1, 2], [2, 0]] {
                    // Channel-major: class k of pixel i at k·2 + i.
                    let probs = [a[0], b[0], a[1], b[1], a[2], b[2]];
                    let got = lovasz_softmax_value(&probs, &labels, 3, set);
                    let want = lovasz_oracle(&probs, &labels, 3, set);
                    assert!((got - want).abs() < 1e-6, "{a:?} {b:?} {labels:?}: {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn lovasz_of_perfect_prediction_is_zero() {
    let probs = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(lovasz_softmax_value(&probs, &[0, 1], 2, LovaszClasses::All), 0.0);
}

#[test]
fn lovasz_tape_value_uses_softmax_of_logits() {
    let logits = [0.3, -1.0, 1.2, 0.4];
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::from_f64([2, 1, 2], &logits).unwrap());
    let l = lovasz_softmax(&mut tape, x, &[1, 0], LovaszClasses::Present, None).unwrap();
    let p = |i: usize| {
        let (a, b) = (logits[i], logits[2 + i]);
        let e = (a.exp(), b.exp());
        [e.0 / (e.0 + e.1), e.1 / (e.0 + e.1)]
    };
    let (p0, p1) = (p(0), p(1));
    let probs = [p0[0], p1[0], p0[1], p1[1]];
    let want = lovasz_oracle(&probs, &[1, 0], 2, LovaszClasses::Present);
    assert!((tape.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn ignored_pixels_leave_lovasz_unchanged() {
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::from_f64([2, 1, 3], &[0.3, -1.0, 5.0, 1.2, 0.4, -5.0]).unwrap());
    let with = lovasz_softmax(&mut tape, x, &[1, 0, 1], LovaszClasses::Present, Some(1)).unwrap();
    let y = tape.constant(Tensor::from_f64([2, 1, 1], &[-1.0, 0.4]).unwrap());
    let without = lovasz_softmax(&mut tape, y, &[0], LovaszClasses::Present, None).unwrap();
    assert!((tape.value(with).item() - tape.value(without).item()).abs() < 1e-12);
}

#[test]
fn cross_entropy_hand_values() {
    let mut tape = Tape::<f64>::no_grad();
    // Pixel 0: logits (0, ln 3) → p = (1/4, 3/4); pixel 1: equal logits.
    let x = tape.constant(Tensor::from_f64([2, 1, 2], &[0.0, 0.0, 3f64.ln(), 0.0]).unwrap());
    let plain = weighted_cross_entropy(&mut tape, x, &[1, 0], None, None).unwrap();
    let want = -(0.75f64.ln() + 0.5f64.ln()) / 2.0;
    assert!((tape.value(plain).item() - want).abs() < 1e-12);
    let weighted = weighted_cross_entropy(&mut tape, x, &[1, 0], Some(&[2.0, 3.0]), None).unwrap();
    let want = -(3.0 * 0.75f64.ln() + 2.0 * 0.5f64.ln()) / 2.0;
    assert!((tape.value(weighted).item() - want).abs() < 1e-12);
    let ignored = weighted_cross_entropy(&mut tape, x, &[1, 0], None, Some(0)).unwrap();
    assert!((tape.value(ignored).item() + 0.75f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_inputs() {
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.constant(Tensor::zeros([2, 1, 2]));
    assert!(weighted_cross_entropy(&mut tape, x, &[0, 2], None, None).is_err());
    assert!(weighted_cross_entropy(&mut tape, x, &[0], None, None).is_err());
    assert!(weighted_cross_entropy(&mut tape, x, &[0, 1], Some(&[1.0]), None).is_err());
}

#[test]
fn binary_cross_entropy_hand_values() {
    let mut tape = Tape::<f64>::no_grad();
    let p = tape.constant(Tensor::from_f64([1, 1, 2], &[0.8, 0.3]).unwrap());
    let l = weighted_binary_cross_entropy(&mut tape, p, &[1, 0], [2.0, 5.0]).unwrap();
    let want = -(5.0 * 0.8f64.ln() + 2.0 * 0.7f64.ln()) / 2.0;
    assert!((tape.value(l).item() - want).abs() < 1e-12);
    // Saturated predictions are clamped, not infinite.
    let q = tape.constant(Tensor::from_f64([1, 1, 1], &[0.0]).unwrap());
    let l = weighted_binary_cross_entropy(&mut tape, q, &[1], [1.0, 1.0]).unwrap();
    assert!((tape.value(l).item() + 1e-7f64.ln()).abs() < 1e-9);
}

#[test]
fn attention_loss_of_perfect_prediction_is_minus_one() {
    let q: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
    assert!((attention_loss_value(&q, &q) + 1.0).abs() < 1e-6);
    let mut tape = Tape::<f64>::no_grad();
    let p = tape.constant(Tensor::from_f64([1, 5, 5], &q).unwrap());
    let l = attention_loss(&mut tape, p, &q).unwrap();
    assert!((tape.value(l).item() + 1.0).abs() < 1e-6);
}

#[test]
fn attention_loss_hand_value() {
    // p = (0, 1), q = (1, 0): mse 1, correlation −1 → 1 − (−1) = 2.
    let v = attention_loss_value(&[0.0, 1.0], &[1.0, 0.0]);
    assert!((v - 2.0).abs() < 1e-6);
    // Constant prediction has no correlation term.
    let v = attention_loss_value(&[0.5, 0.5], &[1.0, 0.0]);
    assert!((v - 0.25).abs() < 1e-12);
}

#[test]
fn enet_weights_follow_frequencies() {
    let freqs = class_frequencies([[0u32, 0, 0, 1].as_slice(), [1, 2, 0, 0].as_slice()], 3);
    assert_eq!(freqs, vec![5.0 / 8.0, 2.0 / 8.0, 1.0 / 8.0]);
    let w = enet_class_weights(&freqs).unwrap();
    for (wk, p) in w.iter().zip(&freqs) {
        assert!((wk - 1.0 / (1.02 + p).ln()).abs() < 1e-12);
    }
    assert!(w[0] < w[1] && w[1] < w[2]);
}
