mod common;

use cainet::metrics::{ConfusionMatrix, MetricOptions, ZeroClass};
use common::set_oracle;
use proptest::prelude::*;

fn labels(k: u32, n: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0..k, n)
}

proptest! {
    #[test]
    fn matches_set_oracle(
        (pred, truth) in (1usize..40).prop_flat_map(|n| (labels(4, n), labels(4, n))),
        zero in any::<bool>(),
        unlabeled in any::<bool>(),
    ) {
        let opts = MetricOptions {
            zero_class: if zero { ZeroClass::Zero } else { ZeroClass::Skip },
            include_unlabeled: unlabeled,
        };
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &truth).unwrap();
        let (macc, miou) = set_oracle(&pred, &truth, 4, &opts);
        prop_assert_eq!(cm.macc(&opts), macc);
        prop_assert_eq!(cm.miou(&opts), miou);
    }

    #[test]
    fn merge_equals_joint_accumulation(
        (a, b) in (1usize..30).prop_flat_map(|n| (labels(3, n), labels(3, n))),
        (c, d) in (1usize..30).prop_flat_map(|n| (labels(3, n), labels(3, n))),
    ) {
        let mut joint = ConfusionMatrix::new(3);
        joint.accumulate(&[a.clone(), c.clone()].concat(), &[b.clone(), d.clone()].concat()).unwrap();
        let mut x = ConfusionMatrix::new(3);
        x.accumulate(&a, &b).unwrap();
        let mut y = ConfusionMatrix::new(3);
        y.accumulate(&c, &d).unwrap();
        x.merge(&y).unwrap();
        prop_assert_eq!(x, joint);
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let t = [0, 1, 2, 2, 1];
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&t, &t).unwrap();
    let o = MetricOptions::default();
    assert_eq!(cm.macc(&o), 1.0);
    assert_eq!(cm.miou(&o), 1.0);
}

#[test]
fn rejects_out_of_range_and_mismatched_inputs() {
    let mut cm = ConfusionMatrix::new(2);
    assert!(cm.accumulate(&[0, 2], &[0, 1]).is_err());
    assert!(cm.accumulate(&[0], &[0, 1]).is_err());
    assert!(cm.merge(&ConfusionMatrix::new(3)).is_err());
    assert_eq!(cm.total(), 0);
}
