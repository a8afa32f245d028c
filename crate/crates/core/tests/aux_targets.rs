mod common;

use cainet::aux_targets::{
    attention_target, binary_target, boundary_target, dilate, erode, gaussian_blur, gaussian_kernel, AuxConfig,
    AuxTargets, Grid, LabelMap, Mask,
};
use proptest::prelude::*;
use common::brute_morph;

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        prop::collection::vec(0u8..2, h * w).prop_map(move |d| Grid::new(h, w, d).unwrap())
    })
}

fn label_strategy() -> impl Strategy<Value = LabelMap> {
    (3usize..12, 3usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(0u32..4, h * w).prop_map(move |d| Grid::new(h, w, d).unwrap())
    })
}

proptest! {
    #[test]
    fn morphology_matches_brute_force(b in mask_strategy(), k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        prop_assert_eq!(dilate(&b, k).unwrap(), brute_morph(&b, k, true));
        prop_assert_eq!(erode(&b, k).unwrap(), brute_morph(&b, k, false));
    }

    #[test]
    fn aux_invariants(labels in label_strategy()) {
        let aux = AuxTargets::from_labels(&labels, &AuxConfig::default()).unwrap();
        for i in 0..labels.data.len() {
            prop_assert_eq!(aux.binary.data[i], (labels.data[i] != 0) as u8);
            // Boundary pixels are foreground.
            prop_assert!(aux.boundary.data[i] <= aux.binary.data[i]);
            let q = aux.attention_q.data[i];
            prop_assert!((0.0..=1.0).contains(&q));
        }
    }

    #[test]
    fn blur_preserves_constants(h in 1usize..9, w in 1usize..9, v in 0.0f64..1.0, sigma in 0.5f64..3.0) {
        let g = Grid::filled(h, w, v);
        let out = gaussian_blur(&g, sigma).unwrap();
        prop_assert!(out.data.iter().all(|&x| (x - v).abs() < 1e-12));
    }
}

#[test]
fn boundary_of_filled_square() {
    // 5×5 square inside a 7×7 frame: the inner boundary is the square's outer ring.
    let labels = Grid::new(7, 7, (0..49).map(|i| ((1..6).contains(&(i / 7)) && (1..6).contains(&(i % 7))) as u32).collect()).unwrap();
    let b = binary_target(&labels);
    let e = boundary_target(&b);
    let ring = e.data.iter().filter(|&&v| v == 1).count();
    assert_eq!(ring, 25 - 9);
    assert_eq!(e.get(3, 3), 0);
    assert_eq!(e.get(1, 1), 1);
}

#[test]
fn foreground_touching_the_border_erodes() {
    let all = Grid::filled(3, 3, 1u8);
    assert_eq!(erode(&all, 3).unwrap().data, vec![0, 0, 0, 0, 1, 0, 0, 0, 0]);
}

#[test]
fn gaussian_kernel_is_normalized_and_symmetric() {
    let k = gaussian_kernel(2.0).unwrap();
    assert_eq!(k.len(), 13);
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for i in 0..k.len() {
        assert_eq!(k[i], k[k.len() - 1 - i]);
    }
    assert!(gaussian_kernel(0.0).is_err());
}

#[test]
fn attention_target_is_blurred_dilation() {
    // A single foreground pixel dilates to a 5×5 block before blurring, so the
    // target peaks at the centre and reaches beyond the block.
    let mut b = Grid::filled(15, 15, 0u8);
    b.data[7 * 15 + 7] = 1;
    let q = attention_target(&b, &AuxConfig::default()).unwrap();
    let centre = q.get(7, 7);
    assert!(q.data.iter().all(|&v| v <= centre));
    assert!(q.get(7, 10) > 0.0);
    assert!(attention_target(&b, &AuxConfig { dilation: 4, sigma: 2.0 }).is_err());
}

#[test]
fn even_kernels_are_rejected() {
    let b = Grid::filled(3, 3, 1u8);
    assert!(dilate(&b, 2).is_err());
    assert!(erode(&b, 4).is_err());
}
