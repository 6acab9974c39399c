use proptest::prelude::*;

use semcom::masker::{
    build_mask, expand_mask, extract_cls_attention, rank_patches, ClsAttentionGrid, SelectionMask,
};
use semcom::tensor::Tensor;
use semcom::vit::AttentionStack;

fn grid(scores: &[f64], rows: usize, cols: usize) -> ClsAttentionGrid {
    ClsAttentionGrid::new(Tensor::new(&[rows, cols], scores.to_vec()).unwrap()).unwrap()
}

#[test]
fn cls_row_is_head_averaged_without_self_score() {
    // Two heads, CLS + 4 patches.
    let n = 5;
    let mut data = vec![0.0; 2 * n * n];
    data[..n].copy_from_slice(&[0.6, 0.1, 0.1, 0.1, 0.1]);
    data[n * n..n * n + n].copy_from_slice(&[0.0, 0.4, 0.3, 0.2, 0.1]);
    let stack = AttentionStack::new(Tensor::new(&[2, n, n], data).unwrap()).unwrap();
    let g = extract_cls_attention(&stack, 2, 2).unwrap();
    let want = [0.25, 0.2, 0.15, 0.1];
    for (a, b) in g.flat().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(extract_cls_attention(&stack, 1, 3).is_err());
}

#[test]
fn ties_go_to_the_lower_index() {
    assert_eq!(rank_patches(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    let sel = build_mask(&grid(&[0.5, 0.9, 0.5, 0.9], 2, 2), 3, 1.0, 0).unwrap();
    assert_eq!(sel.threshold_indices, vec![1, 3, 0]);
    assert_eq!(sel.lambda, Some(0.5));
}

#[test]
fn zero_alpha_has_no_threshold() {
    let sel = build_mask(&grid(&[0.1, 0.2, 0.3, 0.4], 2, 2), 2, 0.0, 5).unwrap();
    assert!(sel.threshold_indices.is_empty());
    assert_eq!(sel.lambda, None);
    assert_eq!(sel.mask.n_selected(), 2);
}

#[test]
fn rejects_bad_arguments() {
    let g = grid(&[0.1, 0.2, 0.3, 0.4], 2, 2);
    assert!(build_mask(&g, 5, 1.0, 0).is_err());
    assert!(build_mask(&g, 2, 1.5, 0).is_err());
    assert!(ClsAttentionGrid::new(Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap()).is_err());
    assert!(SelectionMask::from_bitmap(2, 2, &[0b1_0000]).is_err());
    assert!(SelectionMask::from_bitmap(2, 2, &[0, 0]).is_err());
}

#[test]
fn expanded_mask_is_block_constant() {
    let m = SelectionMask::from_indices(2, 3, &[1, 3]).unwrap();
    let e = expand_mask(&m, 2);
    assert_eq!(e.shape(), [4, 6]);
    for y in 0..4 {
        for x in 0..6 {
            let want = m.at(y / 2, x / 2).unwrap() as u8 as f64;
            assert_eq!(e.at(&[y, x]), want);
        }
    }
}

#[test]
fn bitmap_layout_is_lsb_first() {
    let m = SelectionMask::from_indices(3, 3, &[0, 2, 8]).unwrap();
    assert_eq!(m.to_bitmap(), vec![0b0000_0101, 0b0000_0001]);
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![0.0..1.0f64, (0u8..4).prop_map(|q| q as f64 / 4.0)],
        16,
    )
}

proptest! {
    #[test]
    fn budget_is_exact_and_threshold_is_contained(
        scores in scores_strategy(),
        n in 0usize..=16,
        alpha in 0.0..=1.0f64,
        seed in any::<u64>(),
    ) {
        let sel = build_mask(&grid(&scores, 4, 4), n, alpha, seed).unwrap();
        prop_assert_eq!(sel.mask.n_selected(), n);
        prop_assert_eq!(sel.threshold_indices.len(), (alpha * n as f64).floor() as usize);
        for &i in &sel.threshold_indices {
            prop_assert!(sel.mask.flat()[i]);
        }
        if let Some(lambda) = sel.lambda {
            for &i in &sel.threshold_indices {
                prop_assert!(scores[i] >= lambda);
            }
            let outside_above = (0..16)
                .filter(|i| !sel.threshold_indices.contains(i))
                .any(|i| scores[i] > lambda);
            prop_assert!(!outside_above);
        }
    }

    #[test]
    fn positive_rescaling_keeps_the_mask(
        scores in scores_strategy(),
        c in 0.01..100.0f64,
        n in 0usize..=16,
        seed in any::<u64>(),
    ) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let a = build_mask(&grid(&scores, 4, 4), n, 0.85, seed).unwrap();
        let b = build_mask(&grid(&scaled, 4, 4), n, 0.85, seed).unwrap();
        prop_assert_eq!(a.mask, b.mask);
        prop_assert_eq!(a.threshold_indices, b.threshold_indices);
    }

    #[test]
    fn full_alpha_ignores_the_seed(scores in scores_strategy(), n in 0usize..=16, s1 in any::<u64>(), s2 in any::<u64>()) {
        let g = grid(&scores, 4, 4);
        prop_assert_eq!(build_mask(&g, n, 1.0, s1).unwrap().mask, build_mask(&g, n, 1.0, s2).unwrap().mask);
    }

    #[test]
    fn bitmap_roundtrip(rows in 1usize..9, cols in 1usize..9, bits in prop::collection::vec(any::<bool>(), 64)) {
        let flat = bits[..rows * cols].to_vec();
        let m = SelectionMask::from_flat(rows, cols, flat).unwrap();
        let bm = m.to_bitmap();
        prop_assert_eq!(bm.len(), (rows * cols).div_ceil(8));
        prop_assert_eq!(SelectionMask::from_bitmap(rows, cols, &bm).unwrap(), m);
    }
}
