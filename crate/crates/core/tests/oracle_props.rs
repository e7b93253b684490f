mod oracles;

use std::collections::BTreeSet;

use nailtrace::objectives::{lmp_loss, lmp_select};
use nailtrace::postprocess::{label_components, Connectivity};
use nailtrace::tensor::{Tape, Tensor};
use oracles::{flood_fill, lmp_oracle, same_partition};
use proptest::prelude::*;

fn losses_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(0.0f64..5.0, 1..400),
        prop::collection::vec((0u8..4).prop_map(|v| v as f64 * 0.5), 1..400),
    ]
}

fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (1usize..40, 1usize..40).prop_flat_map(|(w, h)| {
        (Just(w), Just(h), prop::collection::vec(prop::bool::weighted(0.45), w * h))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lmp_matches_full_sort(losses in losses_strategy(), fi in 0usize..4) {
        let fraction = [0.01, 0.1, 0.5, 1.0][fi];
        let (kept, tau) = lmp_oracle(&losses, fraction);
        let sel = lmp_select(&losses, fraction).unwrap();
        prop_assert_eq!(sel.kept.iter().copied().collect::<BTreeSet<_>>(), kept.clone());
        prop_assert_eq!(sel.tau, tau);

        let mut tape = Tape::new();
        let n = losses.len();
        let x = tape.leaf(Tensor::new(vec![n], losses.clone()).unwrap(), true);
        let (v, _) = lmp_loss(&mut tape, x, fraction).unwrap();
        let mean = kept.iter().map(|&i| losses[i]).sum::<f64>() / kept.len() as f64;
        prop_assert_eq!(tape.value(v).item(), mean);

        // gradient is 1/k on kept pixels and 0 elsewhere
        let g = tape.backward(v).unwrap();
        let g = g.get(x).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let expect = if kept.contains(&i) { 1.0 / kept.len() as f64 } else { 0.0 };
            prop_assert_eq!(gi, expect);
        }
    }

    #[test]
    fn components_match_flood_fill((w, h, mask) in mask_strategy(), eight in any::<bool>()) {
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let (labels, count) = label_components(&mask, w, h, conn);
        let oracle = flood_fill(&mask, w, h, conn);
        prop_assert!(same_partition(&labels, &oracle));
        prop_assert_eq!(count as u32, oracle.iter().copied().max().unwrap_or(0));
        // same raster-order numbering, not only the same partition
        prop_assert_eq!(labels, oracle);
    }

    #[test]
    fn component_count_is_transpose_invariant((w, h, mask) in mask_strategy(), eight in any::<bool>()) {
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let t: Vec<bool> = (0..w * h).map(|i| mask[(i % h) * w + i / h]).collect();
        prop_assert_eq!(label_components(&mask, w, h, conn).1, label_components(&t, h, w, conn).1);
    }
}

#[test]
fn diagonal_pair_depends_on_connectivity() {
    let mask = [true, false, false, true];
    assert_eq!(label_components(&mask, 2, 2, Connectivity::Four).1, 2);
    assert_eq!(label_components(&mask, 2, 2, Connectivity::Eight).1, 1);
}

#[test]
fn all_equal_losses_keep_the_lowest_indices() {
    let losses = vec![1.0; 10];
    let sel = lmp_select(&losses, 0.3).unwrap();
    assert_eq!(sel.kept, vec![0, 1, 2]);
    assert_eq!(sel.tau, 1.0);
}
