use proptest::prelude::*;

use tomesd::matching::{build_merge_plan_masked, RatioPolicy};
use tomesd::merging::{apply_merge, apply_prune, apply_unmerge};
use tomesd::Matrix;

/// Mean of `members` rows accumulated in ascending index order.
fn running_mean(x: &Matrix, members: &[usize]) -> Vec<f32> {
    let mut mean = x.row(members[0]).to_vec();
    for (k, &i) in members.iter().enumerate().skip(1) {
        let f = 1.0 / (k as f32 + 1.0);
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += (v - *m) * f;
        }
    }
    mean
}

fn grid() -> impl Strategy<Value = (Matrix, Vec<bool>, f64)> {
    (2usize..48, 1usize..6).prop_flat_map(|(n, c)| {
        (
            proptest::collection::vec(-8.0f32..8.0, n * c).prop_map(move |d| Matrix::from_vec(n, c, d).unwrap()),
            proptest::collection::vec(any::<bool>(), n),
            0.0f64..1.0,
        )
    })
}

fn usable(mask: &[bool]) -> bool {
    mask.iter().any(|&d| d) && mask.iter().any(|&d| !d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn unmerge_restores_singletons_and_spreads_group_means((x, mask, ratio) in grid()) {
        prop_assume!(usable(&mask));
        let src = mask.iter().filter(|&&d| !d).count();
        let ratio = ratio * src as f64 / mask.len() as f64;
        let plan = build_merge_plan_masked(&x, &mask, RatioPolicy::new(ratio).unwrap()).unwrap();
        let merged = apply_merge(&x, &plan).unwrap();
        prop_assert_eq!(merged.values.rows(), x.rows() - plan.removed());
        let back = apply_unmerge(&merged);
        for group in merged.groups.groups() {
            let want = if group.len() == 1 { x.row(group[0]).to_vec() } else { running_mean(&x, group) };
            for &i in group {
                prop_assert_eq!(back.row(i), &want[..]);
            }
        }
    }

    #[test]
    fn equal_members_round_trip_exactly((x, mask, ratio) in grid()) {
        prop_assume!(usable(&mask));
        let src = mask.iter().filter(|&&d| !d).count();
        let ratio = ratio * src as f64 / mask.len() as f64;
        let plan = build_merge_plan_masked(&x, &mask, RatioPolicy::new(ratio).unwrap()).unwrap();
        let mut rows: Vec<Vec<f32>> = x.iter_rows().map(<[f32]>::to_vec).collect();
        for e in plan.edges() {
            rows[e.src] = rows[e.dst].clone();
        }
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let equalized = Matrix::from_rows(&refs).unwrap();
        prop_assert_eq!(apply_unmerge(&apply_merge(&equalized, &plan).unwrap()), equalized);
    }

    #[test]
    fn prune_zeroes_only_the_removed_tokens((x, mask, ratio) in grid()) {
        prop_assume!(usable(&mask));
        let src = mask.iter().filter(|&&d| !d).count();
        let ratio = ratio * src as f64 / mask.len() as f64;
        let plan = build_merge_plan_masked(&x, &mask, RatioPolicy::new(ratio).unwrap()).unwrap();
        let pruned = apply_prune(&x, &plan).unwrap();
        let removed: Vec<usize> = plan.edges().iter().map(|e| e.src).collect();
        for i in 0..x.rows() {
            if removed.contains(&i) {
                prop_assert!(pruned.row(i).iter().all(|&v| v == 0.0));
            } else {
                prop_assert_eq!(pruned.row(i), x.row(i));
            }
        }
    }
}
