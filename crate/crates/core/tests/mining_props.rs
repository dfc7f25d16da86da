use std::cmp::Ordering;

use atnl::dataset::build_digit_neighbor_graph;
use atnl::geometry::{angular_distance, normalize_to_sphere, UnitVector};
use atnl::losses::{mine_triplets, MiningStrategy, Triplet};
use proptest::prelude::*;

/// Same digit, or adjacent on the 0..9 cycle.
fn is_positive(a: usize, b: usize) -> bool {
    let d = (a + 10 - b) % 10;
    d == 0 || d == 1 || d == 9
}

fn batch() -> impl Strategy<Value = (Vec<UnitVector>, Vec<usize>)> {
    (1usize..=64).prop_flat_map(|n| {
        let point = prop::collection::vec(-1.0f64..1.0, 8)
            .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
            .prop_map(|v| normalize_to_sphere(&v).unwrap());
        (prop::collection::vec(point, n), prop::collection::vec(0usize..10, n))
    })
}

/// Lowest index among the minimizers of `key`.
fn argmin(items: impl Iterator<Item = usize>, key: impl Fn(usize) -> f64) -> Option<usize> {
    items.min_by(|&x, &y| key(x).partial_cmp(&key(y)).unwrap_or(Ordering::Equal).then(x.cmp(&y)))
}

/// Lowest index among the maximizers of `key`.
fn argmax(items: impl Iterator<Item = usize>, key: impl Fn(usize) -> f64) -> Option<usize> {
    argmin(items, |i| -key(i))
}

fn brute_batch_hard(z: &[UnitVector], y: &[usize]) -> Vec<Triplet> {
    let n = z.len();
    (0..n)
        .filter_map(|a| {
            let d = |j: usize| angular_distance(&z[a], &z[j]);
            let p = argmax((0..n).filter(|&j| j != a && is_positive(y[a], y[j])), d)?;
            let neg = argmin((0..n).filter(|&j| !is_positive(y[a], y[j])), d)?;
            Some(Triplet { anchor: a, positive: p, negative: neg })
        })
        .collect()
}

fn brute_semi_hard(z: &[UnitVector], y: &[usize]) -> Vec<Triplet> {
    let n = z.len();
    let mut out = Vec::new();
    for a in 0..n {
        let d = |j: usize| angular_distance(&z[a], &z[j]);
        let negs: Vec<usize> = (0..n).filter(|&j| !is_positive(y[a], y[j])).collect();
        if negs.is_empty() {
            continue;
        }
        for p in (0..n).filter(|&j| j != a && is_positive(y[a], y[j])) {
            let neg = argmin(negs.iter().copied().filter(|&j| d(j) > d(p)), d)
                .or_else(|| argmax(negs.iter().copied(), d))
                .unwrap();
            out.push(Triplet { anchor: a, positive: p, negative: neg });
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn batch_hard_matches_brute_force((z, y) in batch()) {
        let got = mine_triplets(&z, &y, &build_digit_neighbor_graph(), MiningStrategy::BatchHard).unwrap();
        prop_assert_eq!(got.triplets().to_vec(), brute_batch_hard(&z, &y));
    }

    #[test]
    fn semi_hard_matches_brute_force((z, y) in batch()) {
        let got = mine_triplets(&z, &y, &build_digit_neighbor_graph(), MiningStrategy::SemiHard).unwrap();
        prop_assert_eq!(got.triplets().to_vec(), brute_semi_hard(&z, &y));
    }

    #[test]
    fn all_valid_count_matches_counting_oracle((z, y) in batch()) {
        let got = mine_triplets(&z, &y, &build_digit_neighbor_graph(), MiningStrategy::AllValid).unwrap();
        let n = y.len();
        let expected: usize = (0..n)
            .map(|a| {
                let pos = (0..n).filter(|&j| j != a && is_positive(y[a], y[j])).count();
                let neg = (0..n).filter(|&j| !is_positive(y[a], y[j])).count();
                pos * neg
            })
            .sum();
        prop_assert_eq!(got.count(), expected);
        for t in got.iter() {
            prop_assert!(t.anchor != t.positive);
            prop_assert!(is_positive(y[t.anchor], y[t.positive]));
            prop_assert!(!is_positive(y[t.anchor], y[t.negative]));
        }
    }
}
