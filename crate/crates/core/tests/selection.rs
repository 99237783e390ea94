mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;

use iava_core::selection::{
    attention_stats, delta_attention, select_irrelevant, AttentionVector, SelectionError, SelectionParams,
};

fn att(v: Vec<f64>) -> AttentionVector {
    AttentionVector::new(v).unwrap()
}

#[test]
fn stats_trivial_cases() {
    let s = attention_stats(&att(vec![0.25; 4]));
    assert_eq!((s.mu, s.sigma), (0.25, 0.0));
    let s = attention_stats(&att(vec![0.0, 0.5]));
    assert_eq!((s.mu, s.sigma), (0.25, 0.25));
}

#[test]
fn stats_match_naive_oracle_seed_42() {
    let mut r = rng(42);
    let v: Vec<f64> = (0..64).map(|_| r.random::<f64>()).collect();
    let s = attention_stats(&att(v.clone()));
    assert!((s.mu - naive_mean(&v)).abs() < 1e-12);
    assert!((s.sigma - naive_sigma(&v)).abs() < 1e-12);
}

#[test]
fn invalid_vectors_rejected() {
    assert!(matches!(AttentionVector::new(vec![]), Err(SelectionError::EmptyVector)));
    assert!(matches!(
        AttentionVector::new(vec![0.1, f64::NAN]),
        Err(SelectionError::NonFiniteScore { index: 1, .. })
    ));
    assert!(AttentionVector::new(vec![0.1, f64::INFINITY]).is_err());
    assert!(AttentionVector::new(vec![-0.1]).is_err());
}

#[test]
fn delta_examples() {
    let d = delta_attention(&att(vec![0.1, 0.9]), &att(vec![0.1, 0.9])).unwrap();
    assert_eq!(d.deltas(), &[0.0, 0.0]);
    let d = delta_attention(&att(vec![0.5, 0.5]), &att(vec![0.9, 0.1])).unwrap();
    assert_eq!(d.deltas(), &[0.9 - 0.5, 0.1 - 0.5]);
    assert!(matches!(
        delta_attention(&att(vec![0.5]), &att(vec![0.5, 0.5])),
        Err(SelectionError::LengthMismatch { .. })
    ));
}

#[test]
fn delta_matches_loop_oracle() {
    let mut r = rng(42);
    for _ in 0..200 {
        let n = r.random_range(1..=600);
        let a1 = attention_like(&mut r, n);
        let a2 = attention_like(&mut r, n);
        let d = delta_attention(&att(a1.clone()), &att(a2.clone())).unwrap();
        assert_eq!(d.deltas(), naive_delta(&a1, &a2).as_slice());
    }
}

#[test]
fn worked_four_token_example() {
    let a1 = vec![0.4, 0.3, 0.2, 0.1];
    let a2 = vec![0.1, 0.3, 0.3, 0.3];
    assert_eq!(brute_force_selection(&a1, &a2, 2, 0.0), vec![0]);
    let s = select_irrelevant(&att(a1), &att(a2), SelectionParams::new(2, 0.0)).unwrap();
    assert_eq!(s.indices(), &[0]);
    assert_eq!(s.total_tokens(), 4);
}

#[test]
fn identical_inputs_select_nothing() {
    let mut r = rng(7);
    for n in [1, 2, 32, 576] {
        let a = attention_like(&mut r, n);
        for rank in [0, n / 2, n - 1] {
            for lambda in [-1.0, 0.0, 1.0] {
                let s =
                    select_irrelevant(&att(a.clone()), &att(a.clone()), SelectionParams::new(rank, lambda)).unwrap();
                assert!(s.is_empty());
            }
        }
    }
}

#[test]
fn uniform_att1_with_negative_lambda_is_empty() {
    let a1 = vec![1.0 / 8.0; 8];
    let a2 = vec![0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25];
    let s = select_irrelevant(&att(a1), &att(a2), SelectionParams::new(7, -0.5)).unwrap();
    assert!(s.is_empty());
}

#[test]
fn rank_bounds() {
    let a = att(vec![0.5, 0.5]);
    assert!(select_irrelevant(&a, &a, SelectionParams::new(1, 0.0)).is_ok());
    assert!(matches!(
        select_irrelevant(&a, &a, SelectionParams::new(2, 0.0)),
        Err(SelectionError::RankOutOfRange { rank: 2, .. })
    ));
}

#[test]
fn default_params_by_token_count() {
    assert_eq!(
        SelectionParams::for_token_count(576),
        Some(SelectionParams::new(292, 0.0))
    );
    assert_eq!(
        SelectionParams::for_token_count(32),
        Some(SelectionParams::new(16, -0.1))
    );
    assert_eq!(SelectionParams::for_token_count(100), None);
}

#[test]
fn dense_instance_matches_oracle_seed_42() {
    let mut r = rng(42);
    let a1 = attention_like(&mut r, 576);
    let a2 = perturbed(&mut r, &a1);
    let s = select_irrelevant(&att(a1.clone()), &att(a2.clone()), SelectionParams::DENSE_576).unwrap();
    assert_eq!(s.indices(), brute_force_selection(&a1, &a2, 292, 0.0).as_slice());
    assert!(!s.is_empty());
}

#[test]
fn selection_matches_oracle_on_random_instances() {
    let mut r = rng(1234);
    for _ in 0..1000 {
        let n = r.random_range(1..=256);
        let a1 = attention_like(&mut r, n);
        let a2 = perturbed(&mut r, &a1);
        let rank = r.random_range(0..n);
        let lambda = r.random_range(-2.0..2.0);
        let s = select_irrelevant(&att(a1.clone()), &att(a2.clone()), SelectionParams::new(rank, lambda)).unwrap();
        assert_eq!(s.indices(), brute_force_selection(&a1, &a2, rank, lambda).as_slice());
    }
}

fn vectors() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(0.0f64..1.0, n),
        )
    })
}

proptest! {
    #[test]
    fn selected_tokens_satisfy_conditions((a1, a2) in vectors(), rank_frac in 0.0f64..1.0, lambda in -2.0f64..2.0) {
        let rank = ((a1.len() as f64) * rank_frac) as usize;
        let s = select_irrelevant(&att(a1.clone()), &att(a2.clone()), SelectionParams::new(rank, lambda)).unwrap();
        let stats = attention_stats(&att(a1.clone()));
        let negatives = a1.iter().zip(&a2).filter(|(x, y)| *y - *x < 0.0).count();
        prop_assert!(s.len() <= negatives);
        for &j in s.indices() {
            prop_assert!(a2[j] - a1[j] < 0.0);
            prop_assert!(a1[j] > stats.mu + lambda * stats.sigma);
        }
        prop_assert!(s.indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn monotone_in_rank((a1, a2) in vectors(), lambda in -2.0f64..2.0) {
        let n = a1.len();
        let sel = |rank| select_irrelevant(&att(a1.clone()), &att(a2.clone()), SelectionParams::new(rank, lambda)).unwrap();
        for rank in 1..n {
            prop_assert!(sel(rank - 1).is_subset_of(&sel(rank)));
        }
    }

    #[test]
    fn monotone_in_lambda((a1, a2) in vectors(), rank_frac in 0.0f64..1.0, l1 in -2.0f64..2.0, l2 in -2.0f64..2.0) {
        let rank = ((a1.len() as f64) * rank_frac) as usize;
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let sel = |lambda| select_irrelevant(&att(a1.clone()), &att(a2.clone()), SelectionParams::new(rank, lambda)).unwrap();
        prop_assert!(sel(hi).is_subset_of(&sel(lo)));
    }

    #[test]
    fn permutation_equivariance((a1, a2) in vectors(), rank_frac in 0.0f64..1.0, lambda in -1.0f64..1.0, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = a1.len();
        let rank = ((n as f64) * rank_frac) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed));
        let p1: Vec<f64> = perm.iter().map(|&k| a1[k]).collect();
        let p2: Vec<f64> = perm.iter().map(|&k| a2[k]).collect();
        let params = SelectionParams::new(rank, lambda);
        let original = select_irrelevant(&att(a1.clone()), &att(a2.clone()), params).unwrap();
        let permuted = select_irrelevant(&att(p1), &att(p2), params).unwrap();
        let mut mapped: Vec<usize> = permuted.indices().iter().map(|&j| perm[j]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped.as_slice(), original.indices());
    }

    #[test]
    fn stats_scale_covariant(v in prop::collection::vec(0.0f64..1.0, 1..128), c in 0.01f64..100.0) {
        let s = attention_stats(&att(v.clone()));
        let scaled = attention_stats(&att(v.iter().map(|x| x * c).collect()));
        prop_assert!((scaled.mu - c * s.mu).abs() <= 1e-12 * c.max(1.0));
        prop_assert!((scaled.sigma - c * s.sigma).abs() <= 1e-12 * c.max(1.0));
    }

    #[test]
    fn stats_invariants(v in prop::collection::vec(0.0f64..1e3, 1..256)) {
        let s = attention_stats(&att(v.clone()));
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.sigma >= 0.0);
        prop_assert!(lo <= s.mu && s.mu <= hi);
    }
}
