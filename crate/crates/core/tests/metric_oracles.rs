//! Metrics against brute-force re-derivations on random cases.

use std::collections::HashSet;

use mcrec_core::metrics::{average_precision, f1, jaccard, jsd, prauc_products, threshold};
use mcrec_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn brute_jaccard(t: &[usize], p: &[usize]) -> f64 {
    let a: HashSet<_> = t.iter().collect();
    let b: HashSet<_> = p.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

fn brute_f1(t: &[usize], p: &[usize]) -> f64 {
    let a: HashSet<_> = t.iter().collect();
    let b: HashSet<_> = p.iter().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let hit = a.intersection(&b).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let (p, r) = (hit / b.len() as f64, hit / a.len() as f64);
    2.0 * p * r / (p + r)
}

/// Rank of `i` (1-based) counted directly: items with a higher score, or the
/// same score and a lower index, come first.
fn rank(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

fn brute_ap(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(scores, i);
            let above = pos.iter().filter(|&&j| rank(scores, j) <= r).count();
            above as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

fn brute_products(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let m = labels.iter().filter(|&&l| l).count();
    if m == 0 {
        return None;
    }
    Some(
        (1..=m)
            .map(|k| {
                let hits = (0..labels.len()).filter(|&i| labels[i] && rank(scores, i) <= k).count() as f64;
                (hits / k as f64) * (hits / m as f64)
            })
            .sum(),
    )
}

/// H(m) − (H(p) + H(q)) / 2 in bits.
fn brute_jsd(p: &[f64], q: &[f64]) -> f64 {
    let h = |d: &[f64]| -> f64 { -d.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>() };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    (h(&m) - (h(p) + h(q)) / 2.0) / std::f64::consts::LN_2
}

#[test]
fn two_hundred_random_cases_match_brute_force() {
    let mut r = rng::stream(2024, &["metric-cases"]);
    for case in 0..200 {
        let n = r.gen_range(1..=12);
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0..6) as f64) / 5.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        let truth: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
        let predicted = threshold(&scores, 0.3);
        assert_eq!(jaccard(&truth, &predicted), brute_jaccard(&truth, &predicted), "case {case}");
        assert!((f1(&truth, &predicted) - brute_f1(&truth, &predicted)).abs() < 1e-15, "case {case}");
        match (average_precision(&labels, &scores), brute_ap(&labels, &scores)) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9, "case {case}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "case {case}"),
        }
        match (prauc_products(&labels, &scores), brute_products(&labels, &scores)) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9, "case {case}"),
            (a, b) => assert_eq!(a, b, "case {case}"),
        }
    }
}

#[test]
fn jsd_closed_form() {
    // m = [¾, ¼]: KL(p‖m) = 2 − log2 3 and KL(q‖m) = 1 − ½·log2 3.
    let want = 1.5 - 0.75 * 3f64.log2();
    assert!((jsd(&[1.0, 0.0], &[0.5, 0.5]) - want).abs() < 1e-12);
    assert!((brute_jsd(&[1.0, 0.0], &[0.5, 0.5]) - want).abs() < 1e-12);
    assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("all zero", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
    })
}

fn case() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
    (1usize..=12).prop_flat_map(|n| {
        (
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(-3.0f64..3.0, n),
        )
    })
}

proptest! {
    #[test]
    fn f1_is_a_function_of_jaccard((labels, scores) in case(), t in 0.0f64..1.0) {
        let truth: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
        let probs: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let pred = threshold(&probs, t);
        let (j, f) = (jaccard(&truth, &pred), f1(&truth, &pred));
        prop_assert!(j <= f + 1e-15);
        prop_assert!((f - 2.0 * j / (1.0 + j)).abs() < 1e-12);
    }

    #[test]
    fn average_precision_ignores_monotone_rescaling((labels, scores) in case()) {
        let squashed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
        prop_assert_eq!(average_precision(&labels, &scores), average_precision(&labels, &squashed));
        if let Some(ap) = average_precision(&labels, &scores) {
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }

    #[test]
    fn jsd_is_a_bounded_symmetric_divergence(p in distribution(8), q in distribution(8)) {
        let d = jsd(&p, &q);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - jsd(&q, &p)).abs() < 1e-15);
        prop_assert!(jsd(&p, &p).abs() < 1e-12);
        prop_assert!((d - brute_jsd(&p, &q).clamp(0.0, 1.0)).abs() < 1e-12);
    }
}
