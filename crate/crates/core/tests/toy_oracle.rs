mod common;

use common::{toy_reference, toy_reference_via_transform};
use promptfl::objective::ToyModel;
use promptfl::rng::RngKey;

#[test]
fn transform_agrees_with_direct_quadrature() {
    let toy = ToyModel::default();
    for s in [0, 1, 4] {
        let a = toy_reference(&toy, s, 1);
        let b = toy_reference_via_transform(&toy, s);
        assert!((a - b).abs() < 1e-6, "S={s}: {a} vs {b}");
    }
}

#[test]
fn references_tighten_in_s_and_j() {
    let toy = ToyModel::default();
    for j in [1, 5] {
        let r: Vec<f64> = [0, 1, 4].iter().map(|&s| toy_reference(&toy, s, j)).collect();
        assert!(r[0] <= r[1] && r[1] <= r[2], "J={j}: {r:?}");
    }
    for s in [0, 1, 4] {
        assert!(toy_reference(&toy, s, 1) <= toy_reference(&toy, s, 5));
    }
}

#[test]
fn references_at_full_keep_probability_ignore_s() {
    let toy = ToyModel {
        keep_prob: 1.0,
        ..ToyModel::default()
    };
    let base = toy_reference(&toy, 0, 5);
    for s in [1, 4] {
        assert!((toy_reference(&toy, s, 5) - base).abs() < 1e-9);
    }
}

#[test]
fn monte_carlo_matches_reference() {
    let toy = ToyModel::default();
    for (s, j) in [(0, 1), (4, 5)] {
        let (mean, se) = toy.monte_carlo(s, j, 20_000, RngKey::new(77)).unwrap();
        let r = toy_reference(&toy, s, j);
        assert!((mean - r).abs() < 3.0 * se, "S={s} J={j}: {mean} ± {se} vs {r}");
    }
}
