use consert::eval::{fractional_ranks, spearman, EvalError};
use consert::rng::substream;
use proptest::prelude::*;
use rand::Rng;

/// Rank by counting: `#less + (#equal + 1) / 2`, then textbook Pearson.
fn oracle(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

#[test]
fn worked_example_with_a_tie() {
    let (p, g) = ([1.0, 2.0, 2.0, 4.0], [1.0, 3.0, 2.0, 4.0]);
    assert!((spearman(&p, &g).unwrap() - oracle(&p, &g)).abs() < 1e-12);
    assert!((spearman(&p, &g).unwrap() - 0.9486832980505138).abs() < 1e-12);
}

#[test]
fn agrees_with_brute_force_on_1000_tied_instances() {
    let mut rng = substream(7, "spearman-oracle", &[]);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..40);
        let levels = rng.random_range(2..6);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 1.25).collect();
        match spearman(&x, &y) {
            Ok(rho) => {
                let want = oracle(&x, &y);
                assert!((rho - want).abs() < 1e-12, "x={x:?} y={y:?}: {rho} vs {want}");
                checked += 1;
            }
            Err(EvalError::Undefined(_)) => {
                assert!(x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]));
            }
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn constant_input_is_undefined() {
    assert!(matches!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(EvalError::Undefined(_))));
    assert!(matches!(spearman(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]), Err(EvalError::Undefined(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn strictly_increasing_transforms_change_nothing(
        pairs in prop::collection::vec((-3i32..3, -50.0f64..50.0), 2..30),
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
        let base = spearman(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let ty: Vec<f64> = y.iter().map(|v| (v / 10.0).exp()).collect();
        prop_assert_eq!(spearman(&tx, &y).unwrap(), base);
        prop_assert_eq!(spearman(&x, &ty).unwrap(), base);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn ranks_sum_to_the_triangular_number(v in prop::collection::vec(-5i32..5, 1..50)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let n = v.len() as f64;
        prop_assert_eq!(fractional_ranks(&v).unwrap().iter().sum::<f64>(), n * (n + 1.0) / 2.0);
    }
}
