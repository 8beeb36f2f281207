use consert::numerics::{Tape, Tensor};
use consert::objectives::{joint_objective, nt_xent, PairClassifierParams};
use proptest::prelude::*;

/// Direct summation over anchors with no stabilization or normalization tricks.
fn nt_xent_oracle(reps: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n2 = reps.len();
    let mut total = 0.0;
    for i in 0..n2 {
        let j = i ^ 1;
        let denom: f64 = (0..n2).filter(|&k| k != i).map(|k| (cos(&reps[i], &reps[k]) / tau).exp()).sum();
        total -= ((cos(&reps[i], &reps[j]) / tau).exp() / denom).ln();
    }
    total / n2 as f64
}

fn loss_f64(reps: &[Vec<f64>], tau: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(Tensor::from_rows(reps).unwrap());
    let l = nt_xent(&mut tape, r, tau).unwrap();
    tape.value(l).item().unwrap()
}

fn loss_f32(reps: &[Vec<f64>], tau: f32) -> f64 {
    let rows: Vec<Vec<f32>> = reps.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
    let mut tape = Tape::<f32>::new();
    let r = tape.constant(Tensor::from_rows(&rows).unwrap());
    let l = nt_xent(&mut tape, r, tau).unwrap();
    tape.value(l).item().unwrap() as f64
}

#[test]
fn closed_forms() {
    let one_pair = vec![vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.4]];
    for tau in [0.05, 0.1, 1.0] {
        assert!(loss_f64(&one_pair, tau).abs() < 1e-9);
        assert!(loss_f32(&one_pair, tau as f32).abs() < 1e-9);
        let same = vec![vec![0.6, -0.2, 1.1]; 4];
        assert!((loss_f32(&same, tau as f32) - 3f64.ln()).abs() < 1e-6);
    }
}

#[test]
fn matches_direct_summation_at_tau_0_1() {
    let reps = vec![vec![0.2, 0.9, -0.3], vec![0.1, 1.0, -0.1], vec![-0.7, 0.2, 0.4], vec![-0.5, -0.1, 0.6]];
    let oracle = nt_xent_oracle(&reps, 0.1);
    assert!((loss_f64(&reps, 0.1) - oracle).abs() < 1e-12);
    assert!((loss_f32(&reps, 0.1) - oracle).abs() < 1e-5, "{} vs {oracle}", loss_f32(&reps, 0.1));
}

#[test]
fn classifier_matches_direct_summation() {
    let head = PairClassifierParams::init(2, 5);
    let r1: [[f64; 2]; 4] = [[0.4, -0.2], [1.0, 0.0], [0.3, 0.3], [-0.5, 0.9]];
    let r2: [[f64; 2]; 4] = [[0.1, 0.7], [0.0, 1.0], [0.3, 0.3], [0.2, -0.6]];
    let labels = [0usize, 1, 2, 1];

    let w = head.weight.cast::<f64>();
    let mut oracle = 0.0;
    for ((a, b), &y) in r1.iter().zip(&r2).zip(&labels) {
        let f = [a[0], a[1], b[0], b[1], (a[0] - b[0]).abs(), (a[1] - b[1]).abs()];
        let logits: Vec<f64> = (0..3).map(|c| (0..6).map(|k| f[k] * w.data()[k * 3 + c]).sum::<f64>()).collect();
        let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        oracle += lse - logits[y];
    }
    oracle /= 4.0;

    let mut tape = Tape::<f64>::new();
    let bound = head.bind(&mut tape, false);
    let v1 = tape.constant(Tensor::from_rows(&r1.map(|r| r.to_vec())).unwrap());
    let v2 = tape.constant(Tensor::from_rows(&r2.map(|r| r.to_vec())).unwrap());
    let l = bound.loss(&mut tape, v1, v2, &labels).unwrap();
    assert!((tape.value(l).item().unwrap() - oracle).abs() < 1e-12);
    assert!(bound.loss(&mut tape, v1, v2, &[0, 1, 3, 0]).is_err());
}

#[test]
fn joint_weighting() {
    let mut tape = Tape::<f64>::new();
    let ce = tape.constant(Tensor::scalar(1.0));
    let con = tape.constant(Tensor::scalar(2.0));
    let j = joint_objective(&mut tape, ce, con, 0.15).unwrap();
    assert!((tape.value(j).item().unwrap() - 1.30).abs() < 1e-12);
    let j = joint_objective(&mut tape, ce, con, 0.0).unwrap();
    assert_eq!(tape.value(j).item().unwrap(), 1.0);
}

fn batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=5, 2usize..=6).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 2 * n)
            .prop_filter("nonzero rows", |rows| rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-2))
    })
}

/// Rows of a Cholesky factor of `g`, or None if `g` is not positive definite.
fn cholesky(g: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = g.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = g[i][i] - s;
                if v <= 1e-9 {
                    return None;
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = (g[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn non_negative_and_scale_invariant(reps in batch(), scales in prop::collection::vec(0.05f64..20.0, 10), tau in 0.05f64..2.0) {
        let base = loss_f64(&reps, tau);
        prop_assert!(base >= 0.0);
        let scaled: Vec<Vec<f64>> = reps.iter().zip(scales.iter().cycle()).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
        prop_assert!((loss_f64(&scaled, tau) - base).abs() < 1e-5);
        prop_assert!((base - nt_xent_oracle(&reps, tau)).abs() < 1e-9);
    }

    #[test]
    fn relabeling_samples_keeps_the_loss(reps in batch(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = reps.len() / 2;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut consert::rng::substream(seed, "perm", &[]));
        let permuted: Vec<Vec<f64>> = order.iter().flat_map(|&k| [reps[2 * k].clone(), reps[2 * k + 1].clone()]).collect();
        prop_assert!((loss_f64(&permuted, 0.1) - loss_f64(&reps, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn raising_a_negative_similarity_never_lowers_the_loss(
        n in 2usize..=4,
        raw in prop::collection::vec(-1.0f64..1.0, 8 * 12),
        pick in any::<(usize, usize)>(),
        delta in 0.001f64..0.05,
    ) {
        // Build a Gram matrix, nudge one negative entry, and realize both as vectors.
        let m = 2 * n;
        let d = m + 3;
        let a: Vec<Vec<f64>> = (0..m).map(|i| raw[i * d..(i + 1) * d].to_vec()).collect();
        let mut g = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                g[i][j] = a[i].iter().zip(&a[j]).map(|(x, y)| x * y).sum();
            }
        }
        let norms: Vec<f64> = (0..m).map(|i| g[i][i].sqrt()).collect();
        for i in 0..m {
            for j in 0..m {
                g[i][j] /= norms[i] * norms[j];
            }
        }
        let i = pick.0 % m;
        let mut k = pick.1 % m;
        if k == i || k == (i ^ 1) {
            k = (i + 2) % m;
        }
        let mut g2 = g.clone();
        g2[i][k] += delta;
        g2[k][i] += delta;
        let (Some(before), Some(after)) = (cholesky(&g), cholesky(&g2)) else {
            return Ok(());
        };
        prop_assert!(loss_f64(&after, 0.1) >= loss_f64(&before, 0.1) - 1e-12);
    }
}
