use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use moleclue::clue::{rank_worst, MoleculeEvaluation};
use moleclue::diffcore::{finite_difference_check, DiffError, Tape, Tensor};
use moleclue::encoder::{kl_divergence, sample_latent, LatentPosterior, Sampling};
use moleclue::harness::normalize_min_max;
use moleclue::model::LabelStats;
use moleclue::molgraph::{contaminate, distance_dx, make_synthetic_dataset, rmsd};

fn evaluation(id: String, v: f64) -> MoleculeEvaluation {
    MoleculeEvaluation {
        id,
        l_y: v,
        l_e: -v,
        l_a: v,
        l_r: v,
    }
}

/// Selection by repeated scanning for the current maximum.
fn naive_worst(rows: &[(String, f64)], fraction: f64) -> Vec<String> {
    let take = (fraction * rows.len() as f64).ceil() as usize;
    let mut left: Vec<(String, f64)> = rows.to_vec();
    let mut out = Vec::new();
    while out.len() < take {
        let mut best = 0;
        for k in 1..left.len() {
            let (a, b) = (&left[k], &left[best]);
            if a.1 > b.1 || (a.1 == b.1 && a.0 < b.0) {
                best = k;
            }
        }
        out.push(left.remove(best).0);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ranking_agrees_with_a_naive_scan(
        values in prop::collection::vec(0u8..6, 1..40),
        fraction in 0.01f64..=1.0,
    ) {
        let rows: Vec<(String, f64)> = values
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("m{:02}", (i * 7) % 41), *v as f64))
            .collect();
        let evals: Vec<_> = rows.iter().map(|(id, v)| evaluation(id.clone(), *v)).collect();
        prop_assert_eq!(rank_worst(&evals, "L_y", fraction).unwrap(), naive_worst(&rows, fraction));
        let negated: Vec<_> = rows.iter().map(|(id, v)| (id.clone(), -v)).collect();
        prop_assert_eq!(rank_worst(&evals, "L_e", fraction).unwrap(), naive_worst(&negated, fraction));
    }

    #[test]
    fn min_max_lies_in_the_unit_interval(values in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let n = normalize_min_max(&values);
        prop_assert_eq!(n.len(), values.len());
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            prop_assert!(n.contains(&0.0) && n.contains(&1.0));
        } else {
            prop_assert!(n.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn label_standardization_round_trips(labels in prop::collection::vec(-50f64..50.0, 2..20), y in -100f64..100.0) {
        let s = LabelStats::fit(&labels);
        prop_assert!((s.destandardize(s.standardize(y)) - y).abs() <= 1e-9 * (1.0 + y.abs()));
    }

    #[test]
    fn translation_distance_is_the_squared_shift(seed in 0u64..500, t in prop::array::uniform3(-5f64..5.0)) {
        let ex = &make_synthetic_dataset(1, seed)[0];
        let moved = ex.conformer.translated(t);
        let expected = t.iter().map(|v| v * v).sum::<f64>();
        prop_assert!((distance_dx(&moved, &ex.conformer).unwrap() - expected).abs() < 1e-9);
        prop_assert_eq!(rmsd(&ex.conformer, &ex.conformer).unwrap(), 0.0);
    }

    #[test]
    fn composite_tape_gradients_match_finite_differences(
        data in prop::collection::vec(-2f64..2.0, 12),
        w in prop::collection::vec(-1f64..1.0, 12),
    ) {
        let x = Tensor::new(vec![3, 4], data).unwrap();
        let w = Tensor::new(vec![4, 3], w).unwrap();
        let report = finite_difference_check(
            |tape: &mut Tape, x| {
                let wv = tape.constant(w.clone());
                let h = tape.matmul(x, wv)?;
                let h = tape.ssp(h);
                let h = tape.layer_norm(h)?;
                let h = tape.square(h);
                let m = tape.mean_rows(h)?;
                let e = tape.exp(x);
                let s = tape.sum(e);
                let s = tape.log(s);
                let m = tape.sum(m);
                Ok::<_, DiffError>(tape.add(m, s)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        let worst = report
            .analytic
            .data()
            .iter()
            .zip(report.numeric.data())
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max);
        prop_assert!(worst < 1e-5, "{worst}");
    }
}

#[test]
fn kl_matches_a_monte_carlo_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let (s, v) = (4, 3);
    let post = LatentPosterior {
        mu0: (0..s).map(|_| 0.8 * normal()).collect(),
        logvar0: (0..s).map(|_| 0.5 * normal()).collect(),
        mu1: (0..3 * v).map(|_| 0.8 * normal()).collect(),
        logvar1: (0..v).map(|_| 0.5 * normal()).collect(),
    };
    let mean = post.mean();
    let logvar: Vec<f64> = post
        .logvar0
        .iter()
        .copied()
        .chain((0..3 * v).map(|i| post.logvar1[i / 3]))
        .collect();
    // log q(z) - log p(z), with the 2 pi terms cancelled
    let log_ratio = |z: &[f64]| -> f64 {
        z.iter()
            .zip(mean.values())
            .zip(&logvar)
            .map(|((z, m), lv)| -0.5 * (lv + (z - m).powi(2) / lv.exp()) + 0.5 * z * z)
            .sum()
    };
    let n = 40_000;
    let draws: Vec<f64> = (0..n)
        .map(|k| log_ratio(sample_latent(&post, Sampling::Seeded(k)).values()))
        .collect();
    let est = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - est).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let exact = kl_divergence(&post);
    assert!((est - exact).abs() < 4.0 * se, "exact {exact}, estimate {est} +- {se}");
}

#[test]
fn contamination_has_the_requested_scale() {
    let ex = &make_synthetic_dataset(1, 8)[0];
    assert_eq!(contaminate(&ex.conformer, 0.0, 3).unwrap(), ex.conformer);
    assert!(contaminate(&ex.conformer, -0.1, 3).is_err());
    for tau in [0.01, 0.1, 1.0] {
        // E[distance_dx] = 3 tau^2 for isotropic noise of scale tau
        let n = 4000;
        let d: Vec<f64> = (0..n)
            .map(|s| distance_dx(&contaminate(&ex.conformer, tau, s).unwrap(), &ex.conformer).unwrap())
            .collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let expected = 3.0 * tau * tau;
        assert!((mean - expected).abs() < 4.0 * sd / (n as f64).sqrt(), "tau {tau}: {mean} vs {expected}");
    }
}
