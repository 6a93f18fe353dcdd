use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedalt::diagnostics::{
    fit_contraction, record_displacements, theory_mode_run, theory_mode_run_with_data, ConvergenceTrace, TheoryModeConfig, Verdict,
};
use fedalt::Matrix;

fn small() -> TheoryModeConfig {
    TheoryModeConfig {
        rounds: 8,
        train: 40,
        eval: 10,
        ..Default::default()
    }
}

#[test]
fn zero_step_size_never_moves() {
    let config = TheoryModeConfig {
        learning_rate: Some(0.0),
        ..small()
    };
    let r = theory_mode_run(&config).unwrap();
    assert!(r.trace.deltas().iter().all(|&d| d == 0.0), "{:?}", r.trace.deltas());
    assert!(!r.verdict.passed());
}

#[test]
fn identical_clients_move_in_lockstep() {
    let config = small();
    let one = config.data().unwrap().remove(0);
    let data = (0..config.clients)
        .map(|k| {
            let mut d = one.clone();
            d.client = k;
            d
        })
        .collect();
    let r = theory_mode_run_with_data(&config, data).unwrap();
    for round in r.trace.rows.chunks(config.clients) {
        // clients shuffle independently, so sums differ only by rounding
        let d0 = round[0].displacement;
        assert!(round.iter().all(|row| (row.displacement - d0).abs() <= 1e-9 * d0.max(1e-12)), "{round:?}");
    }
    assert!(r.verdict.passed(), "{}", r.verdict);
}

#[test]
fn full_batch_steps_descend() {
    let r = theory_mode_run(&small()).unwrap();
    for (t, round) in r.step_losses.iter().enumerate() {
        for (k, losses) in round.iter().enumerate() {
            for w in losses.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "round {t} client {k}: {} -> {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn divergence_fails_with_round() {
    let config = TheoryModeConfig {
        learning_rate: Some(1e6),
        ..small()
    };
    let r = theory_mode_run(&config).unwrap();
    match &r.verdict {
        Verdict::Fail { round: Some(t), reasons } => {
            assert!(*t >= 1 && *t <= config.rounds);
            assert!(reasons[0].contains("diverged"), "{reasons:?}");
        }
        other => panic!("expected a divergence failure, got {other}"),
    }
}

#[test]
fn displacement_is_the_stacked_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let clients = rng.random_range(1..6);
        let shapes: Vec<(usize, usize)> = (0..rng.random_range(1..4)).map(|_| (rng.random_range(1..5), rng.random_range(1..5))).collect();
        let snap = |rng: &mut ChaCha8Rng| -> Vec<Vec<Matrix>> {
            (0..clients)
                .map(|_| shapes.iter().map(|&(r, c)| Matrix::random_normal(r, c, 1.0, rng)).collect())
                .collect()
        };
        let (a, b) = (snap(&mut rng), snap(&mut rng));
        let rows = record_displacements(&a, &b, 3).unwrap();
        let mut max = 0.0f64;
        for (k, row) in rows.iter().enumerate() {
            let flat = |s: &[Matrix]| s.iter().flat_map(|m| m.data().to_vec()).collect::<Vec<f64>>();
            let (x, y) = (flat(&a[k]), flat(&b[k]));
            let norm = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            assert!((row.displacement - norm).abs() <= 1e-12 * norm.max(1.0));
            assert_eq!(row.round, 3);
            max = max.max(norm);
        }
        assert!(rows.iter().all(|r| (r.delta_max - max).abs() <= 1e-12 * max.max(1.0)));
    }
}

#[test]
fn fit_matches_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut d = vec![3.0];
    for _ in 0..20 {
        let prev = *d.last().unwrap();
        d.push(0.02 + 0.6 * prev + rng.random_range(-1e-3..1e-3));
    }
    let fit = fit_contraction(&ConvergenceTrace::from_deltas(&d)).unwrap();
    // pairs (Δᵗ⁻¹, Δᵗ) for t ≥ 2
    let x: Vec<f64> = d[1..d.len() - 1].to_vec();
    let y: Vec<f64> = d[2..].to_vec();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let beta = sxy / sxx;
    let c = my - beta * mx;
    assert!((fit.beta - beta).abs() < 1e-9, "{} vs {beta}", fit.beta);
    assert!((fit.intercept - c).abs() < 1e-9);
    assert!((fit.beta - 0.6).abs() < 0.05);
    assert_eq!(fit.points, x.len());
}
