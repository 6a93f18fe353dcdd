use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedalt::codec::Container;
use fedalt::diagnostics::{check_model_gradients, zoo_model, ZooModel, GRADIENT_TOLERANCE};
use fedalt::experiment::{sign_test_p, ExperimentConfig};
use fedalt::federation::{compute_row, compute_row_via_global, AdapterPairs, FixedAlpha, LoraConfig, ModelBlueprint, ModelSpec};
use fedalt::lora::{count_params, fedalt_forward, mixer_weights, AdaptedLayer, LoraAdapter, Mixer};
use fedalt::synth::HeterogeneityLevel;
use fedalt::{Matrix, Strategy};

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn uploads(k: usize, d: usize, l: usize, r: usize, seed: u64) -> BTreeMap<usize, AdapterPairs> {
    (0..k)
        .map(|c| {
            let s = seed.wrapping_mul(31).wrapping_add(c as u64 * 2);
            let mut p = AdapterPairs::new();
            p.insert(0, (matrix(r, d, s), matrix(l, r, s + 1)));
            (c, p)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mixer_weights_are_a_distribution(
        g in prop::collection::vec(-3.0f64..3.0, 8),
        x in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let mixer = Mixer { g: Matrix::from_vec(2, 4, g.clone()).unwrap(), owner: 0 };
        let (a, b) = mixer_weights(&mixer, &x);
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!(a > 0.0 && a < 1.0);
        let z0: f64 = g[..4].iter().zip(&x).map(|(u, v)| u * v).sum();
        let z1: f64 = g[4..].iter().zip(&x).map(|(u, v)| u * v).sum();
        prop_assert!((a - 1.0 / (1.0 + (z1 - z0).exp())).abs() < 1e-12);
    }

    #[test]
    fn row_routes_agree(k in 2usize..=24, d in 1usize..8, l in 1usize..8, r in 1usize..4, seed in any::<u64>()) {
        let up = uploads(k, d, l, r, seed);
        for c in 0..k {
            let a = compute_row(&up, c).unwrap();
            let b = compute_row_via_global(&up, c).unwrap();
            prop_assert!(a[&0].0.max_abs_diff(&b[&0].0) < 1e-12);
            prop_assert!(a[&0].1.max_abs_diff(&b[&0].1) < 1e-12);
        }
    }

    #[test]
    fn row_is_mean_of_others(k in 2usize..=12, seed in any::<u64>()) {
        let up = uploads(k, 3, 2, 2, seed);
        for c in 0..k {
            let row = compute_row(&up, c).unwrap();
            let mut sum = Matrix::zeros(2, 3);
            for (_, p) in up.iter().filter(|(j, _)| **j != c) {
                sum.add_assign(&p[&0].0).unwrap();
            }
            prop_assert!(row[&0].0.max_abs_diff(&sum.scale(1.0 / (k - 1) as f64)) < 1e-12);
            let mut changed = up.clone();
            changed.get_mut(&c).unwrap().get_mut(&0).unwrap().0.scale_assign(-7.0);
            prop_assert!(compute_row(&changed, c).unwrap()[&0].0.bit_eq(&row[&0].0));
        }
    }

    #[test]
    fn two_clients_receive_each_other(seed in any::<u64>()) {
        let up = uploads(2, 4, 3, 2, seed);
        for (me, other) in [(0, 1), (1, 0)] {
            let row = compute_row(&up, me).unwrap();
            prop_assert!(row[&0].0.bit_eq(&up[&other][&0].0));
            prop_assert!(row[&0].1.bit_eq(&up[&other][&0].1));
        }
    }

    #[test]
    fn fedalt_forward_matches_composition(seed in any::<u64>(), n in 1usize..5) {
        let (d, l, r, s) = (5, 3, 2, 1.5);
        let base = matrix(l, d, seed);
        let ind = LoraAdapter { a: matrix(r, d, seed + 1), b: matrix(l, r, seed + 2), scale: s };
        let row = LoraAdapter { a: matrix(r, d, seed + 3), b: matrix(l, r, seed + 4), scale: s };
        let mixer = Mixer { g: matrix(2, d, seed + 5), owner: 0 };
        let layer = AdaptedLayer::fedalt(0, base.clone(), ind.clone(), row.clone(), mixer.clone()).unwrap();
        let x = matrix(n, d, seed + 6);
        let y = fedalt_forward(&layer, &x).unwrap();
        let apply = |m: &Matrix, v: &[f64]| -> Vec<f64> {
            (0..m.rows()).map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
        };
        for i in 0..n {
            let xi = x.row(i);
            let (alpha, beta) = mixer_weights(&mixer, xi);
            let w0 = apply(&base, xi);
            let li = apply(&ind.b, &apply(&ind.a, xi));
            let ri = apply(&row.b, &apply(&row.a, xi));
            for j in 0..l {
                let want = w0[j] + alpha * s * li[j] + beta * s * ri[j];
                prop_assert!((y[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_ratios(d in 8usize..64, l in 8usize..64, r in 1usize..8) {
        let bp = ModelBlueprint {
            spec: ModelSpec::Mlp { hidden: vec![] },
            lora: LoraConfig { rank: r, alpha: 1.0, dropout: 0.0 },
            input_dim: d,
            outputs: l,
            tokens_per_example: 1,
            classification: true,
            surrogate: None,
        };
        let count = |s: Strategy| count_params(&bp.build(s, 3, 0, 0).unwrap(), &s).trainable;
        prop_assert_eq!(count(Strategy::FedIt), r * (d + l));
        prop_assert_eq!(count(Strategy::Ffa), r * l);
        prop_assert_eq!(count(Strategy::FedAlt), r * (d + l) + 2 * d);
        prop_assert_eq!(count(Strategy::FixedWeight(FixedAlpha::Value(0.5))), count(Strategy::FedIt));
    }

    #[test]
    fn container_round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>(), scale in -300i32..300) {
        let mut m = matrix(rows, cols, seed);
        m.scale_assign(10f64.powi(scale));
        let mut c = Container::new("upload", 3, 7);
        c.push(2, "A_L", m.clone());
        c.meta.insert("strategy".into(), "fedalt".into());
        let back = Container::decode(&c.encode()).unwrap();
        prop_assert!(back.get(2, "A_L").unwrap().bit_eq(&m));
        prop_assert_eq!(back, c);
    }

    #[test]
    fn sign_test_is_a_probability(n in 1usize..30, w in 0usize..30) {
        let w = w.min(n);
        let p = sign_test_p(w, n);
        prop_assert!((0.0..=1.0).contains(&p));
        if w < n {
            prop_assert!(sign_test_p(w + 1, n) <= p);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn config_round_trip(
        clients in 3usize..16,
        rounds in 1usize..50,
        rank in 1usize..8,
        seeds in prop::collection::btree_set(0u64..1000, 0..4),
        het in prop::sample::select(vec![HeterogeneityLevel::High, HeterogeneityLevel::Mild, HeterogeneityLevel::Low]),
        fixed in 0.05f64..0.95,
    ) {
        let mut c = ExperimentConfig {
            clients,
            seeds: seeds.into_iter().collect(),
            het,
            strategies: vec![
                Strategy::FedAlt,
                Strategy::FixedWeight(FixedAlpha::Value(fixed)),
                Strategy::FixedWeight(FixedAlpha::InverseClients),
                Strategy::RowUpdate { rank },
            ],
            ..Default::default()
        };
        c.schedule.rounds = rounds;
        c.lora.rank = rank;
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn gradients_match_finite_differences(seed in 1000u64..u64::MAX / 2, which in 0usize..ZooModel::ALL.len()) {
        let (model, batch) = zoo_model(ZooModel::ALL[which], seed).unwrap();
        for (p, err) in check_model_gradients(&model, &batch).unwrap() {
            prop_assert!(err < GRADIENT_TOLERANCE, "{} seed {seed} {p}: {err:e}", ZooModel::ALL[which]);
        }
    }
}

#[test]
fn gradients_over_many_seeds() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (model, batch) = zoo_model(ZooModel::FedAltMlp, 5000 + seed).unwrap();
        for (_, err) in check_model_gradients(&model, &batch).unwrap() {
            worst = worst.max(err);
        }
    }
    assert!(worst < GRADIENT_TOLERANCE, "{worst:e}");
}
