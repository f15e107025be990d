//! Oracle and equivalence tests for spillover-signal construction.

mod oracles;

use chrono::NaiveDate;
use cvl_core::metrics::{pairwise_euclidean, similarity_matrix, SimilarityMatrix};
use cvl_core::panel::{generate_synthetic, weekday_sequence, SyntheticConfig};
use cvl_core::signal::{
    build_signal_series, combined_window_returns, linkage_weights, normalize_signal,
    spillover_signal, window_return, Horizon, SignalConfig, SignalSeries,
};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

fn random_similarity(j: usize, rng: &mut impl Rng) -> SimilarityMatrix {
    let slice = DMatrix::from_fn(j, 4, |_, _| rng.random_range(-1.5..1.5));
    let d = pairwise_euclidean(&slice).unwrap();
    similarity_matrix(
        NaiveDate::from_ymd_opt(2021, 2, 1).unwrap(),
        (0..j).map(|i| format!("F{i:04}")).collect(),
        &d,
        1.0,
    )
    .unwrap()
}

#[test]
fn spillover_matches_double_loop_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(51);
    for _ in 0..20 {
        let j = 6;
        let sim = random_similarity(j, &mut rng);
        let weights = linkage_weights(&sim).unwrap();
        let wr: Vec<Option<f64>> = (0..j).map(|_| Some(rng.random_range(-0.2..0.2))).collect();
        let f = spillover_signal(&weights, &wr);
        for a in 0..j {
            let mut acc = 0.0;
            for b in 0..j {
                acc += weights[(a, b)] * wr[b].unwrap();
            }
            assert!((f[a] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn linkage_rows_match_row_sum_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(52);
    let sim = random_similarity(7, &mut rng);
    let weights = linkage_weights(&sim).unwrap();
    for a in 0..7 {
        let row_sum: f64 = (0..7).map(|b| sim.values()[(a, b)]).sum();
        for b in 0..7 {
            assert!((weights[(a, b)] - sim.values()[(a, b)] / row_sum).abs() < 1e-14);
        }
        let total: f64 = (0..7).map(|b| weights[(a, b)]).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn window_return_matches_compounding_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(53);
    let t = 80;
    let returns = DMatrix::from_fn(t, 3, |_, _| rng.random_range(-0.05..0.05));
    for l in [5usize, 21, 63] {
        for probe in [l, l + 7, t - 1] {
            let got = window_return(&returns, 1, probe, l).unwrap();
            let window: Vec<f64> = ((probe - l)..probe).map(|s| returns[(s, 1)]).collect();
            assert!((got - oracles::oracle_compound(&window)).abs() < 1e-12);
        }
    }
}

/// Build a panel and similarity set small enough to verify by hand.
fn toy_setup(seed: u64) -> (cvl_core::panel::CharacteristicPanel, Vec<Vec<SimilarityMatrix>>, Vec<usize>) {
    let config = SyntheticConfig {
        firms: 12,
        dates: 320,
        characteristics: 4,
        clusters: 3,
        seed,
        ..SyntheticConfig::default()
    };
    let panel = generate_synthetic(&config).unwrap();
    let date_indices: Vec<usize> = (260..310).collect();
    let sims: Vec<SimilarityMatrix> = date_indices
        .iter()
        .map(|&t| {
            let firms = panel.available_firms(t);
            let slice = panel.characteristics_slice(t, &firms);
            let d = pairwise_euclidean(&slice).unwrap();
            let names = firms.iter().map(|&j| panel.firms()[j].clone()).collect();
            similarity_matrix(panel.dates()[t], names, &d, 1.0).unwrap()
        })
        .collect();
    (panel, vec![sims], date_indices)
}

#[test]
fn combined_equals_average_of_per_horizon_signals() {
    let (panel, sims, dates) = toy_setup(61);
    let config = SignalConfig {
        horizons: vec![21, 63, 126, 252],
        include_combined: true,
    };
    let series = build_signal_series(&panel, &dates, &sims, &config).unwrap();
    assert_eq!(series.len(), 5);
    let combined = &series[4];
    assert_eq!(combined.horizon, Horizon::Combined);
    for pos in 0..dates.len() {
        for j in 0..panel.n_firms() {
            let mean: f64 = (0..4).map(|h| series[h].values[pos][j]).sum::<f64>() / 4.0;
            let got = combined.values[pos][j];
            if got.is_finite() && mean.is_finite() {
                assert!(
                    (got - mean).abs() < 1e-12,
                    "combined vs averaged signals at pos {pos}, firm {j}: {got} vs {mean}"
                );
            } else {
                assert_eq!(got.is_nan(), mean.is_nan());
            }
        }
    }
}

#[test]
fn raw_signals_scale_with_window_returns() {
    // scaling every window return by k scales the raw signal by k exactly
    let mut rng = ChaCha20Rng::seed_from_u64(62);
    for _ in 0..20 {
        let j = 7;
        let sim = random_similarity(j, &mut rng);
        let weights = linkage_weights(&sim).unwrap();
        let wr: Vec<Option<f64>> = (0..j).map(|_| Some(rng.random_range(-0.3..0.3))).collect();
        let k = rng.random_range(0.1..5.0);
        let wr_scaled: Vec<Option<f64>> = wr.iter().map(|r| r.map(|x| k * x)).collect();
        let base = spillover_signal(&weights, &wr);
        let scaled = spillover_signal(&weights, &wr_scaled);
        for (a, b) in base.iter().zip(&scaled) {
            assert!((b - k * a).abs() < 1e-12 * k.max(1.0));
        }
    }
}

#[test]
fn exact_scale_equivariance_on_linear_windows() {
    // With a one-day horizon the window return is the daily return itself,
    // so scaling is exactly linear and normalization exactly absorbs it.
    let mut rng = ChaCha20Rng::seed_from_u64(63);
    let j = 8;
    let t = 40;
    let returns = DMatrix::from_fn(t, j, |_, _| rng.random_range(-0.04..0.04));
    let chars: Vec<DMatrix<f64>> = (0..t)
        .map(|_| DMatrix::from_fn(j, 2, |r, c| (r * 2 + c) as f64 * 0.1))
        .collect();
    let make = |rets: DMatrix<f64>| {
        cvl_core::panel::CharacteristicPanel::new(
            weekday_sequence(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), t),
            (0..j).map(|i| format!("F{i:04}")).collect(),
            vec!["c0".into(), "c1".into()],
            vec![],
            chars.clone(),
            (0..t).map(|_| DMatrix::zeros(j, 0)).collect(),
            (0..t).map(|_| (0..j).map(|i| (i % 2) as i32).collect()).collect(),
            rets,
        )
        .unwrap()
    };
    let panel = make(returns.clone());
    let panel2 = make(returns * 3.0);
    let dates: Vec<usize> = (5..35).collect();
    let sims: Vec<SimilarityMatrix> = dates
        .iter()
        .map(|&tt| {
            let firms = panel.available_firms(tt);
            let slice = panel.characteristics_slice(tt, &firms);
            let d = pairwise_euclidean(&slice).unwrap();
            let names = firms.iter().map(|&x| panel.firms()[x].clone()).collect();
            similarity_matrix(panel.dates()[tt], names, &d, 1.0).unwrap()
        })
        .collect();
    let config = SignalConfig {
        horizons: vec![1],
        include_combined: false,
    };
    let a = build_signal_series(&panel, &dates, &[sims.clone()], &config).unwrap();
    let b = build_signal_series(&panel2, &dates, &[sims], &config).unwrap();
    for pos in 0..dates.len() {
        for firm in 0..j {
            let x = a[0].values[pos][firm];
            let y = b[0].values[pos][firm];
            assert!((y - 3.0 * x).abs() < 1e-12, "raw not linear: {y} vs 3*{x}");
        }
    }
    let na = normalize_signal(&a[0], &panel).unwrap();
    let nb = normalize_signal(&b[0], &panel2).unwrap();
    for pos in 0..dates.len() {
        for firm in 0..j {
            assert!((na.values[pos][firm] - nb.values[pos][firm]).abs() < 1e-9);
        }
    }
}

#[test]
fn permutation_equivariance() {
    let mut rng = ChaCha20Rng::seed_from_u64(64);
    let j = 6;
    let sim = random_similarity(j, &mut rng);
    let weights = linkage_weights(&sim).unwrap();
    let wr: Vec<Option<f64>> = (0..j).map(|_| Some(rng.random_range(-0.1..0.1))).collect();
    let f = spillover_signal(&weights, &wr);

    let mut perm: Vec<usize> = (0..j).collect();
    perm.shuffle(&mut rng);
    let perm_values = DMatrix::from_fn(j, j, |a, b| sim.values()[(perm[a], perm[b])]);
    let perm_sim = SimilarityMatrix::new(
        sim.date,
        perm.iter().map(|&i| sim.firms[i].clone()).collect(),
        perm_values,
    )
    .unwrap();
    let perm_weights = linkage_weights(&perm_sim).unwrap();
    let perm_wr: Vec<Option<f64>> = perm.iter().map(|&i| wr[i]).collect();
    let perm_f = spillover_signal(&perm_weights, &perm_wr);
    for a in 0..j {
        assert!((perm_f[a] - f[perm[a]]).abs() < 1e-12);
    }
}

#[test]
fn ensemble_averages_raw_signals_before_normalization() {
    let (panel, sims_a, dates) = toy_setup(65);
    let (_, sims_b, _) = toy_setup(66); // different similarity structure
    // two "seeds" with different similarities over the same panel dates
    let two_seeds = vec![sims_a[0].clone(), sims_b[0].clone()];
    let config = SignalConfig {
        horizons: vec![21],
        include_combined: false,
    };
    let ensemble = build_signal_series(&panel, &dates, &two_seeds, &config).unwrap();
    let solo_a = build_signal_series(&panel, &dates, &sims_a, &config).unwrap();
    let solo_b = build_signal_series(&panel, &dates, &[sims_b[0].clone()], &config).unwrap();
    // the ensemble's raw values are the mean of the per-seed raw values
    for pos in 0..dates.len() {
        for firm in 0..panel.n_firms() {
            let e = ensemble[0].values[pos][firm];
            let a = solo_a[0].values[pos][firm];
            let b = solo_b[0].values[pos][firm];
            if e.is_finite() {
                assert!((e - 0.5 * (a + b)).abs() < 1e-12);
            }
        }
    }
    // and normalization happens after averaging, not before: the mean of the
    // two normalized solo signals differs from the normalized ensemble
    let norm_ensemble = normalize_signal(&ensemble[0], &panel).unwrap();
    let na = normalize_signal(&solo_a[0], &panel).unwrap();
    let nb = normalize_signal(&solo_b[0], &panel).unwrap();
    let mut diverges = false;
    for pos in 0..dates.len() {
        for firm in 0..panel.n_firms() {
            let lhs = norm_ensemble.values[pos][firm];
            let rhs = 0.5 * (na.values[pos][firm] + nb.values[pos][firm]);
            if lhs.is_finite() && rhs.is_finite() && (lhs - rhs).abs() > 1e-6 {
                diverges = true;
            }
        }
    }
    assert!(diverges, "normalize-then-average coincided with average-then-normalize");
}

#[test]
fn constant_window_returns_propagate() {
    let mut rng = ChaCha20Rng::seed_from_u64(67);
    let sim = random_similarity(9, &mut rng);
    let weights = linkage_weights(&sim).unwrap();
    let wr = vec![Some(0.042); 9];
    for v in spillover_signal(&weights, &wr) {
        assert!((v - 0.042).abs() < 1e-12);
    }
}

#[test]
fn combined_window_linearity() {
    let mut rng = ChaCha20Rng::seed_from_u64(68);
    let j = 5;
    let per: Vec<Vec<Option<f64>>> = (0..4)
        .map(|_| (0..j).map(|_| Some(rng.random_range(-0.1..0.1))).collect())
        .collect();
    let comb = combined_window_returns(&per);
    for i in 0..j {
        let mean: f64 = per.iter().map(|h| h[i].unwrap()).sum::<f64>() / 4.0;
        assert!((comb[i].unwrap() - mean).abs() < 1e-14);
    }
}

#[test]
fn normalized_series_has_unit_cross_sections() {
    let (panel, sims, dates) = toy_setup(69);
    let config = SignalConfig::default();
    let series = build_signal_series(&panel, &dates, &sims, &config).unwrap();
    for s in &series {
        let n = normalize_signal(s, &panel).unwrap();
        assert!(n.normalized);
        for pos in 0..n.values.len() {
            let finite: Vec<f64> = n.values[pos].iter().copied().filter(|x| x.is_finite()).collect();
            if finite.len() < 2 {
                continue;
            }
            let (mean, sd) = oracles::oracle_mean_std(&finite);
            assert!(mean.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn decay_estimate_matches_direct_pairwise_correlation() {
    let (panel, sims, dates) = toy_setup(70);
    let config = SignalConfig {
        horizons: vec![21],
        include_combined: false,
    };
    let series = build_signal_series(&panel, &dates, &sims, &config).unwrap();
    let s = normalize_signal(&series[0], &panel).unwrap();
    let d = cvl_core::signal::signal_decay(&s, cvl_core::signal::CorrelationKind::Pearson).unwrap();
    // independent recomputation from raw vectors
    let mut corrs = Vec::new();
    for pos in 1..s.values.len() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (a, b) in s.values[pos - 1].iter().zip(&s.values[pos]) {
            if a.is_finite() && b.is_finite() {
                xs.push(*a);
                ys.push(*b);
            }
        }
        let (mx, sx) = oracles::oracle_mean_std(&xs);
        let (my, sy) = oracles::oracle_mean_std(&ys);
        let cov: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.len() as f64;
        corrs.push(cov / (sx * sy));
    }
    let expected = corrs.iter().sum::<f64>() / corrs.len() as f64;
    assert!((d - expected).abs() < 1e-10, "decay {d} vs oracle {expected}");
    assert!(d > 0.0 && d < 1.0);
}
