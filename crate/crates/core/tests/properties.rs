// SPDX-License-Identifier: MIT OR Apache-2.0

//! Property tests over randomly generated populations, windows and models.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use somnus::diary::{
    build_window, cyclic_pair, encode_record, BehaviourWindow, FeatureSchema, StandardizationStats,
    UserHistory, Variable,
};
use somnus::evalx::{derangement, effectiveness_curve, ScoredUser};
use somnus::linear::LinearQualityModel;
use somnus::linear::{aic, backward_stepwise};
use somnus::qnet::{NetworkConfig, QualityNet};
use somnus::recommend::{
    count_ignored, recommend_best_day, recommend_gradient_linear, recommend_gradient_nn,
    AdvisableSet, AdvisableVariant, GradientAscentConfig,
};
use somnus::synthgen::{
    generate_population, oracle_best_action, Assignment, GeneratorConfig, MINUTE_GRID,
};

fn population(seed: u64, n_users: usize) -> Vec<UserHistory> {
    generate_population(&GeneratorConfig {
        n_users,
        seed,
        ..Default::default()
    })
    .unwrap()
    .0
}

/// A small trained network shared by the recommendation properties.
fn trained() -> &'static (QualityNet, Vec<UserHistory>) {
    static NET: OnceLock<(QualityNet, Vec<UserHistory>)> = OnceLock::new();
    NET.get_or_init(|| {
        let pop = population(21, 300);
        let config = NetworkConfig {
            lstm_sizes: vec![8, 4],
            epochs: 2,
            seed: 21,
            ..Default::default()
        };
        let (net, _) = QualityNet::train(&config, &pop).unwrap();
        (net, pop)
    })
}

fn linear_model() -> &'static LinearQualityModel {
    static MODEL: OnceLock<LinearQualityModel> = OnceLock::new();
    MODEL.get_or_init(|| LinearQualityModel::fit(&trained().1, &FeatureSchema::default()).unwrap())
}

fn with_action(history: &UserHistory, action: &Assignment) -> UserHistory {
    let mut h = history.clone();
    let last = h.records.last_mut().unwrap();
    for (v, x) in action {
        last.set(*v, Some(*x));
    }
    h
}

fn variant_strategy() -> impl Strategy<Value = AdvisableVariant> {
    prop_oneof![
        Just(AdvisableVariant::Base),
        Just(AdvisableVariant::PlusExercise),
        Just(AdvisableVariant::PlusPills),
        Just(AdvisableVariant::NoNoise),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn windows_are_padded_to_ten_steps(seed in 0u64..10_000, n_users in 1usize..12) {
        let pop = population(seed, n_users);
        let schema = FeatureSchema::default();
        let stats = StandardizationStats::fit(&pop, &schema).unwrap();
        for h in &pop {
            for (pos, r) in h.records.iter().enumerate() {
                let w = build_window(h, r.date, &stats, &schema).unwrap();
                prop_assert_eq!(w.x.len(), BehaviourWindow::STEPS * schema.len());
                prop_assert_eq!(w.miss.len(), w.x.len());
                let padded = BehaviourWindow::STEPS.saturating_sub(pos + 1);
                for step in 0..padded {
                    prop_assert!(w.step_miss(step).iter().all(|&m| m));
                    prop_assert!(w.step_x(step).iter().all(|&x| x == 0.0));
                }
                for (x, m) in w.x.iter().zip(&w.miss) {
                    prop_assert!(x.is_finite());
                    if *m {
                        prop_assert_eq!(*x, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn anchor_quality_never_leaks(seed in 0u64..10_000, q in -2i8..=2) {
        let pop = population(seed, 6);
        let schema = FeatureSchema::default();
        let stats = StandardizationStats::fit(&pop, &schema).unwrap();
        for h in &pop {
            let mut other = h.clone();
            other.records.last_mut().unwrap().quality = Some(q);
            let a = build_window(h, h.last().date, &stats, &schema).unwrap();
            let b = build_window(&other, h.last().date, &stats, &schema).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.miss_at(BehaviourWindow::LAST, schema.quality_index()));
        }
    }

    #[test]
    fn standardized_features_have_zero_mean_unit_spread(seed in 0u64..10_000) {
        let pop = population(seed, 20);
        let schema = FeatureSchema::default();
        let stats = StandardizationStats::fit(&pop, &schema).unwrap();
        let mut columns = vec![Vec::new(); schema.len()];
        for h in &pop {
            for r in &h.records {
                let (v, m) = encode_record(r, &schema, true);
                for f in 0..schema.len() {
                    if !m[f] {
                        columns[f].push(stats.standardize(f, v[f]));
                    }
                }
            }
        }
        for (f, z) in columns.iter().enumerate() {
            if z.is_empty() || stats.zero_variance[f] {
                continue;
            }
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9, "feature {f} mean {mean}");
            prop_assert!((var - 1.0).abs() < 1e-9, "feature {f} var {var}");
        }
    }

    #[test]
    fn cyclic_encoding_is_continuous_at_the_wrap(period in 1.0f64..400.0, eps in 1e-9f64..1e-3) {
        let (s0, c0) = cyclic_pair(0.0, period);
        let (s1, c1) = cyclic_pair(period - eps, period);
        let (s2, c2) = cyclic_pair(period, period);
        let bound = 2.0 * std::f64::consts::PI * eps / period + 1e-12;
        prop_assert!((s0 - s1).abs() <= bound && (c0 - c1).abs() <= bound);
        prop_assert!((s0 - s2).abs() < 1e-9 && (c0 - c2).abs() < 1e-9);
        prop_assert!((s1 * s1 + c1 * c1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_and_labels_replay(seed in 0u64..10_000) {
        let config = GeneratorConfig { n_users: 8, seed, ..Default::default() };
        let (a, oracle) = generate_population(&config).unwrap();
        let (b, _) = generate_population(&config).unwrap();
        prop_assert_eq!(&a, &b);
        for h in &a {
            let noise = oracle.label_noise(&h.user_id, h.records.len()).unwrap();
            for (i, r) in h.records.iter().enumerate() {
                if let Some(q) = r.quality {
                    let clean = oracle.quality_at(h, i, None);
                    prop_assert_eq!(q, somnus::synthgen::discretize(clean + noise[i]));
                }
            }
        }
    }

    #[test]
    fn oracle_best_action_dominates(seed in 0u64..10_000, picks in prop::collection::vec(0usize..1000, 8)) {
        let (pop, oracle) = generate_population(&GeneratorConfig { n_users: 3, seed, ..Default::default() }).unwrap();
        let advisable = AdvisableSet::BASE;
        for h in &pop {
            let (_, best) = oracle_best_action(&oracle, h, &advisable);
            let random: Assignment = advisable
                .iter()
                .zip(&picks)
                .map(|(v, p)| (*v, if v.is_binary() { (p % 2) as f64 } else { MINUTE_GRID[p % MINUTE_GRID.len()] }))
                .collect();
            prop_assert!(best >= oracle.quality(h, Some(&random)));
        }
    }

    #[test]
    fn network_outputs_are_bounded_and_intervals_nest(seed in 0u64..10_000, scale in 0.0f64..200.0) {
        let schema = FeatureSchema::default();
        let config = NetworkConfig { lstm_sizes: vec![6, 4], seed, ..Default::default() };
        let net = QualityNet::new(config, StandardizationStats::identity(&schema)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = schema.len();
        let window = BehaviourWindow {
            n_features: n,
            x: (0..BehaviourWindow::STEPS * n).map(|_| rng.random_range(-scale..=scale)).collect(),
            miss: (0..BehaviourWindow::STEPS * n).map(|_| rng.random_bool(0.3)).collect(),
            anchor_date: chrono::NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(),
        };
        let p = net.predict_one(&window).unwrap();
        prop_assert!(p.quality.is_finite() && (-2.0..=2.0).contains(&p.quality));
        let hw = &p.interval.half_widths;
        prop_assert!(hw.iter().all(|w| w.is_finite() && *w >= 0.0));
        prop_assert!(hw.windows(2).all(|w| w[0] <= w[1]), "{hw:?}");
    }

    #[test]
    fn stepwise_trace_decreases_and_ends_at_minimum(seed in 0u64..10_000, n in 30usize..120, width in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| 0.8 * r[0] + rng.random_range(-1.0..1.0)).collect();
        let (model, trace) = backward_stepwise(&x, &y, None).unwrap();
        prop_assert!(trace.windows(2).all(|s| s[1].aic < s[0].aic));
        let last = trace.last().unwrap();
        prop_assert_eq!(last.aic, model.aic);
        prop_assert!(trace.iter().all(|s| s.aic >= model.aic));
        prop_assert!((model.aic - aic(n, model.rss, model.k())).abs() < 1e-9);
        for (j, (&c, (&b, &beta))) in model.columns.iter().zip(model.b.iter().zip(&model.beta)).enumerate() {
            let col: Vec<f64> = x.iter().map(|r| r[c]).collect();
            let sd_x = pop_sd(&col);
            let sd_y = pop_sd(&y);
            prop_assert!((beta - b * sd_x / sd_y).abs() < 1e-9, "column {j}");
        }
    }

    #[test]
    fn derangements_have_no_fixed_points(n in 2usize..300, seed in any::<u64>()) {
        let p = derangement(n, seed);
        let distinct: BTreeSet<usize> = p.iter().copied().collect();
        prop_assert_eq!(distinct.len(), n);
        prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j && j < n));
    }

    #[test]
    fn buckets_partition_users(ignored in prop::collection::vec(0usize..9, 1..200), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users: Vec<ScoredUser> = ignored
            .iter()
            .enumerate()
            .map(|(i, &k)| ScoredUser { user_id: format!("u{i}"), ignored: k, quality: rng.random_range(-2.0..2.0) })
            .collect();
        let curve = effectiveness_curve(users).unwrap();
        prop_assert_eq!(curve.buckets.iter().map(|b| b.n).sum::<usize>(), ignored.len());
        prop_assert!(curve.buckets.windows(2).all(|b| b[0].ignored < b[1].ignored));
        prop_assert!(curve.buckets.iter().all(|b| b.n > 0));
    }
}

fn pop_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn nn_advice_only_touches_advisable_last_day(start in 0usize..280, variant in variant_strategy()) {
        let (net, pop) = trained();
        let advisable = AdvisableSet::for_variant(variant);
        let users: Vec<&UserHistory> = pop[start..start + 20].iter().collect();
        let recs = recommend_gradient_nn(net, &users, &advisable, &GradientAscentConfig::default()).unwrap();
        let schema = &net.schema;
        let features = schema.features();
        for (rec, h) in recs.iter().zip(&users) {
            let keys: BTreeSet<Variable> = rec.values.keys().copied().collect();
            prop_assert!(keys.iter().all(|v| advisable.contains(*v)));
            for (v, x) in &rec.values {
                if let Some(x) = x {
                    prop_assert!(v.accepts(*x), "{v:?} = {x}");
                }
            }
            if let (Some(s), Some(r)) = (rec.trace.start_quality, rec.trace.relaxed_quality) {
                prop_assert!(r >= s - 1e-12);
            }
            let before = net.window(h);
            let after = net.window(&with_action(h, &rec.action()));
            for step in 0..BehaviourWindow::LAST {
                prop_assert_eq!(before.step_x(step), after.step_x(step));
                prop_assert_eq!(before.step_miss(step), after.step_miss(step));
            }
            for (f, feat) in features.iter().enumerate() {
                let frozen = feat.variable.is_none_or(|v| !advisable.contains(v));
                if frozen {
                    prop_assert_eq!(before.x_at(BehaviourWindow::LAST, f), after.x_at(BehaviourWindow::LAST, f));
                    prop_assert_eq!(before.miss_at(BehaviourWindow::LAST, f), after.miss_at(BehaviourWindow::LAST, f));
                }
            }
        }
    }

    #[test]
    fn every_recommender_respects_the_advisable_set(start in 0usize..290, variant in variant_strategy()) {
        let (_, pop) = trained();
        let advisable = AdvisableSet::for_variant(variant);
        for h in &pop[start..start + 10] {
            let mut recs = vec![recommend_gradient_linear(linear_model(), h, &advisable, 4.0).unwrap()];
            if let Ok(r) = recommend_best_day(h, &advisable) {
                recs.push(r);
            }
            for rec in recs {
                prop_assert!(rec.values.keys().all(|v| advisable.contains(*v)));
                if variant == AdvisableVariant::NoNoise {
                    prop_assert!(!rec.values.contains_key(&Variable::Noise));
                }
                prop_assert!(count_ignored(&rec, h.last(), &advisable) <= advisable.variables.len());
            }
        }
    }
}
