use multiway_ocs::matching::OfflineState;
use multiway_ocs::ratios::{f_from_f, gamma_continuous, gamma_discrete, gamma_fahrbach, DiscreteF, DualCurves};
use multiway_ocs::win_distribution::{build_win_model, compute_f, enumerate_prefix, ExactDistribution, SeedParams};
use proptest::prelude::*;
use std::sync::OnceLock;

fn table_curves() -> &'static DualCurves {
    static CURVES: OnceLock<DualCurves> = OnceLock::new();
    CURVES.get_or_init(|| {
        let model = build_win_model(SeedParams::new(0.48, 6, 30).unwrap()).unwrap();
        DualCurves::new(&DiscreteF::from_table(&compute_f(&model, 10).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_distribution_is_sorted_and_conserves_mass(
        raw in prop::collection::vec((0u32..40, 1u32..1000), 1..60)
    ) {
        let total: f64 = raw.iter().map(|&(_, q)| q as f64).sum();
        let pairs: Vec<(f64, f64)> = raw.iter().map(|&(v, q)| (v as f64 / 40.0, q as f64 / total)).collect();
        let mean: f64 = pairs.iter().map(|(v, q)| v * q).sum();
        let dist = ExactDistribution::from_pairs(pairs).unwrap();
        prop_assert!(dist.values().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(dist.masses().iter().all(|&q| q > 0.0));
        prop_assert!((dist.total_mass() - 1.0).abs() < 1e-12);
        prop_assert!((dist.mean() - mean).abs() < 1e-12);
    }

    #[test]
    fn win_tables_are_monotone(p in 0.02f64..0.98, m in 2usize..9, y_max in 1usize..40) {
        let model = build_win_model(SeedParams::new(p, m, y_max).unwrap()).unwrap();
        prop_assert_eq!(model.g(-1), 0.0);
        prop_assert!(model.g_table().windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(model.w_table().windows(2).all(|w| w[0] <= w[1] + 1e-15));
        prop_assert!(model.w_table().iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn prefix_laws_have_unit_mass_and_fair_mean(p in 0.05f64..0.95, r in 1usize..4) {
        let model = build_win_model(SeedParams::new(p, 6, 30).unwrap()).unwrap();
        let dist = enumerate_prefix(&model, r).unwrap();
        prop_assert!((dist.total_mass() - 1.0).abs() < 1e-12);
        prop_assert!(dist.mean() <= r as f64 / 6.0 + 1e-12);
    }

    #[test]
    fn f_head_and_ratios_decrease(p in 0.05f64..0.95) {
        let model = build_win_model(SeedParams::new(p, 6, 30).unwrap()).unwrap();
        let table = compute_f(&model, 10).unwrap();
        prop_assert!((table.head[0] - 1.0).abs() < 1e-12);
        prop_assert!(table.head.windows(2).all(|w| w[1] < w[0]));
        let ratios: Vec<f64> = table.head.windows(2).map(|w| w[1] / w[0]).collect();
        prop_assert!(ratios.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn fahrbach_is_increasing_and_bounded(a in 0.001f64..0.999, d in 0.0005f64..0.5) {
        let b = (a + d).min(0.9999);
        prop_assume!(b > a);
        let (ga, gb) = (gamma_fahrbach(a).unwrap(), gamma_fahrbach(b).unwrap());
        prop_assert!(ga < gb);
        prop_assert!(gb <= 5.0 / 9.0);
    }

    #[test]
    fn discrete_and_continuous_gamma_agree(
        drops in prop::collection::vec(0.05f64..0.4, 1..5), c in 0.05f64..0.9, m in 2usize..8
    ) {
        let mut head = vec![1.0];
        for d in &drops {
            let last = *head.last().unwrap();
            head.push(last * (1.0 - d));
        }
        let f = DiscreteF::new(head, c, m).unwrap();
        let continuous = gamma_continuous(&|x: f64| f_from_f(&f, x)).unwrap();
        prop_assert!((gamma_discrete(&f) - continuous).abs() < 1e-6);
    }

    #[test]
    fn profiles_stay_normalized_and_alpha_grows(
        arrivals in prop::collection::vec((0u32..6, 0.0f64..0.6), 1..25)
    ) {
        let curves = table_curves();
        let gamma = curves.gamma();
        let mut state = OfflineState::default();
        let mut alpha = 0.0;
        for (w, p) in arrivals {
            state.apply_arrival(w as f64 * 0.5, p, 6.0, curves);
            for profile in &state.profiles {
                prop_assert!((profile.total_mass() - 1.0).abs() < 1e-10);
                let y = profile.y(curves);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&y));
                prop_assert!(profile.atoms.iter().all(|a| a.x >= 0.0 && (0.0..=1.0 + 1e-12).contains(&a.cbar)));
                let mut xs: Vec<f64> = profile.atoms.iter().map(|a| a.x).collect();
                xs.sort_by(f64::total_cmp);
                prop_assert!(xs.windows(2).all(|w| w[0] < w[1]));
            }
            let next = state.alpha(gamma, curves);
            prop_assert!(next >= alpha - 1e-12);
            alpha = next;
        }
    }
}
