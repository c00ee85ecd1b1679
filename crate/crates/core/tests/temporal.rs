use carm_core::observation::JointId;
use carm_core::temporal::{ks_exact_p, ks_two_sample, DriftWindow, ReliabilityThresholds, WindowConfig};
use carm_core::triangulation::{ScoreVector, ScoredKeypoint3D};
use nalgebra::Vector3;
use proptest::prelude::*;

fn entry(t: u64, x: f64, rho: f64) -> ScoredKeypoint3D {
    ScoredKeypoint3D {
        joint: JointId::LHip,
        timestep: t,
        position: Vector3::new(x, 0.0, 900.0),
        score: ScoreVector { rho, vis: 1.0, inv_err: 0.5 },
        winning_subset: vec!["cam1".into(), "cam2".into()],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ks_is_symmetric_and_bounded(
        a in prop::collection::vec(-100.0..100.0f64, 1..30),
        b in prop::collection::vec(-100.0..100.0f64, 1..30),
    ) {
        let ab = ks_two_sample(&a, &b).unwrap();
        let ba = ks_two_sample(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab.statistic));
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
        prop_assert!((ab.statistic - ba.statistic).abs() < 1e-12);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
    }

    #[test]
    fn ks_ignores_monotone_relabeling(
        a in prop::collection::vec(-5.0..5.0f64, 2..20),
        b in prop::collection::vec(-5.0..5.0f64, 2..20),
    ) {
        let f = |x: &f64| x.exp() * 3.0 + 1.0;
        let plain = ks_two_sample(&a, &b).unwrap();
        let mapped = ks_two_sample(&a.iter().map(f).collect::<Vec<_>>(), &b.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert!((plain.statistic - mapped.statistic).abs() < 1e-12);
    }

    #[test]
    fn exact_p_is_monotone(m in 1usize..40, n in 1usize..40, d in 0u64..1600) {
        let d = d.min((m * n) as u64);
        let p = ks_exact_p(m, n, d);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
        if d < (m * n) as u64 {
            prop_assert!(ks_exact_p(m, n, d + 1) <= p + 1e-12);
        }
    }

    /// Output is always one of the window entries and the window never
    /// exceeds its capacity.
    #[test]
    fn consolidation_returns_a_window_entry(
        xs in prop::collection::vec(-50.0..50.0f64, 1..80),
        rhos in prop::collection::vec(0.0..1.0f64, 80),
    ) {
        let config = WindowConfig::default();
        let mut w = DriftWindow::new(JointId::LHip, config).unwrap();
        let th = ReliabilityThresholds::default();
        for (t, x) in xs.iter().enumerate() {
            let out = w.update(entry(t as u64, *x, rhos[t]), &th).unwrap();
            prop_assert!(w.len() <= config.capacity);
            prop_assert!(w.entries().iter().any(|e| e == &out.output));
        }
    }
}
