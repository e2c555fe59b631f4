use proptest::prelude::*;
use ptdiff::analysis::{equivalence_check, equivalence_with_q};
use ptdiff::dynamics::{simulate_differentiator, simulate_error};
use ptdiff::experiment::{
    preset_config, DifferentiatorConfig, ExperimentConfig, FamilySpec, IntegrationConfig, Mode, SignalConfig,
};
use ptdiff::family::CorrectionFamily;
use ptdiff::redesign::{Redesign, RedesignParams};
use ptdiff::signals::{Measurement, NoiseSpec, SignalTerm, TestSignal};

fn redesign_rho(fam: CorrectionFamily, alpha: f64, rho: f64) -> Redesign {
    let p = RedesignParams::for_family(&fam, alpha, 1.0)
        .unwrap()
        .with_rho(rho)
        .unwrap();
    Redesign::new(p, fam).unwrap()
}

#[test]
fn equivalence_holds_with_shifted_scaling() {
    for (fam, alpha) in [
        (CorrectionFamily::levant(1, 1.0).unwrap(), 3.0),
        (CorrectionFamily::linear_default(1, 2.0).unwrap(), 1.0),
    ] {
        for rho in [0.5, 1.0] {
            let r = redesign_rho(fam.clone(), alpha, rho);
            let rep = equivalence_check(&r, &[1.0, 1.0], |_| 0.0, 0.9, 1e-5, 1e-2).unwrap();
            assert!(rep.passed, "{} rho={rho}: {rep:?}", fam.name());
        }
    }
}

#[test]
fn equivalence_holds_under_disturbance() {
    let r = Redesign::with_defaults(CorrectionFamily::levant(1, 1.0).unwrap(), 3.0, 1.0).unwrap();
    let rep = equivalence_check(&r, &[1.0, -1.0], |t: f64| (5.0 * t).cos(), 0.9, 1e-5, 1e-2).unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn transposed_structure_matrix_is_detected() {
    let r = Redesign::with_defaults(CorrectionFamily::linear_default(1, 2.0).unwrap(), 1.0, 1.0).unwrap();
    let qt = r.structure().q.transpose();
    let rep = equivalence_with_q(&r, &qt, &[1.0, 1.0], |_| 0.0, 0.9, 1e-5, 1e-2).unwrap();
    assert!(rep.max_rel_dev > 10.0 * rep.tol, "{rep:?}");
}

/// With `y^{(n+1)} ≡ 0` the estimator error obeys the error dynamics with
/// `d ≡ 0` step for step; for other signals the two differ by the Euler
/// remainder of the signal's Taylor expansion.
#[test]
fn estimator_error_matches_error_dynamics() {
    let r = Redesign::with_defaults(CorrectionFamily::seeber(1.0, 1.0).unwrap(), 3.0, 1.0).unwrap();
    let ramp = TestSignal::new(vec![SignalTerm::Polynomial {
        coefficients: vec![0.5, -2.0],
    }]);
    let x0 = [10.0, 10.0];
    let (diff, _) =
        simulate_differentiator(r.clone(), Measurement::new(ramp, None).unwrap(), 0, &x0, 1.5, 1e-5, 10).unwrap();
    let e0 = [x0[0] - 0.5, x0[1] + 2.0];
    let err = simulate_error(r.clone(), |_| 0.0, &e0, 1.5, 1e-5, 10).unwrap();
    let worst = diff
        .rows()
        .zip(err.rows())
        .map(|(a, b)| ((a[2] - b[0]).abs()).max((a[3] - b[1]).abs()))
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn noise_seed_reproduces_bitwise() {
    let run = |seed| {
        let r = Redesign::with_defaults(CorrectionFamily::seeber(1.0, 1.0).unwrap(), 3.0, 1.0).unwrap();
        let m = Measurement::new(
            ptdiff::signals::make_preset("fig1a").unwrap(),
            Some(NoiseSpec { std_dev: 0.1, seed }),
        )
        .unwrap();
        simulate_differentiator(r, m, 0, &[10.0, 10.0], 0.5, 1e-5, 7).unwrap().0
    };
    assert_eq!(run(3).to_csv_string(), run(3).to_csv_string());
    assert_ne!(run(3).to_csv_string(), run(4).to_csv_string());
}

fn family_spec() -> impl Strategy<Value = FamilySpec> {
    prop_oneof![
        (0.1f64..5.0).prop_map(|r| FamilySpec::Linear {
            r,
            gains: None,
            roots: None
        }),
        (0.0f64..10.0, proptest::option::of(proptest::collection::vec(0.1f64..5.0, 2))).prop_map(
            |(bound, gains)| FamilySpec::Levant { bound, gains }
        ),
        (0.0f64..10.0, 0.1f64..5.0).prop_map(|(bound, t_star)| FamilySpec::Seeber { bound, t_star }),
        (0.1f64..2.0, 0.1f64..0.99, 1.01f64..2.0).prop_map(|(theta, c, b)| FamilySpec::Menard {
            theta,
            c,
            b,
            gains: None
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(
        family in family_spec(),
        alpha in 0.01f64..10.0,
        t_c in 0.01f64..100.0,
        beta_factor in proptest::option::of(1.0f64..10.0),
        rho in 0.0f64..2.0,
        n_f in 0usize..2,
        x0 in proptest::collection::vec(-1e3f64..1e3, 2),
        noise in proptest::option::of((0.0f64..1.0, any::<u64>())),
        step in 1e-7f64..1e-2,
        horizon in 0.1f64..10.0,
        stride in 1u64..1000,
        base in any::<bool>(),
    ) {
        let mut cfg = preset_config("fig1a").unwrap();
        cfg.differentiator = DifferentiatorConfig {
            order: 1,
            mode: if base { Mode::Base } else { Mode::Redesigned },
            alpha,
            t_c,
            t_f: None,
            bound: None,
            beta: None,
            beta_factor,
            rho,
            mu: None,
            terminal_gains: None,
            n_f,
            initial_state: x0,
        };
        cfg.family = family;
        cfg.noise = noise.map(|(std_dev, seed)| NoiseSpec { std_dev, seed });
        cfg.signal = SignalConfig { preset: None, terms: Some(vec![SignalTerm::Sine { amplitude: 2.0, frequency: 0.5 }]) };
        cfg.integration = IntegrationConfig { step, horizon, stride };
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml().unwrap(), text);
    }
}
