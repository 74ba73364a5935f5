use ndarray::Array1;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use z2_core::solver::{coefficients, forward_step, inverse_step};
use z2_core::{
    collapsed_forward, implicit_collapse, random_schedule, run_trajectory, GaussianComponent,
    GuidedPrediction, LatentState, Mixture, MixtureField, SamplerConfig, Schedule, ScheduleKind,
    Variant,
};

fn vector(dim: usize) -> impl Strategy<Value = Array1<f64>> {
    prop::collection::vec(-3.0f64..3.0, dim).prop_map(Array1::from)
}

fn field() -> MixtureField {
    MixtureField::from_designated(
        Mixture::new(vec![
            GaussianComponent::new(vec![1.0, 0.0], 0.5, 0.5),
            GaussianComponent::new(vec![-1.0, 0.0], 0.5, 0.5),
        ])
        .unwrap(),
        0,
    )
    .unwrap()
}

fn schedule(kind: usize, steps: usize) -> Schedule {
    match ScheduleKind::ALL[kind] {
        ScheduleKind::Flow => Schedule::flow_range(steps, 0.0, 1.0).unwrap(),
        k => Schedule::uniform_angle(k, steps, 0.01, 1.5).unwrap(),
    }
}

proptest! {
    #[test]
    fn collapse_matches_step_and_return(
        seed in any::<u64>(),
        kind in 0usize..3,
        gamma in 0.0f64..12.0,
        (x, u, c, e) in (1usize..16).prop_flat_map(|d| (vector(d), vector(d), vector(d), vector(d))),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_schedule(ScheduleKind::ALL[kind], 20, &mut rng).unwrap();
        for t in 1..=20 {
            let coeffs = coefficients(&s, t).unwrap();
            let state = LatentState::new(x.clone(), t);
            let pred = GuidedPrediction::new(u.clone(), c.clone(), gamma);
            let collapsed = implicit_collapse(&state, &coeffs, &pred).unwrap();
            let out = forward_step(&coeffs, &state, pred.guided.view()).unwrap();
            let back = inverse_step(&coeffs, &out, pred.at_scale(0.0).view()).unwrap();
            let scale = 1.0 + x.dot(&x).sqrt();
            let dev = (&collapsed.x - &back.x).mapv(f64::abs).sum() / scale;
            prop_assert!(dev < 1e-11, "t={t} dev={dev}");

            let at_tilde = GuidedPrediction { guided: e.clone(), ..pred.clone() };
            prop_assert!(
                collapsed_forward(&state, &coeffs, &collapsed, &at_tilde, pred.delta_eps.view(), gamma).is_ok()
            );
        }
    }

    #[test]
    fn reported_nfe_matches_formula(
        variant in 0usize..4,
        kind in 0usize..3,
        steps in 2usize..40,
        warmup_frac in 0.0f64..0.5,
        zigzag_frac in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        let variant = Variant::ALL[variant];
        let mut warmup = (warmup_frac * steps as f64) as usize;
        let zigzag = (zigzag_frac * (steps - warmup) as f64) as usize;
        if variant == Variant::ZSquared && zigzag > 0 {
            warmup = warmup.max(1);
        }
        let zigzag = zigzag.min(steps - warmup);
        let cfg = SamplerConfig::new(variant, 2.0).with_window(warmup, zigzag);
        let s = schedule(kind, steps);
        let rec = run_trajectory(cfg, &s, &field(), None, seed).unwrap();
        prop_assert_eq!(rec.nfe, cfg.expected_nfe(steps));
        prop_assert_eq!(rec.states.len(), steps + 1);
        prop_assert_eq!(rec.states.last().unwrap().t, 0);
    }

    #[test]
    fn runs_are_reproducible(variant in 0usize..4, kind in 0usize..3, seed in any::<u64>()) {
        let cfg = SamplerConfig::new(Variant::ALL[variant], 1.5).with_window(2, 10);
        let s = schedule(kind, 16);
        let a = run_trajectory(cfg, &s, &field(), None, seed).unwrap();
        let b = run_trajectory(cfg, &s, &field(), None, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
