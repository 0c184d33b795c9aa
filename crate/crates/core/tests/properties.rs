mod common;

use std::sync::Arc;

use promise_ledger::geometry::{support_value, support_value_enumerated};
use promise_ledger::mechanism::{
    couple_promises, finite_horizon_schedule, interim_promise, verify_promise_keeping, BallMechanism, BuildOptions,
    ConstantPolicy, CouplingVariant, FiniteHorizonConfig, FiniteHorizonMechanism, Stage,
};
use promise_ledger::realize::InterimAllocation;
use promise_ledger::sim::run_finite;
use promise_ledger::{dot, Error, JointSupport};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nonzero() -> impl Strategy<Value = f64> {
    prop_oneof![-2.0..-0.1f64, 0.1..2.0f64]
}

proptest! {
    #[test]
    fn coupled_promises_stay_on_the_hyperplane(
        cols in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, nonzero()), 2..6),
        legacy in any::<bool>(),
    ) {
        let w: Vec<f64> = cols.iter().map(|c| c.0).collect();
        let m: Vec<f64> = cols.iter().map(|c| c.1).collect();
        let a: Vec<f64> = cols.iter().map(|c| c.2).collect();
        let variant = if legacy { CouplingVariant::Legacy } else { CouplingVariant::New };
        let z = couple_promises(&w, &m, &a, variant).unwrap();
        prop_assert!((dot(&a, &z) - dot(&a, &m)).abs() < 1e-12);
    }

    #[test]
    fn interim_promise_falls_with_the_report(
        steps in prop::collection::vec((0.01..0.3f64, 0.0..0.4f64, 0.1..1.0f64), 2..6),
        u in 0.0..1.0f64,
        gamma in 0.5..0.999f64,
    ) {
        let mut atoms = Vec::new();
        let mut values = Vec::new();
        let (mut a, mut p) = (0.0, 0.0);
        for s in &steps {
            a += s.0;
            p = (p + s.1).min(1.0);
            atoms.push(a);
            values.push(p);
        }
        let total: f64 = steps.iter().map(|s| s.2).sum();
        let probs = steps.iter().map(|s| s.2 / total).collect();
        let interim = InterimAllocation { agent: 0, atoms: atoms.clone(), probs, values, monotone: true };
        let grid: Vec<f64> = (0..=200).map(|k| k as f64 * (a + 0.1) / 200.0).collect();
        for pair in grid.windows(2) {
            let hi = interim_promise(&interim, u, gamma, pair[0]);
            let lo = interim_promise(&interim, u, gamma, pair[1]);
            prop_assert!(lo <= hi + 1e-12);
        }
    }

    #[test]
    fn support_value_matches_enumeration(seed in 0u64..500, b in prop::collection::vec(-1.0..1.0f64, 3)) {
        let p = common::random_profile(seed);
        let beta = &b[..p.n()];
        let s = JointSupport::new(&p).unwrap();
        prop_assert!((support_value(&p, beta) - support_value_enumerated(&s, beta)).abs() < 1e-12);
    }
}

#[test]
fn margin_below_the_chain_is_rejected() {
    let p = common::tie();
    let support = Arc::new(JointSupport::new(&p).unwrap());
    let opts = BuildOptions { constant: ConstantPolicy::Fixed(1.0), ..Default::default() };
    let stage = Stage::stationary(&[0.2, 0.2], 0.05, 0.01, 0.9);
    let err = BallMechanism::build(support, stage, &opts).unwrap_err();
    assert!(matches!(err, Error::MarginViolated(_)), "{err:?}");
}

#[test]
fn boundary_states_keep_their_promise() {
    let p = common::tie();
    let (mech, ball) = common::interior_mechanism(&p, 0.99).expect("interior ball");
    for plan in mech.plans() {
        let state = mech.decompose(&plan.point).unwrap();
        assert!(verify_promise_keeping(&mech, &state, 1e-10).passed);
    }
    let state = mech.decompose(&ball.boundary_point()).unwrap();
    assert!(verify_promise_keeping(&mech, &state, 1e-10).passed);
}

#[test]
fn random_paths_never_leave_the_region() {
    let p = common::tie();
    let (mech, ball) = common::interior_mechanism(&p, 0.9).expect("interior ball");
    let start = mech.decompose(&ball.boundary_point()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let mut state = start.clone();
        for _ in 0..20 {
            let k = common::draw(mech.support(), &mut rng);
            state = mech.step(&state, k).expect("next state stays in the region").next;
        }
    }
}

#[test]
fn finite_horizon_play_matches_promises() {
    let p = common::tie();
    let x = 0.25 - 0.007 * std::f64::consts::FRAC_1_SQRT_2;
    let cfg = FiniteHorizonConfig { constant: 1e-4, ..Default::default() };
    let sched = finite_horizon_schedule(&p, &[x, x], 0.01, 0.0035, 1000, &cfg).unwrap();
    let mech = FiniteHorizonMechanism::from_schedule(Arc::new(JointSupport::new(&p).unwrap()), &sched).unwrap();
    let s = run_finite(&mech, 60, 5).unwrap();
    assert!(s.consistent(3.0), "{s:?}");
    assert!(s.exact_gap < 1.0 / 6.0 - 1e-3);
}

#[test]
fn near_frontier_stages_build_promptly() {
    // Boundary targets here sit within a hair of the frontier.
    let p = common::tie();
    let cfg = FiniteHorizonConfig { constant: 1e-4, ..Default::default() };
    let sched = finite_horizon_schedule(&p, &[0.245, 0.245], 0.01, 0.0035, 1000, &cfg).unwrap();
    let started = std::time::Instant::now();
    let mech = FiniteHorizonMechanism::from_schedule(Arc::new(JointSupport::new(&p).unwrap()), &sched).unwrap();
    assert!(started.elapsed().as_secs() < 60);
    let s = run_finite(&mech, 20, 2).unwrap();
    assert!(s.consistent(3.0), "{s:?}");
}
