use proptest::prelude::*;

use weakloop_core::controller::cascade_response;
use weakloop_core::decision::Choice;
use weakloop_core::sim::{run_case, run_scenario, steady_state, ExpanderSpec, PlantSpec};
use weakloop_core::verify::stability_probe;
use weakloop_core::{Case, DVector, Delta, Engine, PolicySpec, ScenarioConfig, Session};

fn case(c: Case) -> ScenarioConfig {
    ScenarioConfig::reference().for_case(c).unwrap()
}

#[test]
fn steady_state_ordering_across_cases() {
    let f = |c| {
        let s = steady_state(&run_case(&case(c)).unwrap()).unwrap();
        assert!(s.settled, "{c:?} not settled");
        (s.f_final.unwrap(), s.y_abs_max)
    };
    let (_, y1) = f(Case::NoFeedback);
    let (f2, y2) = f(Case::Nominal);
    let (f3, y3) = f(Case::Fixed);
    let (f4, y4) = f(Case::Learning);
    assert!(f4 <= f3 && f3 <= f2);
    assert!((y1 - 3.5).abs() < 1e-9);
    assert!(y2 < 1e-6);
    assert!(y3 <= 0.2 + 1e-6 && y4 <= 0.2 + 1e-6);
}

#[test]
fn every_policy_stays_in_the_set() {
    let policies = [
        PolicySpec::Nominal,
        PolicySpec::Quadratic,
        PolicySpec::Extreme,
        PolicySpec::RandomUniform { seed: Some(3) },
    ];
    for c in [Case::Nominal, Case::Fixed, Case::Learning] {
        for policy in &policies {
            let cfg = ScenarioConfig { horizon: 150, policy: policy.clone(), ..case(c) };
            let mut engine = Engine::new(&cfg).unwrap();
            let mut decide = engine.build_policy(&cfg).unwrap();
            for _ in 0..cfg.horizon {
                let obs = engine.observe().unwrap();
                let u = decide.decide(&obs.set).unwrap();
                assert!(obs.set.contains(&u, 1e-9));
                let rec = engine.apply(u).unwrap();
                assert_eq!(rec.case_label, cfg.label);
            }
        }
    }
}

#[test]
fn box_expander_budget_holds_under_extreme_policy() {
    let mut cfg = case(Case::Nominal);
    cfg.expander = Some(ExpanderSpec::E1 { gammas: vec![0.02, 0.02, 0.02] });
    let report = weakloop_core::PerfReport::evaluate(&cfg).unwrap();
    let probe = stability_probe(&cfg, &PolicySpec::Extreme, 300).unwrap();
    assert!(probe.settled);
    // the probe's worst vertex is bounded by the DC worst case
    assert!(probe.final_output <= report.worst_dc_deviation + 1e-9);
}

fn stable_plant(poles: &[f64], b: &[f64]) -> PlantSpec {
    let n = poles.len();
    let a = (0..n).map(|i| (0..n).map(|j| if i == j { poles[i] } else if j == i + 1 { 0.3 } else { 0.0 }).collect()).collect();
    PlantSpec {
        a,
        b_u: (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
        b_w: b.iter().map(|x| vec![*x]).collect(),
        c: vec![vec![1.0; n]],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cascade_replay_matches_closed_loop(seed in any::<u64>(), learning in any::<bool>()) {
        let c = if learning { Case::Learning } else { Case::Fixed };
        let cfg = ScenarioConfig { horizon: 80, seed, policy: PolicySpec::RandomUniform { seed: None }, ..case(c) };
        let trace = run_scenario(&cfg).unwrap().trace;
        let plant = cfg.plant.build().unwrap().zoh_discretize(cfg.dt).unwrap();
        let offsets: Vec<_> = trace.iter().map(|r| DVector::from_vec(r.u.clone()) - DVector::from_vec(r.v.clone())).collect();
        let n = trace.len();
        let y = cascade_response(&plant, &cfg.gain_matrix().unwrap(), &offsets, &vec![DVector::zeros(1); n], &vec![DVector::from_element(1, 1.0); n]).unwrap();
        for (r, yc) in trace.iter().zip(&y) {
            prop_assert!((r.y[0] - yc[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn random_stable_plants_never_diverge(
        poles in proptest::collection::vec(-3.0f64..-0.1, 3),
        b in proptest::collection::vec(-2.0f64..2.0, 3),
        gains in proptest::collection::vec(-1.0f64..1.0, 3),
        seed in any::<u64>(),
    ) {
        let mut cfg = case(Case::Fixed);
        cfg.plant = stable_plant(&poles, &b);
        cfg.gain = gains.iter().map(|g| vec![*g]).collect();
        cfg.expander = Some(ExpanderSpec::E2 { e_l: vec![1.0, 0.0, 0.0], e_r: vec![1.0, 0.0, 0.0], gamma: Some(0.5) });
        for policy in [PolicySpec::RandomUniform { seed: Some(seed) }, PolicySpec::Extreme] {
            let probe = stability_probe(&cfg, &policy, 200);
            prop_assert!(probe.is_ok(), "{:?}", probe);
        }
    }

    #[test]
    fn session_replay_is_bit_exact(deltas in proptest::collection::vec(-1.0f64..1.0, 1..40)) {
        let cfg = ScenarioConfig { horizon: 40, ..case(Case::Learning) };
        let mut session = Session::new("s", &cfg).unwrap();
        for d in &deltas {
            let gamma = session.state().gamma;
            session.decide(Choice::Delta(Delta::Scalar(d * gamma)), None).unwrap();
        }
        prop_assert_eq!(Session::replay(&cfg, session.choices()).unwrap(), session.trace().to_vec());
        let max_y = session.trace().iter().map(|r| r.y[0].abs()).fold(0.0, f64::max);
        prop_assert!(max_y < 10.0);
    }
}
