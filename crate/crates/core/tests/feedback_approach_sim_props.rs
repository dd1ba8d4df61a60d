mod common;

use std::sync::Arc;

use choicectl::approach::{predict_terminal_large_f, ApproachLaw, ApproachOptions};
use choicectl::error::Error;
use choicectl::feedback::{FeedbackLaw, HybridFamily};
use choicectl::model::Scenario;
use choicectl::numerics::{gramian, mat_exp, Vector};
use choicectl::openloop::synthesize;
use choicectl::oracle::{initial_control_gap, penalized_solve};
use choicectl::scenarios::{rendezvous_feedback, scalar_two_agent};
use choicectl::sim::{
    run_ensemble, simulate, AffineFamily, ControllerFamily, NoiseConfig, OpenLoopFamily, SimOptions,
};
use common::*;
use proptest::prelude::*;

fn approach_terminal_states(s: &Scenario, f: f64, steps: usize) -> Vec<Vector> {
    let law = ApproachLaw::new(s, f, ApproachOptions::default()).unwrap();
    let family = AffineFamily::scheduled(Arc::new(law), s.t0, s.t_final, steps).unwrap();
    let report = run_ensemble(
        s,
        &family,
        None,
        &SimOptions {
            steps,
            record: false,
        },
    )
    .unwrap();
    report
        .tuples
        .into_iter()
        .map(|t| t.terminal_state)
        .collect()
}

fn mean_square_error(s: &Scenario, states: &[Vector]) -> f64 {
    let sum: f64 = s
        .targets
        .tuples()
        .zip(states)
        .map(|(tuple, x)| (x - s.targets.get(&tuple)).norm_squared())
        .sum();
    sum / states.len() as f64
}

/// RK4 under the pure feedback law from `t0` to `T − remaining_end` on a mesh
/// geometric in the remaining time. Returns the largest combined plant input
/// and the largest single gain term `|BᵀK x|` seen along the way.
fn feedback_run(
    law: &FeedbackLaw,
    s: &Scenario,
    i: usize,
    j: usize,
    remaining_end: f64,
    steps: usize,
) -> (f64, f64) {
    let b = s.system.input(0).clone();
    let c = s.system.input(1).clone();
    let a = s.system.a().clone();
    let span = s.t_final - s.t0;
    let (mut combined, mut gain_term): (f64, f64) = (0.0, 0.0);
    let mut rhs = |t: f64, x: &Vector| -> Vector {
        let (u, v) = law.feedback_control(i, j, t, x).unwrap();
        let input = &b * &u + &c * &v;
        combined = combined.max(input.amax());
        gain_term = gain_term.max((b.transpose() * (law.gain_k(t).unwrap() * x)).amax());
        &a * x + &input
    };
    let mut x = s.x0.clone();
    let mut t = s.t0;
    for k in 0..steps {
        let next_remaining = span * (remaining_end / span).powf((k + 1) as f64 / steps as f64);
        let h = (s.t_final - t) - next_remaining;
        let k1 = rhs(t, &x);
        let k2 = rhs(t + 0.5 * h, &(&x + &k1 * (0.5 * h)));
        let k3 = rhs(t + 0.5 * h, &(&x + &k2 * (0.5 * h)));
        let k4 = rhs(t + h, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        t += h;
    }
    (combined, gain_term)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn feedback_matches_open_loop_at_start(seed in any::<u64>()) {
        let s = random_two_agent_scenario(seed, true, 4);
        let open = synthesize(&s).unwrap();
        let fb = FeedbackLaw::new(&s).unwrap();
        for tuple in s.targets.tuples() {
            let (u, v) = fb.feedback_control(tuple[0], tuple[1], s.t0, &s.x0).unwrap();
            let u0 = open.control_value(0, tuple[0], s.t0).unwrap();
            let v0 = open.control_value(1, tuple[1], s.t0).unwrap();
            prop_assert!(scaled_diff(&u, &u0) <= 1e-6);
            prop_assert!(scaled_diff(&v, &v0) <= 1e-6);
        }
    }

    #[test]
    fn large_f_prediction_is_identity_on_compatible_targets(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = [1 + (seed % 3) as usize, 1 + ((seed >> 8) % 3) as usize];
        let n = 1 + ((seed >> 16) % 3) as usize;
        let h = random_compatible_targets(&mut r, &dims, n, 5.0);
        for tuple in h.tuples() {
            let p = predict_terminal_large_f(&h, tuple[0], tuple[1]).unwrap();
            prop_assert!((&p - h.get(&tuple)).amax() <= 1e-12 * h.max_abs().max(1.0));
        }
    }

    #[test]
    fn approach_starts_on_penalized_optimum(seed in any::<u64>(), compatible in any::<bool>(), k in 0usize..4) {
        let f = [0.1, 1.0, 10.0, 100.0][k];
        let s = random_two_agent_scenario(seed, compatible, 3);
        let law = ApproachLaw::new(&s, f, ApproachOptions::default()).unwrap();
        let oracle = penalized_solve(&s, f).unwrap();
        let gap = initial_control_gap(&s, &law, &oracle).unwrap();
        prop_assert!(gap <= 1e-8 * (1.0 + s.targets.max_abs()), "gap {gap:e}");
    }

    #[test]
    fn approach_gains_finite_at_horizon_end(seed in any::<u64>(), log_f in -1.0f64..6.0) {
        let s = random_two_agent_scenario(seed, false, 3);
        let law = ApproachLaw::new(&s, 10f64.powf(log_f), ApproachOptions::default()).unwrap();
        let (ku, kv) = law.approach_gains(s.t_final).unwrap();
        prop_assert!(ku.iter().chain(kv.iter()).all(|v| v.is_finite()));
        let (lu, lv) = law.approach_offsets(0, 0, s.t_final).unwrap();
        prop_assert!(lu.iter().chain(lv.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn scalar_approach_gain_closed_form(log_f in -1.0f64..6.0, frac in 0.0f64..1.0) {
        let f = 10f64.powf(log_f);
        let s = scalar_two_agent(0.0, [1.0, 1.0], 0.0, [[1.0, 0.0], [0.0, 0.0]], 1.0).unwrap();
        let law = ApproachLaw::new(&s, f, ApproachOptions::default()).unwrap();
        let t = frac;
        let (ku, kv) = law.approach_gains(t).unwrap();
        let expected = f / (1.0 + 2.0 * f * (1.0 - t));
        prop_assert!((ku[(0, 0)] - expected).abs() <= 1e-10 * expected.max(1.0));
        prop_assert!((kv[(0, 0)] - expected).abs() <= 1e-10 * expected.max(1.0));
    }
}

#[test]
fn feedback_reproduces_reference_tuple_along_trajectory() {
    let s = rendezvous_feedback();
    let open = synthesize(&s).unwrap();
    let fb = FeedbackLaw::new(&s).unwrap();
    let a = s.system.a();
    let y0 = mat_exp(a, -s.t0).unwrap() * &s.x0;
    let mut worst: f64 = 0.0;
    for k in 0..=999 {
        let t = s.t0 + k as f64 * 1e-3 * (s.t_final - s.t0);
        let mut y = y0.clone();
        if t > s.t0 {
            y += gramian(a, s.system.input(0), s.t0, t).unwrap().value * open.param(0, 0);
            y += gramian(a, s.system.input(1), s.t0, t).unwrap().value * open.param(1, 0);
        }
        let x = mat_exp(a, t).unwrap() * y;
        let (u, v) = fb.feedback_control(0, 0, t, &x).unwrap();
        let gap = (u - open.control_value(0, 0, t).unwrap())
            .amax()
            .max((v - open.control_value(1, 0, t).unwrap()).amax());
        let bound = if s.t_final - t >= 0.05 {
            1e-6
        } else {
            1e5 * f64::EPSILON * fb.gain_k(t).unwrap().norm() * x.amax()
        };
        worst = worst.max(gap / bound);
    }
    assert!(worst < 1.0, "reference-tuple gap ratio {worst:e}");
}

#[test]
fn feedback_departs_from_open_loop_off_the_reference_tuple() {
    let s = rendezvous_feedback();
    let open = synthesize(&s).unwrap();
    let fb = FeedbackLaw::new(&s).unwrap();
    let family = OpenLoopFamily::new(open.clone());
    let mut ctrl = family.controller(&[0, 1]).unwrap();
    let traj = simulate(
        &s,
        &mut ctrl,
        &[0, 1],
        None,
        &SimOptions {
            steps: 2000,
            record: true,
        },
    )
    .unwrap();
    let k = traj.times.iter().position(|&t| t >= 0.5).unwrap();
    let (u, _) = fb
        .feedback_control(0, 1, traj.times[k], &traj.states[k])
        .unwrap();
    let gap = (u - open.control_value(0, 0, traj.times[k]).unwrap()).amax();
    assert!(gap > 1.0, "off-reference gap {gap:e}");
}

#[test]
fn feedback_gain_diverges_at_horizon_end() {
    let s = rendezvous_feedback();
    let fb = FeedbackLaw::new(&s).unwrap();
    let mut previous = 0.0;
    for remaining in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
        let norm = fb.gain_k(s.t_final - remaining).unwrap().norm();
        assert!(
            norm * remaining >= 1.0,
            "‖K‖ = {norm:e} at T − {remaining:e}"
        );
        assert!(norm > previous);
        previous = norm;
    }
    let err = fb.gain_k(s.t_final - 1e-8).unwrap_err();
    assert!(matches!(err, Error::HorizonExhausted { .. }));
}

#[test]
fn feedback_singularities_cancel_in_plant_input() {
    let s = rendezvous_feedback();
    let fb = FeedbackLaw::new(&s).unwrap();
    for (i, j) in [(0, 0), (1, 1)] {
        let (combined, gain_term) = feedback_run(&fb, &s, i, j, 1e-4, 2000);
        assert!(gain_term > 1e9, "gain term {gain_term:e}");
        assert!(
            combined < 1e-5 * gain_term,
            "({i}, {j}): combined {combined:e}, gain term {gain_term:e}"
        );
    }
}

#[test]
fn hybrid_without_noise_hits_targets() {
    let s = rendezvous_feedback().with_switch_time(0.6).unwrap();
    let steps = 2000;
    let hybrid = HybridFamily::scheduled(&s, steps).unwrap();
    let opts = SimOptions {
        steps,
        record: false,
    };
    let report = run_ensemble(&s, &hybrid, None, &opts).unwrap();
    assert!(
        report.max_terminal_error < 1e-6,
        "{:e}",
        report.max_terminal_error
    );
    let open = run_ensemble(
        &s,
        &OpenLoopFamily::scheduled(synthesize(&s).unwrap(), steps).unwrap(),
        None,
        &opts,
    )
    .unwrap();
    for (h, o) in report.tuples.iter().zip(&open.tuples) {
        assert!((&h.terminal_state - &o.terminal_state).amax() < 1e-6);
    }
}

#[test]
fn hybrid_with_early_switch_behaves_as_open_loop() {
    let base = rendezvous_feedback();
    let steps = 1000;
    let s = base.clone().with_switch_time(base.t0 + 1e-9).unwrap();
    let opts = SimOptions {
        steps,
        record: false,
    };
    let hybrid = run_ensemble(
        &s,
        &HybridFamily::scheduled(&s, steps).unwrap(),
        None,
        &opts,
    )
    .unwrap();
    let open = run_ensemble(
        &s,
        &OpenLoopFamily::scheduled(synthesize(&s).unwrap(), steps).unwrap(),
        None,
        &opts,
    )
    .unwrap();
    for (h, o) in hybrid.tuples.iter().zip(&open.tuples) {
        assert!((&h.terminal_state - &o.terminal_state).amax() < 1e-8);
        assert!((h.measured_cost - o.measured_cost).abs() < 1e-6 * o.measured_cost);
    }
}

#[test]
fn approach_terminal_error_plateaus_on_compatible_targets() {
    let s = rendezvous_feedback();
    let scale = 1.0 + s.targets.max_abs();
    let mut previous = f64::INFINITY;
    for f in [0.1, 1.0, 10.0, 100.0] {
        let err = mean_square_error(&s, &approach_terminal_states(&s, f, 2000));
        assert!(err < previous, "f = {f:e}: {err:e} ≥ {previous:e}");
        previous = err;
    }
    let simulated = mean_square_error(&s, &approach_terminal_states(&s, 1e6, 20000)).sqrt();
    let oracle = penalized_solve(&s, 1e6)
        .unwrap()
        .mean_square_error(1e6)
        .sqrt();
    assert!(oracle < 1e-3 * scale, "oracle {oracle:e}");
    assert!(simulated > 1.0, "simulated {simulated:e}");
}

#[test]
fn approach_gains_converge_at_rate_one_over_f() {
    let s = rendezvous_feedback();
    let grid: Vec<f64> = (0..=19)
        .map(|k| s.t0 + 0.05 * k as f64 * (s.t_final - s.t0))
        .collect();
    let gap = |f: f64| {
        let law = ApproachLaw::new(&s, f, ApproachOptions::default()).unwrap();
        grid.iter()
            .map(|&t| {
                let (ku, kv) = law.approach_gains(t).unwrap();
                let limit = law.limit_gains(t).unwrap();
                let du = (ku - s.system.input(0).transpose() * &limit.k).norm();
                let dv = (kv - s.system.input(1).transpose() * &limit.k).norm();
                du.max(dv)
            })
            .fold(0.0, f64::max)
    };
    let sweep: Vec<f64> = (-1..=9).map(|k| 10f64.powi(k)).collect();
    let gaps: Vec<f64> = sweep.iter().map(|&f| gap(f)).collect();
    for pair in gaps.windows(2) {
        assert!(pair[1] < pair[0], "gaps {gaps:?}");
    }
    for pair in gaps[7..].windows(2) {
        let ratio = pair[0] / pair[1];
        assert!((9.0..11.0).contains(&ratio), "gaps {gaps:?}");
    }
}

#[test]
fn approach_terminal_sum_matches_prediction() {
    for seed in [3u64, 6, 9] {
        let s = random_two_agent_scenario(seed, false, 2);
        for f in [0.1, 10.0, 1e3] {
            let states = approach_terminal_states(&s, f, 2000);
            let simulated = states
                .iter()
                .fold(Vector::zeros(s.system.state_dim()), |acc, x| acc + x);
            let law = ApproachLaw::new(&s, f, ApproachOptions::default()).unwrap();
            let predicted = law.predict_terminal_sum(&s.x0).unwrap();
            assert!(
                scaled_diff(&simulated, &predicted) < 1e-6,
                "seed {seed}, f = {f:e}"
            );
        }
    }
}

#[test]
fn ensemble_is_deterministic_and_order_independent() {
    let s = rendezvous_feedback();
    let noise = NoiseConfig::new(0.5, 0.01, 1234).with_mask(vec![false, true]);
    let opts = SimOptions {
        steps: 500,
        record: true,
    };
    let family = OpenLoopFamily::scheduled(synthesize(&s).unwrap(), 500).unwrap();
    let first = run_ensemble(&s, &family, Some(&noise), &opts).unwrap();
    let second = run_ensemble(&s, &family, Some(&noise), &opts).unwrap();
    assert_eq!(first, second);
    for (idx, tuple) in s
        .targets
        .tuples()
        .enumerate()
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
    {
        let mut ctrl = family.controller(&tuple).unwrap();
        let alone = simulate(&s, &mut ctrl, &tuple, Some(&noise.for_tuple(idx)), &opts).unwrap();
        assert_eq!(alone, first.trajectories[idx]);
    }
}

#[test]
fn rk4_converges_at_fourth_order() {
    for seed in [0u64, 1, 2, 3] {
        let s = random_compatible_scenario(seed);
        let law = synthesize(&s).unwrap();
        let tuple = vec![0; s.system.agents()];
        let exact = law.terminal_state(&tuple).unwrap();
        let error = |steps: usize| {
            let family = OpenLoopFamily::new(law.clone());
            let mut ctrl = family.controller(&tuple).unwrap();
            let traj = simulate(
                &s,
                &mut ctrl,
                &tuple,
                None,
                &SimOptions {
                    steps,
                    record: false,
                },
            )
            .unwrap();
            (traj.terminal_state - &exact).amax()
        };
        let (e1, e2, e3) = (error(10), error(20), error(40));
        let (r1, r2) = (e1 / e2, e2 / e3);
        assert!(
            (12.0..20.0).contains(&r1) && (12.0..20.0).contains(&r2),
            "seed {seed}: {e1:e} {e2:e} {e3:e}"
        );
    }
}

#[test]
fn sim_reports_errors_against_the_chosen_tuple() {
    let s = rendezvous_feedback();
    let family = OpenLoopFamily::new(synthesize(&s).unwrap());
    let report = run_ensemble(
        &s,
        &family,
        None,
        &SimOptions {
            steps: 400,
            record: true,
        },
    )
    .unwrap();
    for (summary, tuple) in report.tuples.iter().zip(s.targets.tuples()) {
        assert_eq!(summary.choices, tuple);
        let expected: Vector = &summary.terminal_state - s.targets.get(&tuple);
        assert_eq!(summary.terminal_error, expected);
    }
}
