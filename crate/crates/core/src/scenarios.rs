//! Canned scenarios used by the demos, the acceptance suite and the examples
//! in the documentation.
//!
//! Every constant the underlying problem leaves open (initial relative
//! velocity, noise amplitude, hold interval, seed) is pinned here so that a
//! demo run is fully described by the emitted scenario file.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feedback::HybridFamily;
use crate::model::{LinearSystem, Scenario, TargetTensor};
use crate::numerics::{Matrix, Vector};
use crate::openloop::synthesize;
use crate::sim::{run_ensemble, EnsembleReport, NoiseConfig, OpenLoopFamily, SimOptions};

/// Noise amplitude of the noisy rendezvous demo.
pub const DEMO_SIGMA: f64 = 0.5;
/// Hold interval of the noisy rendezvous demo, `(T − t0)/100`.
pub const DEMO_HOLD_INTERVAL: f64 = 0.01;
/// Base seed of the noisy rendezvous demo.
pub const DEMO_SEED: u64 = 42;
/// Switch time of the noisy rendezvous demo.
pub const DEMO_SWITCH_TIME: f64 = 0.6;

/// Relative double integrator `ë = u − v`, state `(e, ė)`.
pub fn double_integrator() -> LinearSystem {
    let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
    LinearSystem::new(a, vec![b.clone(), -b]).expect("double integrator is well formed")
}

/// Two-particle rendezvous over `[0, T]` starting at rest with separation
/// `e0`; targets are relative positions `h[i][j]` with zero relative velocity.
pub fn rendezvous(e0: f64, h: [[f64; 2]; 2], t_final: f64) -> Result<Scenario> {
    let values = [h[0][0], h[0][1], h[1][0], h[1][1]];
    let targets = TargetTensor::padded(vec![2, 2], &values, 2)?;
    Scenario::new(
        double_integrator(),
        0.0,
        t_final,
        Vector::from_vec(vec![e0, 0.0]),
        targets,
    )
}

/// The rendezvous of the feedback demo: `e(0) = 5`, `H = [[10, 0], [0, −10]]`, `T = 1`.
pub fn rendezvous_feedback() -> Scenario {
    rendezvous(5.0, [[10.0, 0.0], [0.0, -10.0]], 1.0).expect("pinned scenario is valid")
}

/// The rendezvous of the introductory figure: `e(0) = 10`, `H = [[5, 0], [0, −5]]`.
pub fn rendezvous_fig2() -> Scenario {
    rendezvous(10.0, [[5.0, 0.0], [0.0, -5.0]], 1.0).expect("pinned scenario is valid")
}

/// Noise acting on the acceleration channel only.
pub fn demo_noise(seed: u64) -> NoiseConfig {
    NoiseConfig::new(DEMO_SIGMA, DEMO_HOLD_INTERVAL, seed).with_mask(vec![false, true])
}

/// [`rendezvous_feedback`] with the demo switch time and acceleration noise.
pub fn rendezvous_noisy(seed: u64) -> Scenario {
    rendezvous_feedback()
        .with_switch_time(DEMO_SWITCH_TIME)
        .and_then(|s| s.with_noise(demo_noise(seed)))
        .expect("pinned scenario is valid")
}

/// Incompatible rendezvous targets `[[10, 0], [0, 0]]`.
pub fn rendezvous_incompatible() -> Scenario {
    rendezvous(5.0, [[10.0, 0.0], [0.0, 0.0]], 1.0).expect("pinned scenario is valid")
}

/// Scalar two-agent system `ẋ = a x + b₁ u + b₂ v` with a 2 × 2 target matrix.
pub fn scalar_two_agent(
    a: f64,
    b: [f64; 2],
    x0: f64,
    h: [[f64; 2]; 2],
    t_final: f64,
) -> Result<Scenario> {
    let sys = LinearSystem::new(
        Matrix::from_element(1, 1, a),
        vec![
            Matrix::from_element(1, 1, b[0]),
            Matrix::from_element(1, 1, b[1]),
        ],
    )?;
    let targets = TargetTensor::scalar(vec![2, 2], &[h[0][0], h[0][1], h[1][0], h[1][1]])?;
    Scenario::new(sys, 0.0, t_final, Vector::from_element(1, x0), targets)
}

/// Integrator with unit inputs, `x0 = 0`, `T = 1`, `H = [[1, 0], [0, −1]]`.
pub fn scalar_integrator_pair() -> Scenario {
    scalar_two_agent(0.0, [1.0, 1.0], 0.0, [[1.0, 0.0], [0.0, -1.0]], 1.0)
        .expect("pinned scenario is valid")
}

/// Number of seeds in the noisy demo's Monte-Carlo comparison.
pub const DEMO_SEED_COUNT: usize = 50;

/// The consecutive seeds `DEMO_SEED, DEMO_SEED + 1, …` of the Monte-Carlo comparison.
pub fn demo_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| DEMO_SEED + k).collect()
}

/// Pure open-loop and hybrid outcomes under one noise realization.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Mean over choice tuples of `‖x(T) − H‖₂`.
    pub open_loop_error: f64,
    pub hybrid_error: f64,
    /// Ensemble-average measured control cost.
    pub open_loop_cost: f64,
    pub hybrid_cost: f64,
}

/// Monte-Carlo comparison of pure open-loop control against the hybrid controller.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridComparison {
    pub outcomes: Vec<SeedOutcome>,
}

impl HybridComparison {
    fn median_of(&self, pick: impl Fn(&SeedOutcome) -> f64) -> f64 {
        median(self.outcomes.iter().map(pick).collect())
    }

    pub fn median_open_loop_error(&self) -> f64 {
        self.median_of(|o| o.open_loop_error)
    }

    pub fn median_hybrid_error(&self) -> f64 {
        self.median_of(|o| o.hybrid_error)
    }

    pub fn median_open_loop_cost(&self) -> f64 {
        self.median_of(|o| o.open_loop_cost)
    }

    pub fn median_hybrid_cost(&self) -> f64 {
        self.median_of(|o| o.hybrid_cost)
    }
}

/// Median of a nonempty sample; the mean of the two middle values for even sizes.
pub fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Mean over tuples of the Euclidean terminal error.
pub fn mean_terminal_error(report: &EnsembleReport) -> f64 {
    report
        .tuples
        .iter()
        .map(|t| t.terminal_error.norm())
        .sum::<f64>()
        / report.tuples.len() as f64
}

/// Runs both controllers under identical noise for every seed; the scenario
/// supplies the switch time and the noise configuration whose seed is replaced.
pub fn compare_hybrid(
    scenario: &Scenario,
    seeds: &[u64],
    steps: usize,
) -> Result<HybridComparison> {
    let noise = scenario
        .noise
        .clone()
        .ok_or_else(|| Error::Config("hybrid comparison needs a noise configuration".into()))?;
    let open_loop = OpenLoopFamily::scheduled(synthesize(scenario)?, steps)?;
    let hybrid = HybridFamily::scheduled(scenario, steps)?;
    let opts = SimOptions {
        steps,
        record: false,
    };
    let outcomes = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = NoiseConfig {
                seed,
                ..noise.clone()
            };
            let ol = run_ensemble(scenario, &open_loop, Some(&cfg), &opts)?;
            let hy = run_ensemble(scenario, &hybrid, Some(&cfg), &opts)?;
            Ok(SeedOutcome {
                seed,
                open_loop_error: mean_terminal_error(&ol),
                hybrid_error: mean_terminal_error(&hy),
                open_loop_cost: ol.average_cost,
                hybrid_cost: hy.average_cost,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HybridComparison { outcomes })
}
