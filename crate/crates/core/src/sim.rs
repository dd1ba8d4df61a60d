//! Trajectory simulation under arbitrary controllers, seeded piecewise-constant
//! disturbances, and ensemble runs over every choice tuple.

use std::borrow::Cow;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{linear_index, Scenario, TupleIter};
use crate::numerics::{mat_exp, Matrix, Vector};
use crate::openloop::OpenLoopLaw;

/// Odd multiplier used to derive per-tuple seeds.
pub const SUBSEED_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

/// Default number of RK4 steps per horizon.
pub const DEFAULT_STEPS: usize = 2000;

/// Piecewise-constant Gaussian disturbance `n(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of each held sample.
    pub sigma: f64,
    /// Length of each hold interval.
    pub hold_interval: f64,
    pub seed: u64,
    /// Channels receiving noise; all channels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

impl NoiseConfig {
    pub fn new(sigma: f64, hold_interval: f64, seed: u64) -> Self {
        NoiseConfig {
            sigma,
            hold_interval,
            seed,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!(
                "noise sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if !(self.hold_interval > 0.0 && self.hold_interval.is_finite()) {
            return Err(Error::Domain(format!(
                "noise hold interval must be positive, got {}",
                self.hold_interval
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.len() != n {
                return Err(Error::Dimension(format!(
                    "noise mask has length {}, state dimension is {n}",
                    mask.len()
                )));
            }
        }
        Ok(())
    }

    /// Same configuration with the seed of the tuple at `linear_index`.
    pub fn for_tuple(&self, linear_index: usize) -> NoiseConfig {
        NoiseConfig {
            seed: self.seed ^ (linear_index as u64).wrapping_mul(SUBSEED_MULTIPLIER),
            ..self.clone()
        }
    }

    /// Index of the hold interval containing `t`.
    pub fn interval_index(&self, t: f64) -> i64 {
        (t / self.hold_interval + 1e-9).floor() as i64
    }

    /// The held sample for one interval, deterministic in (seed, interval, component).
    pub fn interval_sample(&self, interval: i64, n: usize) -> Vector {
        if self.sigma == 0.0 {
            return Vector::zeros(n);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(interval as u64);
        let mut v = Vector::from_iterator(
            n,
            (0..n).map(|_| self.sigma * rng.sample::<f64, _>(StandardNormal)),
        );
        if let Some(mask) = &self.mask {
            for (x, &on) in v.iter_mut().zip(mask) {
                if !on {
                    *x = 0.0;
                }
            }
        }
        v
    }
}

/// `n(t)` for a state of dimension `n`.
pub fn sample_noise(config: &NoiseConfig, n: usize, t: f64) -> Vector {
    config.interval_sample(config.interval_index(t), n)
}

/// Values on the uniform grid `start + k·spacing`, looked up by time.
#[derive(Debug, Clone)]
pub struct TimeGrid<T> {
    start: f64,
    spacing: f64,
    values: Vec<T>,
}

impl<T> TimeGrid<T> {
    pub fn new(start: f64, spacing: f64, values: Vec<T>) -> Self {
        TimeGrid {
            start,
            spacing,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + k as f64 * self.spacing
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// The value at `t` when `t` sits on a grid point.
    pub fn lookup(&self, t: f64) -> Option<&T> {
        let s = (t - self.start) / self.spacing;
        let k = s.round();
        if k < 0.0 || (s - k).abs() > 1e-6 {
            return None;
        }
        self.values.get(k as usize)
    }
}

impl<T: Send> TimeGrid<T> {
    /// Evaluates `f` at `count` grid points in parallel.
    pub fn build<F>(start: f64, spacing: f64, count: usize, f: F) -> Result<Self>
    where
        F: Fn(f64) -> Result<T> + Sync,
    {
        let values = (0..count)
            .into_par_iter()
            .map(|k| f(start + k as f64 * spacing))
            .collect::<Result<Vec<T>>>()?;
        Ok(TimeGrid {
            start,
            spacing,
            values,
        })
    }
}

/// `e^{-Aᵀt}` on a grid.
pub fn back_transpose_grid(
    a: &Matrix,
    start: f64,
    spacing: f64,
    count: usize,
) -> Result<TimeGrid<Matrix>> {
    TimeGrid::build(start, spacing, count, |t| Ok(mat_exp(a, -t)?.transpose()))
}

/// Per-agent affine control `u_l = −gain_l x + offset_l(i_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGains {
    pub gains: Vec<Matrix>,
    /// `offsets[l][i]` for agent `l` choosing `i`.
    pub offsets: Vec<Vec<Vector>>,
}

impl AffineGains {
    pub fn apply(&self, choices: &[usize], x: &Vector) -> Vec<Vector> {
        self.gains
            .iter()
            .zip(&self.offsets)
            .zip(choices)
            .map(|((g, off), &i)| &off[i] - g * x)
            .collect()
    }
}

/// A time-varying affine control law.
pub trait GainLaw: Send + Sync {
    fn gains(&self, t: f64) -> Result<AffineGains>;
}

impl GainLaw for OpenLoopLaw {
    fn gains(&self, t: f64) -> Result<AffineGains> {
        let n = self.system().state_dim();
        let counts = self.choice_counts();
        let offsets = (0..counts.len())
            .map(|l| {
                (0..counts[l])
                    .map(|i| self.control_value(l, i, t))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let gains = (0..counts.len())
            .map(|l| Matrix::zeros(self.system().input_dim(l), n))
            .collect();
        Ok(AffineGains { gains, offsets })
    }
}

/// A gain law with an optional precomputed grid; off-grid times fall back to direct evaluation.
#[derive(Clone)]
pub struct GainSource {
    law: Arc<dyn GainLaw>,
    grid: Option<Arc<TimeGrid<AffineGains>>>,
}

impl GainSource {
    pub fn direct(law: Arc<dyn GainLaw>) -> Self {
        GainSource { law, grid: None }
    }

    /// Precomputes gains at `start + k·spacing` for `k < count`.
    pub fn scheduled(
        law: Arc<dyn GainLaw>,
        start: f64,
        spacing: f64,
        count: usize,
    ) -> Result<Self> {
        let grid = TimeGrid::build(start, spacing, count, |t| law.gains(t))?;
        Ok(GainSource {
            law,
            grid: Some(Arc::new(grid)),
        })
    }

    pub fn grid(&self) -> Option<&TimeGrid<AffineGains>> {
        self.grid.as_deref()
    }

    pub fn at(&self, t: f64) -> Result<Cow<'_, AffineGains>> {
        if let Some(g) = self.grid.as_ref().and_then(|g| g.lookup(t)) {
            return Ok(Cow::Borrowed(g));
        }
        self.law.gains(t).map(Cow::Owned)
    }
}

/// Supplies every agent's control during one simulation run.
pub trait Controller {
    /// Called once at the start of each integration step, before any control evaluation.
    fn on_step(&mut self, _t: f64, _x: &Vector) -> Result<()> {
        Ok(())
    }

    fn control(&mut self, t: f64, x: &Vector) -> Result<Vec<Vector>>;
}

/// Builds one controller per choice tuple.
pub trait ControllerFamily: Sync {
    type Ctrl: Controller;

    fn controller(&self, choices: &[usize]) -> Result<Self::Ctrl>;
}

/// Affine-gain controller for a fixed choice tuple.
#[derive(Clone)]
pub struct AffineController {
    source: GainSource,
    choices: Vec<usize>,
}

impl AffineController {
    pub fn new(source: GainSource, choices: Vec<usize>) -> Self {
        AffineController { source, choices }
    }
}

impl Controller for AffineController {
    fn control(&mut self, t: f64, x: &Vector) -> Result<Vec<Vector>> {
        Ok(self.source.at(t)?.apply(&self.choices, x))
    }
}

/// Family of [`AffineController`]s sharing one gain source.
#[derive(Clone)]
pub struct AffineFamily {
    pub source: GainSource,
}

impl AffineFamily {
    pub fn new(source: GainSource) -> Self {
        AffineFamily { source }
    }

    /// Gains precomputed on the half-step grid of an RK4 run with `steps` steps.
    pub fn scheduled(law: Arc<dyn GainLaw>, t0: f64, t_final: f64, steps: usize) -> Result<Self> {
        let spacing = (t_final - t0) / (2 * steps) as f64;
        Ok(AffineFamily {
            source: GainSource::scheduled(law, t0, spacing, 2 * steps + 1)?,
        })
    }
}

impl ControllerFamily for AffineFamily {
    type Ctrl = AffineController;

    fn controller(&self, choices: &[usize]) -> Result<AffineController> {
        Ok(AffineController::new(self.source.clone(), choices.to_vec()))
    }
}

/// Open-loop controller evaluating `B_lᵀ e^{-Aᵀt} P_l^{i_l}`.
#[derive(Clone)]
pub struct OpenLoopController {
    law: Arc<OpenLoopLaw>,
    back: Option<Arc<TimeGrid<Matrix>>>,
    choices: Vec<usize>,
}

impl OpenLoopController {
    pub fn new(
        law: Arc<OpenLoopLaw>,
        back: Option<Arc<TimeGrid<Matrix>>>,
        choices: Vec<usize>,
    ) -> Self {
        OpenLoopController { law, back, choices }
    }
}

impl Controller for OpenLoopController {
    fn control(&mut self, t: f64, _x: &Vector) -> Result<Vec<Vector>> {
        match self.back.as_ref().and_then(|g| g.lookup(t)) {
            Some(back) => Ok(self
                .choices
                .iter()
                .enumerate()
                .map(|(l, &i)| self.law.control_with(l, i, back))
                .collect()),
            None => self.law.controls(&self.choices, t),
        }
    }
}

/// Family of open-loop controllers for one synthesized law.
#[derive(Clone)]
pub struct OpenLoopFamily {
    law: Arc<OpenLoopLaw>,
    back: Option<Arc<TimeGrid<Matrix>>>,
}

impl OpenLoopFamily {
    pub fn new(law: OpenLoopLaw) -> Self {
        OpenLoopFamily {
            law: Arc::new(law),
            back: None,
        }
    }

    /// Caches `e^{-Aᵀt}` on the half-step grid of an RK4 run with `steps` steps.
    pub fn scheduled(law: OpenLoopLaw, steps: usize) -> Result<Self> {
        let (t0, t_final) = law.horizon();
        let spacing = (t_final - t0) / (2 * steps) as f64;
        let back = back_transpose_grid(law.system().a(), t0, spacing, 2 * steps + 1)?;
        Ok(OpenLoopFamily {
            law: Arc::new(law),
            back: Some(Arc::new(back)),
        })
    }

    pub fn law(&self) -> &OpenLoopLaw {
        &self.law
    }
}

impl ControllerFamily for OpenLoopFamily {
    type Ctrl = OpenLoopController;

    fn controller(&self, choices: &[usize]) -> Result<OpenLoopController> {
        Ok(OpenLoopController::new(
            self.law.clone(),
            self.back.clone(),
            choices.to_vec(),
        ))
    }
}

/// Integration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub steps: usize,
    /// Keep every sample; otherwise only the endpoints are stored.
    pub record: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            steps: DEFAULT_STEPS,
            record: true,
        }
    }
}

/// Sampled state and control paths of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub choices: Vec<usize>,
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    /// `controls[k][l]` is agent `l`'s control at `times[k]`.
    pub controls: Vec<Vec<Vector>>,
    pub terminal_state: Vector,
    /// `x(T) − H_{choices}`.
    pub terminal_error: Vector,
    /// Trapezoidal `Σ_l ∫ |u_l|² dt` over the step grid.
    pub measured_cost: f64,
}

fn energy(us: &[Vector]) -> f64 {
    us.iter().map(|u| u.norm_squared()).sum()
}

fn check_controls(scenario: &Scenario, us: &[Vector], t: f64) -> Result<()> {
    let sys = &scenario.system;
    if us.len() != sys.agents() {
        return Err(Error::Dimension(format!(
            "controller returned {} controls for {} agents",
            us.len(),
            sys.agents()
        )));
    }
    for (l, u) in us.iter().enumerate() {
        if u.len() != sys.input_dim(l) {
            return Err(Error::Dimension(format!(
                "control of agent {l} has length {}, expected {}",
                u.len(),
                sys.input_dim(l)
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite control of agent {l} at t = {t}"
            )));
        }
    }
    Ok(())
}

/// Integrates `ẋ = Ax + Σ B_l u_l + n(t)` with fixed-step RK4.
///
/// Noise is held at its value at the start of each step for all four stages.
pub fn simulate<C: Controller + ?Sized>(
    scenario: &Scenario,
    controller: &mut C,
    choices: &[usize],
    noise: Option<&NoiseConfig>,
    opts: &SimOptions,
) -> Result<Trajectory> {
    scenario.validate()?;
    let dims = scenario.targets.dims();
    if choices.len() != dims.len() || choices.iter().zip(dims).any(|(&i, &d)| i >= d) {
        return Err(Error::Domain(format!(
            "choice tuple {choices:?} invalid for dims {dims:?}"
        )));
    }
    if opts.steps == 0 {
        return Err(Error::Config(
            "at least one integration step is required".into(),
        ));
    }
    let n = scenario.system.state_dim();
    if let Some(cfg) = noise {
        cfg.validate(n)?;
    }
    let sys = &scenario.system;
    let (t0, t_final) = (scenario.t0, scenario.t_final);
    let h = (t_final - t0) / opts.steps as f64;

    let mut x = scenario.x0.clone();
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let mut cost = 0.0;
    let mut prev_energy: Option<f64> = None;
    let mut held: Option<(i64, Vector)> = None;

    for k in 0..opts.steps {
        let t = t0 + k as f64 * h;
        controller.on_step(t, &x)?;
        let w = match noise {
            Some(cfg) => {
                let idx = cfg.interval_index(t);
                if held.as_ref().map(|(i, _)| *i) != Some(idx) {
                    held = Some((idx, cfg.interval_sample(idx, n)));
                }
                held.as_ref().map(|(_, v)| v.clone())
            }
            None => None,
        };
        let rhs = |x: &Vector, us: &[Vector]| {
            let mut d = sys.drift(x, us);
            if let Some(w) = &w {
                d += w;
            }
            d
        };

        let u1 = controller.control(t, &x)?;
        check_controls(scenario, &u1, t)?;
        let e1 = energy(&u1);
        if let Some(prev) = prev_energy {
            cost += 0.5 * h * (prev + e1);
        }
        prev_energy = Some(e1);
        if opts.record || k == 0 {
            times.push(t);
            states.push(x.clone());
            controls.push(u1.clone());
        }

        let th = t + 0.5 * h;
        let k1 = rhs(&x, &u1);
        let x2 = &x + &k1 * (0.5 * h);
        let u2 = controller.control(th, &x2)?;
        let k2 = rhs(&x2, &u2);
        let x3 = &x + &k2 * (0.5 * h);
        let u3 = controller.control(th, &x3)?;
        let k3 = rhs(&x3, &u3);
        let x4 = &x + &k3 * h;
        let t_next = t0 + (k + 1) as f64 * h;
        let u4 = controller.control(t_next, &x4)?;
        let k4 = rhs(&x4, &u4);
        x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "state became non-finite at step {k} (t = {t_next})"
            )));
        }
    }

    let u_end = controller.control(t_final, &x)?;
    check_controls(scenario, &u_end, t_final)?;
    let e_end = energy(&u_end);
    if let Some(prev) = prev_energy {
        cost += 0.5 * h * (prev + e_end);
    }
    times.push(t_final);
    states.push(x.clone());
    controls.push(u_end);

    let terminal_error = &x - scenario.targets.get(choices);
    Ok(Trajectory {
        choices: choices.to_vec(),
        times,
        states,
        controls,
        terminal_state: x,
        terminal_error,
        measured_cost: cost,
    })
}

/// Per-tuple outcome of an ensemble run.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleSummary {
    pub choices: Vec<usize>,
    pub terminal_state: Vector,
    pub terminal_error: Vector,
    pub measured_cost: f64,
    /// Noise seed used for this tuple.
    pub seed: Option<u64>,
}

/// Outcome of simulating every choice tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub tuples: Vec<TupleSummary>,
    /// Mean over tuples of the measured cost; equals the per-agent choice average under uniform choices.
    pub average_cost: f64,
    /// Largest `‖x(T) − H‖∞` over tuples.
    pub max_terminal_error: f64,
    /// Full trajectories, in tuple order, when recorded.
    pub trajectories: Vec<Trajectory>,
}

/// Simulates every choice tuple; tuples run in parallel with per-tuple noise seeds.
pub fn run_ensemble<F: ControllerFamily>(
    scenario: &Scenario,
    family: &F,
    noise: Option<&NoiseConfig>,
    opts: &SimOptions,
) -> Result<EnsembleReport> {
    let dims = scenario.targets.dims().to_vec();
    let tuples: Vec<Vec<usize>> = TupleIter::new(&dims).collect();
    let runs = tuples
        .par_iter()
        .map(|choices| {
            let cfg = noise.map(|c| c.for_tuple(linear_index(&dims, choices)));
            let mut ctrl = family.controller(choices)?;
            let traj = simulate(scenario, &mut ctrl, choices, cfg.as_ref(), opts)
                .map_err(|e| annotate(e, choices))?;
            Ok((traj, cfg.map(|c| c.seed)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summaries = Vec::with_capacity(runs.len());
    let mut trajectories = Vec::with_capacity(runs.len());
    let mut total = 0.0;
    let mut worst: f64 = 0.0;
    for (traj, seed) in runs {
        total += traj.measured_cost;
        worst = worst.max(traj.terminal_error.amax());
        summaries.push(TupleSummary {
            choices: traj.choices.clone(),
            terminal_state: traj.terminal_state.clone(),
            terminal_error: traj.terminal_error.clone(),
            measured_cost: traj.measured_cost,
            seed,
        });
        if opts.record {
            trajectories.push(traj);
        }
    }
    Ok(EnsembleReport {
        average_cost: total / summaries.len() as f64,
        max_terminal_error: worst,
        tuples: summaries,
        trajectories,
    })
}

fn annotate(e: Error, choices: &[usize]) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("tuple {choices:?}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearSystem, TargetTensor};
    use crate::openloop::synthesize;

    struct Zero(usize);

    impl Controller for Zero {
        fn control(&mut self, _t: f64, _x: &Vector) -> Result<Vec<Vector>> {
            Ok(vec![Vector::zeros(1); self.0])
        }
    }

    fn rendezvous() -> Scenario {
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let sys = LinearSystem::new(a, vec![b.clone(), -b]).unwrap();
        let h = TargetTensor::padded(vec![2, 2], &[10.0, 0.0, 0.0, -10.0], 2).unwrap();
        Scenario::new(sys, 0.0, 1.0, Vector::from_vec(vec![5.0, 0.0]), h).unwrap()
    }

    #[test]
    fn drift_free_zero_control_is_constant() {
        let sys = LinearSystem::new(
            Matrix::zeros(2, 2),
            vec![Matrix::identity(2, 2).columns(0, 1).into_owned()],
        )
        .unwrap();
        let s = Scenario::new(
            sys,
            0.0,
            2.0,
            Vector::from_vec(vec![1.5, -2.0]),
            TargetTensor::padded(vec![1], &[0.0], 2).unwrap(),
        )
        .unwrap();
        let tr = simulate(
            &s,
            &mut Zero(1),
            &[0],
            None,
            &SimOptions {
                steps: 50,
                record: true,
            },
        )
        .unwrap();
        assert_eq!(tr.times.len(), 51);
        assert!(tr.states.iter().all(|x| x == &s.x0));
        assert_eq!(tr.measured_cost, 0.0);
    }

    #[test]
    fn rendezvous_open_loop_reaches_target() {
        let s = rendezvous();
        let law = synthesize(&s).unwrap();
        let fam = OpenLoopFamily::scheduled(law, DEFAULT_STEPS).unwrap();
        let mut c = fam.controller(&[0, 0]).unwrap();
        let tr = simulate(&s, &mut c, &[0, 0], None, &SimOptions::default()).unwrap();
        assert!((tr.terminal_state[0] - 10.0).abs() < 1e-9);
        assert!(tr.terminal_state[1].abs() < 1e-9);
        // ∫ 2(15 − 30t)² dt over [0, 1] = 150
        assert!((tr.measured_cost - 150.0).abs() < 1e-4);
    }

    #[test]
    fn scheduled_and_direct_open_loop_agree() {
        let s = rendezvous();
        let law = synthesize(&s).unwrap();
        let opts = SimOptions {
            steps: 100,
            record: false,
        };
        let a = simulate(
            &s,
            &mut OpenLoopFamily::new(law.clone())
                .controller(&[1, 0])
                .unwrap(),
            &[1, 0],
            None,
            &opts,
        )
        .unwrap();
        let b = simulate(
            &s,
            &mut OpenLoopFamily::scheduled(law, 100)
                .unwrap()
                .controller(&[1, 0])
                .unwrap(),
            &[1, 0],
            None,
            &opts,
        )
        .unwrap();
        assert!((a.terminal_state - b.terminal_state).amax() < 1e-12);
    }

    #[test]
    fn noise_zero_sigma_is_zero() {
        let cfg = NoiseConfig::new(0.0, 0.01, 9);
        assert_eq!(sample_noise(&cfg, 3, 0.37), Vector::zeros(3));
    }

    #[test]
    fn noise_is_deterministic_and_held() {
        let cfg = NoiseConfig::new(0.5, 0.1, 42);
        assert_eq!(sample_noise(&cfg, 2, 0.31), sample_noise(&cfg, 2, 0.39));
        assert_ne!(sample_noise(&cfg, 2, 0.31), sample_noise(&cfg, 2, 0.41));
        let other = NoiseConfig::new(0.5, 0.1, 43);
        assert_ne!(sample_noise(&cfg, 2, 0.31), sample_noise(&other, 2, 0.31));
    }

    #[test]
    fn noise_mask_zeroes_channels() {
        let cfg = NoiseConfig::new(1.0, 0.1, 1).with_mask(vec![false, true]);
        for k in 0..20 {
            let v = cfg.interval_sample(k, 2);
            assert_eq!(v[0], 0.0);
            assert!(v[1] != 0.0);
        }
        assert!(cfg.validate(3).is_err());
    }

    #[test]
    fn noise_empirical_variance() {
        let cfg = NoiseConfig::new(0.5, 1.0, 7);
        let m = 100_000;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for k in 0..m {
            let v = cfg.interval_sample(k, 1)[0];
            s += v;
            s2 += v * v;
        }
        let mean = s / m as f64;
        let var = s2 / m as f64 - mean * mean;
        assert!((var / 0.25 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn tuple_subseeds_differ() {
        let cfg = NoiseConfig::new(1.0, 0.1, 5);
        assert_eq!(cfg.for_tuple(0).seed, 5);
        assert_ne!(cfg.for_tuple(1).seed, cfg.for_tuple(2).seed);
    }

    #[test]
    fn noisy_runs_repeat_bitwise() {
        let s = rendezvous();
        let fam = OpenLoopFamily::scheduled(synthesize(&s).unwrap(), 200).unwrap();
        let cfg = NoiseConfig::new(0.5, 0.01, 42);
        let opts = SimOptions {
            steps: 200,
            record: true,
        };
        let a = run_ensemble(&s, &fam, Some(&cfg), &opts).unwrap();
        let b = run_ensemble(&s, &fam, Some(&cfg), &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.max_terminal_error > 0.0);
    }

    #[test]
    fn time_grid_lookup() {
        let g = TimeGrid::new(1.0, 0.25, vec![0, 1, 2, 3]);
        assert_eq!(g.lookup(1.5), Some(&2));
        assert_eq!(g.lookup(1.6), None);
        assert_eq!(g.lookup(2.0), None);
        assert_eq!(g.lookup(0.75), None);
    }

    #[test]
    fn bad_choices_rejected() {
        let s = rendezvous();
        assert!(simulate(&s, &mut Zero(2), &[2, 0], None, &SimOptions::default()).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        struct Huge;
        impl Controller for Huge {
            fn control(&mut self, _t: f64, x: &Vector) -> Result<Vec<Vector>> {
                Ok(vec![
                    Vector::from_element(1, x[1].abs() * 1e300 + 1e300),
                    Vector::zeros(1),
                ])
            }
        }
        let s = rendezvous();
        let err = simulate(
            &s,
            &mut Huge,
            &[0, 0],
            None,
            &SimOptions {
                steps: 10,
                record: false,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
