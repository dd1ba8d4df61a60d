//! Two-agent target-achieving state feedback and the hybrid controller that
//! switches to a freshly synthesized open-loop tail before the feedback gains
//! become singular at the terminal time.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{compatibility_residual, is_compatible, Scenario};
use crate::numerics::{gramian, gramian_block, mat_exp, Matrix, SpdFactor, Vector};
use crate::openloop::{synthesize, OpenLoopLaw};
use crate::sim::{
    back_transpose_grid, AffineGains, Controller, ControllerFamily, GainLaw, GainSource, TimeGrid,
};

/// Gains are refused within this fraction of the horizon from the terminal time.
pub const HORIZON_GUARD_FRACTION: f64 = 1e-6;

/// Default switch time as a fraction of the horizon.
pub const DEFAULT_SWITCH_FRACTION: f64 = 0.6;

/// How remaining-horizon Gramians are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GramianRoute {
    /// Adaptive composite Gauss–Legendre quadrature.
    #[default]
    Quadrature,
    /// One exponential of the augmented block matrix.
    Block,
}

/// `∫_t^T e^{-As} B Bᵀ e^{-Aᵀs} ds`, zero when `t ≥ T`.
pub fn remaining_gramian(
    a: &Matrix,
    b: &Matrix,
    t: f64,
    t_final: f64,
    route: GramianRoute,
) -> Result<Matrix> {
    if t >= t_final {
        let n = a.nrows();
        return Ok(Matrix::zeros(n, n));
    }
    let g = match route {
        GramianRoute::Quadrature => gramian(a, b, t, t_final)?,
        GramianRoute::Block => gramian_block(a, b, t, t_final)?,
    };
    Ok(g.value)
}

/// `t0 + 0.6 (T − t0)`.
pub fn default_switch_time(t0: f64, t_final: f64) -> f64 {
    t0 + DEFAULT_SWITCH_FRACTION * (t_final - t0)
}

fn require_two_agents(scenario: &Scenario) -> Result<()> {
    if scenario.system.agents() != 2 {
        return Err(Error::Config(format!(
            "two-agent law requested for a system with {} agents",
            scenario.system.agents()
        )));
    }
    Ok(())
}

fn mean<'a>(vs: impl Iterator<Item = &'a Vector>, n: usize) -> Vector {
    let mut acc = Vector::zeros(n);
    let mut count = 0usize;
    for v in vs {
        acc += v;
        count += 1;
    }
    acc / count as f64
}

/// Feedback law `u_i = −BᵀK(t)x + L_ui(t)`, `v_j = −CᵀK(t)x + L_vj(t)`.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    t0: f64,
    t_final: f64,
    guard: f64,
    route: GramianRoute,
    /// `e^{-AT} H_{i,0}`.
    g_u: Vec<Vector>,
    /// `e^{-AT} H_{0,j}`.
    g_v: Vec<Vector>,
    /// `mean_j e^{-AT}(H_{0,j} − H_{0,0})`.
    shift_v: Vector,
    /// `mean_i e^{-AT}(H_{i,0} − H_{0,0})`.
    shift_u: Vector,
    /// `mean_i e^{-AT} H_{i,0}`.
    mean_u: Vector,
    /// `mean_j e^{-AT} H_{0,j}`.
    mean_v: Vector,
}

impl FeedbackLaw {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        require_two_agents(scenario)?;
        let h = &scenario.targets;
        if !is_compatible(h, None) {
            return Err(Error::Incompatible {
                residual: compatibility_residual(h),
            });
        }
        let sys = &scenario.system;
        let n = sys.state_dim();
        let back = mat_exp(sys.a(), -scenario.t_final)?;
        let dims = h.dims();
        let g_u: Vec<Vector> = (0..dims[0]).map(|i| &back * h.get(&[i, 0])).collect();
        let g_v: Vec<Vector> = (0..dims[1]).map(|j| &back * h.get(&[0, j])).collect();
        let base = &back * h.get(&[0, 0]);
        let mean_u = mean(g_u.iter(), n);
        let mean_v = mean(g_v.iter(), n);
        Ok(FeedbackLaw {
            a: sys.a().clone(),
            b: sys.input(0).clone(),
            c: sys.input(1).clone(),
            t0: scenario.t0,
            t_final: scenario.t_final,
            guard: HORIZON_GUARD_FRACTION * scenario.horizon(),
            route: GramianRoute::Quadrature,
            shift_u: &mean_u - &base,
            shift_v: &mean_v - &base,
            g_u,
            g_v,
            mean_u,
            mean_v,
        })
    }

    pub fn with_route(mut self, route: GramianRoute) -> Self {
        self.route = route;
        self
    }

    pub fn guard(&self) -> f64 {
        self.guard
    }

    pub fn choice_counts(&self) -> (usize, usize) {
        (self.g_u.len(), self.g_v.len())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < self.t0 - 1e-12 * (self.t_final - self.t0) {
            return Err(Error::Domain(format!(
                "t = {t} precedes the initial time {}",
                self.t0
            )));
        }
        if self.t_final - t < self.guard {
            return Err(Error::HorizonExhausted {
                t,
                guard: self.guard,
            });
        }
        Ok(())
    }

    /// `(W̄_B(t), W̄_C(t))` over `[t, T]`.
    pub fn remaining_gramians(&self, t: f64) -> Result<(Matrix, Matrix)> {
        self.check_time(t)?;
        Ok((
            remaining_gramian(&self.a, &self.b, t, self.t_final, self.route)?,
            remaining_gramian(&self.a, &self.c, t, self.t_final, self.route)?,
        ))
    }

    /// `K(t) = e^{-Aᵀt}(W̄_B + W̄_C)⁻¹e^{-At}`.
    pub fn gain_k(&self, t: f64) -> Result<Matrix> {
        Ok(self.evaluate(t)?.k)
    }

    /// `(L_ui(t), L_vj(t))`.
    pub fn offsets(&self, i: usize, j: usize, t: f64) -> Result<(Vector, Vector)> {
        self.check_choices(i, j)?;
        let ev = self.evaluate(t)?;
        Ok((ev.offset_u(self, i), ev.offset_v(self, j)))
    }

    /// `(−BᵀK x + L_ui, −CᵀK x + L_vj)`.
    pub fn feedback_control(
        &self,
        i: usize,
        j: usize,
        t: f64,
        x: &Vector,
    ) -> Result<(Vector, Vector)> {
        self.check_choices(i, j)?;
        let ev = self.evaluate(t)?;
        let kx = &ev.k * x;
        Ok((
            ev.offset_u(self, i) - self.b.transpose() * &kx,
            ev.offset_v(self, j) - self.c.transpose() * &kx,
        ))
    }

    fn check_choices(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.g_u.len() || j >= self.g_v.len() {
            return Err(Error::Domain(format!(
                "choice pair ({i}, {j}) out of range"
            )));
        }
        Ok(())
    }

    fn evaluate(&self, t: f64) -> Result<Evaluation> {
        let (wb, wc) = self.remaining_gramians(t)?;
        let w = &wb + &wc;
        let fb = SpdFactor::new(&wb, "remaining gramian of agent 0")?;
        let fc = SpdFactor::new(&wc, "remaining gramian of agent 1")?;
        let fw = SpdFactor::new(&w, "combined remaining gramian")?;
        let fwd = mat_exp(&self.a, -t)?;
        let back_t = fwd.transpose();
        let k = &back_t * fw.solve(&fwd);
        // (I + W̄_C⁻¹W̄_B)⁻¹(W̄_C⁻¹ a − W̄_B⁻¹ b) = W̄⁻¹(a − W̄_C W̄_B⁻¹ b)
        let common_u = fw.solve_vec(&(&self.shift_v - &wc * fb.solve_vec(&self.mean_u)));
        let common_v = fw.solve_vec(&(&self.shift_u - &wb * fc.solve_vec(&self.mean_v)));
        Ok(Evaluation {
            k,
            back_t,
            fb,
            fc,
            common_u,
            common_v,
        })
    }
}

struct Evaluation {
    k: Matrix,
    back_t: Matrix,
    fb: SpdFactor,
    fc: SpdFactor,
    common_u: Vector,
    common_v: Vector,
}

impl Evaluation {
    fn offset_u(&self, law: &FeedbackLaw, i: usize) -> Vector {
        law.b.transpose() * (&self.back_t * (self.fb.solve_vec(&law.g_u[i]) + &self.common_u))
    }

    fn offset_v(&self, law: &FeedbackLaw, j: usize) -> Vector {
        law.c.transpose() * (&self.back_t * (self.fc.solve_vec(&law.g_v[j]) + &self.common_v))
    }
}

impl GainLaw for FeedbackLaw {
    fn gains(&self, t: f64) -> Result<AffineGains> {
        let ev = self.evaluate(t)?;
        Ok(AffineGains {
            gains: vec![self.b.transpose() * &ev.k, self.c.transpose() * &ev.k],
            offsets: vec![
                (0..self.g_u.len()).map(|i| ev.offset_u(self, i)).collect(),
                (0..self.g_v.len()).map(|j| ev.offset_v(self, j)).collect(),
            ],
        })
    }
}

/// Which phase a hybrid controller is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HybridMode {
    Feedback,
    OpenLoop,
}

/// Feedback until the switch time, then an open-loop law synthesized from the measured state.
pub struct HybridController {
    feedback: GainSource,
    choices: Vec<usize>,
    switch_time: f64,
    template: Scenario,
    back: Option<Arc<TimeGrid<Matrix>>>,
    tail: Option<OpenLoopLaw>,
}

impl HybridController {
    pub fn mode(&self) -> HybridMode {
        if self.tail.is_some() {
            HybridMode::OpenLoop
        } else {
            HybridMode::Feedback
        }
    }

    pub fn switch_time(&self) -> f64 {
        self.switch_time
    }

    /// The open-loop tail, once the switch has happened.
    pub fn tail(&self) -> Option<&OpenLoopLaw> {
        self.tail.as_ref()
    }

    fn switch_tolerance(&self) -> f64 {
        1e-9 * self.template.horizon()
    }

    /// Synthesizes the open-loop tail from state `x` at time `t`.
    pub fn switch_now(&mut self, t: f64, x: &Vector) -> Result<()> {
        let mut tail = self.template.clone();
        tail.t0 = t;
        tail.x0 = x.clone();
        self.tail = Some(synthesize(&tail)?);
        Ok(())
    }
}

impl Controller for HybridController {
    fn on_step(&mut self, t: f64, x: &Vector) -> Result<()> {
        if self.tail.is_none() && t >= self.switch_time - self.switch_tolerance() {
            self.switch_now(t, x)?;
        }
        Ok(())
    }

    fn control(&mut self, t: f64, x: &Vector) -> Result<Vec<Vector>> {
        match &self.tail {
            Some(law) => match self.back.as_ref().and_then(|g| g.lookup(t)) {
                Some(back) => Ok(self
                    .choices
                    .iter()
                    .enumerate()
                    .map(|(l, &i)| law.control_with(l, i, back))
                    .collect()),
                None => law.controls(&self.choices, t),
            },
            None => Ok(self.feedback.at(t)?.apply(&self.choices, x)),
        }
    }
}

fn tail_template(scenario: &Scenario) -> Scenario {
    let mut s = scenario.clone();
    s.switch_time = None;
    s.noise = None;
    s.penalty_weight = None;
    s
}

fn require_switch(scenario: &Scenario) -> Result<f64> {
    scenario
        .switch_time
        .ok_or_else(|| Error::Config("hybrid control needs a switch time".into()))
}

/// Hybrid controller for choice pair `(i, j)` with directly evaluated gains.
pub fn make_hybrid(scenario: &Scenario, i: usize, j: usize) -> Result<HybridController> {
    HybridFamily::new(scenario)?.controller(&[i, j])
}

/// Hybrid controllers for every choice pair, sharing precomputed gains.
#[derive(Clone)]
pub struct HybridFamily {
    feedback: GainSource,
    switch_time: f64,
    template: Scenario,
    back: Option<Arc<TimeGrid<Matrix>>>,
    dims: (usize, usize),
}

impl HybridFamily {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let switch_time = require_switch(scenario)?;
        let law = FeedbackLaw::new(scenario)?;
        let dims = law.choice_counts();
        Ok(HybridFamily {
            feedback: GainSource::direct(Arc::new(law)),
            switch_time,
            template: tail_template(scenario),
            back: None,
            dims,
        })
    }

    /// Precomputes feedback gains and `e^{-Aᵀt}` on the half-step grid of an RK4 run.
    pub fn scheduled(scenario: &Scenario, steps: usize) -> Result<Self> {
        let switch_time = require_switch(scenario)?;
        let law = FeedbackLaw::new(scenario)?.with_route(GramianRoute::Block);
        let dims = law.choice_counts();
        let h = scenario.horizon() / steps as f64;
        let switch_steps = ((switch_time - scenario.t0) / h - 1e-9).ceil().max(0.0) as usize;
        let spacing = 0.5 * h;
        let feedback =
            GainSource::scheduled(Arc::new(law), scenario.t0, spacing, 2 * switch_steps + 1)?;
        let back = back_transpose_grid(scenario.system.a(), scenario.t0, spacing, 2 * steps + 1)?;
        Ok(HybridFamily {
            feedback,
            switch_time,
            template: tail_template(scenario),
            back: Some(Arc::new(back)),
            dims,
        })
    }

    pub fn switch_time(&self) -> f64 {
        self.switch_time
    }
}

impl ControllerFamily for HybridFamily {
    type Ctrl = HybridController;

    fn controller(&self, choices: &[usize]) -> Result<HybridController> {
        if choices.len() != 2 || choices[0] >= self.dims.0 || choices[1] >= self.dims.1 {
            return Err(Error::Domain(format!(
                "choice tuple {choices:?} out of range"
            )));
        }
        Ok(HybridController {
            feedback: self.feedback.clone(),
            choices: choices.to_vec(),
            switch_time: self.switch_time,
            template: self.template.clone(),
            back: self.back.clone(),
            tail: None,
        })
    }
}
