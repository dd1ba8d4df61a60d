//! Target-approaching feedback for arbitrary (possibly incompatible) two-agent
//! target matrices: control energy plus an `f`-weighted terminal-error penalty.
//!
//! With `N` the constant core matrix, `W̄_B`, `W̄_C` the remaining-horizon
//! Gramians over `[t, T]` and `W̄ = W̄_B + W̄_C`, the law is
//!
//! ```text
//! K_u(t)  = f Bᵀe^{-Aᵀt} (N + fW̄_B)⁻¹ [I − fW̄_C (N + fW̄)⁻¹] e^{-At}
//! L_ui(t) = −f Bᵀe^{-Aᵀt} (N + fW̄_B)⁻¹ [ f/(N_uN_v) W̄_C (N + fW̄)⁻¹ R ΣΣH − R Σ_j H_ij / N_v ]
//! ```
//!
//! and symmetrically for the second agent, where `R` propagates targets back
//! from the terminal time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{remaining_gramian, GramianRoute, HORIZON_GUARD_FRACTION};
use crate::model::{Scenario, TargetTensor};
use crate::numerics::{gramian, mat_exp, Matrix, SpdFactor, Vector};
use crate::sim::{AffineGains, GainLaw};

/// Penalty weight used when a scenario supplies none.
pub const DEFAULT_PENALTY: f64 = 1e3;

/// Interpretation of the constant core matrix `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoreMode {
    /// `N = e^{-(A+Aᵀ)T}`.
    AsPrinted,
    /// `N = e^{-AT} e^{-AᵀT}`; the exact optimum of the penalized problem.
    #[default]
    Product,
}

impl CoreMode {
    pub const ALL: [CoreMode; 2] = [CoreMode::AsPrinted, CoreMode::Product];

    pub fn name(self) -> &'static str {
        match self {
            CoreMode::AsPrinted => "as-printed",
            CoreMode::Product => "product",
        }
    }
}

impl fmt::Display for CoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-printed" | "as_printed" => Ok(CoreMode::AsPrinted),
            "product" => Ok(CoreMode::Product),
            other => Err(Error::Config(format!(
                "unknown core mode '{other}', expected 'as-printed' or 'product'"
            ))),
        }
    }
}

/// Which exponential propagates target sums in the offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetMode {
    /// `e^{-AT}` on every target term.
    #[default]
    Terminal,
    /// `e^{-At}` on the first agent's target terms, `e^{-AT}` on the second's.
    AsPrinted,
}

impl OffsetMode {
    pub fn name(self) -> &'static str {
        match self {
            OffsetMode::Terminal => "terminal",
            OffsetMode::AsPrinted => "as-printed",
        }
    }
}

impl fmt::Display for OffsetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OffsetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "terminal" => Ok(OffsetMode::Terminal),
            "as-printed" | "as_printed" => Ok(OffsetMode::AsPrinted),
            other => Err(Error::Config(format!(
                "unknown offset mode '{other}', expected 'terminal' or 'as-printed'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproachOptions {
    pub core: CoreMode,
    pub offsets: OffsetMode,
}

/// `N` for the given horizon end and interpretation.
pub fn core_matrix(a: &Matrix, t_final: f64, mode: CoreMode) -> Result<Matrix> {
    match mode {
        CoreMode::AsPrinted => mat_exp(&(a + a.transpose()), -t_final),
        CoreMode::Product => {
            let back = mat_exp(a, -t_final)?;
            Ok(&back * back.transpose())
        }
    }
}

/// Large-`f` limit of the approach gains.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitGains {
    /// `e^{-Aᵀt} W̄⁻¹ e^{-At}` (n×n).
    pub k: Matrix,
    pub offsets_u: Vec<Vector>,
    pub offsets_v: Vec<Vector>,
}

/// Penalized two-agent feedback law.
#[derive(Debug, Clone)]
pub struct ApproachLaw {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    t0: f64,
    t_final: f64,
    f: f64,
    core: Matrix,
    options: ApproachOptions,
    route: GramianRoute,
    back_terminal: Matrix,
    /// `Σ_j H_ij` per `i`.
    row_sums: Vec<Vector>,
    /// `Σ_i H_ij` per `j`.
    col_sums: Vec<Vector>,
    total: Vector,
}

fn target_sums(h: &TargetTensor) -> (Vec<Vector>, Vec<Vector>, Vector) {
    let (nu, nv) = (h.dims()[0], h.dims()[1]);
    let n = h.vector_dim();
    let mut rows = vec![Vector::zeros(n); nu];
    let mut cols = vec![Vector::zeros(n); nv];
    for i in 0..nu {
        for j in 0..nv {
            let v = h.get(&[i, j]);
            rows[i] += v;
            cols[j] += v;
        }
    }
    let total = rows.iter().fold(Vector::zeros(n), |acc, r| acc + r);
    (rows, cols, total)
}

impl ApproachLaw {
    /// Uses the scenario's penalty weight, or [`DEFAULT_PENALTY`].
    pub fn from_scenario(scenario: &Scenario, options: ApproachOptions) -> Result<Self> {
        Self::new(
            scenario,
            scenario.penalty_weight.unwrap_or(DEFAULT_PENALTY),
            options,
        )
    }

    pub fn new(scenario: &Scenario, f: f64, options: ApproachOptions) -> Result<Self> {
        scenario.validate()?;
        if scenario.system.agents() != 2 {
            return Err(Error::Config(format!(
                "penalized law requested for a system with {} agents",
                scenario.system.agents()
            )));
        }
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::Domain(format!(
                "penalty weight must be positive, got {f}"
            )));
        }
        let sys = &scenario.system;
        let (row_sums, col_sums, total) = target_sums(&scenario.targets);
        Ok(ApproachLaw {
            a: sys.a().clone(),
            b: sys.input(0).clone(),
            c: sys.input(1).clone(),
            t0: scenario.t0,
            t_final: scenario.t_final,
            f,
            core: core_matrix(sys.a(), scenario.t_final, options.core)?,
            options,
            route: GramianRoute::Quadrature,
            back_terminal: mat_exp(sys.a(), -scenario.t_final)?,
            row_sums,
            col_sums,
            total,
        })
    }

    pub fn with_route(mut self, route: GramianRoute) -> Self {
        self.route = route;
        self
    }

    pub fn penalty(&self) -> f64 {
        self.f
    }

    pub fn options(&self) -> ApproachOptions {
        self.options
    }

    pub fn core(&self) -> &Matrix {
        &self.core
    }

    pub fn choice_counts(&self) -> (usize, usize) {
        (self.row_sums.len(), self.col_sums.len())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let slack = 1e-12 * (self.t_final - self.t0);
        if !(t >= self.t0 - slack && t <= self.t_final + slack) {
            return Err(Error::Domain(format!(
                "t = {t} outside the horizon [{}, {}]",
                self.t0, self.t_final
            )));
        }
        Ok(())
    }

    fn evaluate(&self, t: f64) -> Result<Evaluation> {
        self.check_time(t)?;
        let wb = remaining_gramian(&self.a, &self.b, t, self.t_final, self.route)?;
        let wc = remaining_gramian(&self.a, &self.c, t, self.t_final, self.route)?;
        let f = self.f;
        let mb = SpdFactor::new(&(&self.core + &wb * f), "penalized core of agent 0")?;
        let mc = SpdFactor::new(&(&self.core + &wc * f), "penalized core of agent 1")?;
        let m = SpdFactor::new(&(&self.core + (&wb + &wc) * f), "combined penalized core")?;
        let fwd = mat_exp(&self.a, -t)?;
        Ok(Evaluation {
            back_t: fwd.transpose(),
            fwd,
            wb,
            wc,
            mb,
            mc,
            m,
        })
    }

    /// `(K_u(t), K_v(t))`.
    pub fn approach_gains(&self, t: f64) -> Result<(Matrix, Matrix)> {
        let ev = self.evaluate(t)?;
        Ok(self.gains_from(&ev))
    }

    fn gains_from(&self, ev: &Evaluation) -> (Matrix, Matrix) {
        let f = self.f;
        let n = self.a.nrows();
        let ident = Matrix::identity(n, n);
        // [I − fW̄_C M⁻¹] e^{-At}; M⁻¹ symmetric so W̄_C M⁻¹ = (M⁻¹ W̄_C)ᵀ
        let inner_u = (&ident - ev.m.solve(&ev.wc).transpose() * f) * &ev.fwd;
        let inner_v = (&ident - ev.m.solve(&ev.wb).transpose() * f) * &ev.fwd;
        let ku = self.b.transpose() * &ev.back_t * ev.mb.solve(&inner_u) * f;
        let kv = self.c.transpose() * &ev.back_t * ev.mc.solve(&inner_v) * f;
        (ku, kv)
    }

    fn propagators(&self, ev: &Evaluation) -> (Matrix, Matrix) {
        match self.options.offsets {
            OffsetMode::Terminal => (self.back_terminal.clone(), self.back_terminal.clone()),
            OffsetMode::AsPrinted => (ev.fwd.clone(), self.back_terminal.clone()),
        }
    }

    fn offsets_from(&self, ev: &Evaluation) -> (Vec<Vector>, Vec<Vector>) {
        let f = self.f;
        let (nu, nv) = self.choice_counts();
        let scale = f / (nu * nv) as f64;
        let (ru, rv) = self.propagators(ev);
        let common_u = &ev.wc * ev.m.solve_vec(&(&ru * &self.total)) * scale;
        let common_v = &ev.wb * ev.m.solve_vec(&(&rv * &self.total)) * scale;
        let lu = self
            .row_sums
            .iter()
            .map(|row| {
                let bracket = &common_u - &ru * row / nv as f64;
                -(self.b.transpose() * (&ev.back_t * ev.mb.solve_vec(&bracket))) * f
            })
            .collect();
        let lv = self
            .col_sums
            .iter()
            .map(|col| {
                let bracket = &common_v - &rv * col / nu as f64;
                -(self.c.transpose() * (&ev.back_t * ev.mc.solve_vec(&bracket))) * f
            })
            .collect();
        (lu, lv)
    }

    /// `(L_ui(t), L_vj(t))`.
    pub fn approach_offsets(&self, i: usize, j: usize, t: f64) -> Result<(Vector, Vector)> {
        let (nu, nv) = self.choice_counts();
        if i >= nu || j >= nv {
            return Err(Error::Domain(format!(
                "choice pair ({i}, {j}) out of range"
            )));
        }
        let ev = self.evaluate(t)?;
        let (mut lu, mut lv) = self.offsets_from(&ev);
        Ok((lu.swap_remove(i), lv.swap_remove(j)))
    }

    /// The `f → ∞` limit of the gains and offsets.
    pub fn limit_gains(&self, t: f64) -> Result<LimitGains> {
        self.check_time(t)?;
        let guard = HORIZON_GUARD_FRACTION * (self.t_final - self.t0);
        if self.t_final - t < guard {
            return Err(Error::HorizonExhausted { t, guard });
        }
        let wb = remaining_gramian(&self.a, &self.b, t, self.t_final, self.route)?;
        let wc = remaining_gramian(&self.a, &self.c, t, self.t_final, self.route)?;
        let fb = SpdFactor::new(&wb, "remaining gramian of agent 0")?;
        let fc = SpdFactor::new(&wc, "remaining gramian of agent 1")?;
        let fw = SpdFactor::new(&(&wb + &wc), "combined remaining gramian")?;
        let fwd = mat_exp(&self.a, -t)?;
        let back_t = fwd.transpose();
        let k = &back_t * fw.solve(&fwd);
        let (nu, nv) = self.choice_counts();
        let r = &self.back_terminal;
        let grand = fw.solve_vec(&(r * &self.total)) / (nu * nv) as f64;
        let common_u = &wc * &grand;
        let common_v = &wb * &grand;
        let offsets_u = self
            .row_sums
            .iter()
            .map(|row| {
                -(self.b.transpose() * (&back_t * fb.solve_vec(&(&common_u - r * row / nv as f64))))
            })
            .collect();
        let offsets_v = self
            .col_sums
            .iter()
            .map(|col| {
                -(self.c.transpose() * (&back_t * fc.solve_vec(&(&common_v - r * col / nu as f64))))
            })
            .collect();
        Ok(LimitGains {
            k,
            offsets_u,
            offsets_v,
        })
    }

    /// Closed-form `Σ_ij x_ij(T)` under this law from the scenario's initial state.
    pub fn predict_terminal_sum(&self, x0: &Vector) -> Result<Vector> {
        let (nu, nv) = self.choice_counts();
        let w = gramian(&self.a, &self.b, self.t0, self.t_final)?.value
            + gramian(&self.a, &self.c, self.t0, self.t_final)?.value;
        predicted_sum(
            &self.a,
            &self.core,
            &w,
            self.f,
            self.t0,
            self.t_final,
            x0,
            &self.total,
            (nu * nv) as f64,
        )
    }
}

struct Evaluation {
    fwd: Matrix,
    back_t: Matrix,
    wb: Matrix,
    wc: Matrix,
    mb: SpdFactor,
    mc: SpdFactor,
    m: SpdFactor,
}

impl GainLaw for ApproachLaw {
    fn gains(&self, t: f64) -> Result<AffineGains> {
        let ev = self.evaluate(t)?;
        let (ku, kv) = self.gains_from(&ev);
        let (lu, lv) = self.offsets_from(&ev);
        Ok(AffineGains {
            gains: vec![ku, kv],
            offsets: vec![lu, lv],
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn predicted_sum(
    a: &Matrix,
    core: &Matrix,
    w: &Matrix,
    f: f64,
    t0: f64,
    t_final: f64,
    x0: &Vector,
    total: &Vector,
    count: f64,
) -> Result<Vector> {
    // e^{AT}[N (N + fW)⁻¹ count·y0 + fW (N + fW)⁻¹ e^{-AT} ΣH]
    let m = SpdFactor::new(&(core + w * f), "penalized core")?;
    let y0 = mat_exp(a, -t0)? * x0;
    let back = mat_exp(a, -t_final)?;
    let inner = core * m.solve_vec(&(y0 * count)) + w * m.solve_vec(&(back * total)) * f;
    Ok(mat_exp(a, t_final)? * inner)
}

/// Closed-form `Σ_ij x_ij(T)` for the scenario at penalty `f` and core interpretation `mode`.
pub fn predict_terminal_sum(scenario: &Scenario, f: f64, mode: CoreMode) -> Result<Vector> {
    ApproachLaw::new(
        scenario,
        f,
        ApproachOptions {
            core: mode,
            offsets: OffsetMode::Terminal,
        },
    )?
    .predict_terminal_sum(&scenario.x0)
}

/// The terminal-sum formula evaluated literally:
/// `e^{-AᵀT}[N + fW]⁻¹[N_uN_v e^{-At0}x0 + fW e^{AᵀT} ΣH]`.
pub fn predict_terminal_sum_printed(scenario: &Scenario, f: f64, mode: CoreMode) -> Result<Vector> {
    let law = ApproachLaw::new(
        scenario,
        f,
        ApproachOptions {
            core: mode,
            offsets: OffsetMode::Terminal,
        },
    )?;
    let a = scenario.system.a();
    let (t0, t_final) = (scenario.t0, scenario.t_final);
    let w = gramian(a, scenario.system.input(0), t0, t_final)?.value
        + gramian(a, scenario.system.input(1), t0, t_final)?.value;
    let (nu, nv) = law.choice_counts();
    let m = SpdFactor::new(&(law.core() + &w * f), "penalized core")?;
    let y0 = mat_exp(a, -t0)? * &scenario.x0;
    let fwd_t = mat_exp(a, t_final)?.transpose();
    let rhs = y0 * (nu * nv) as f64 + &w * (&fwd_t * &law.total) * f;
    Ok(mat_exp(a, -t_final)?.transpose() * m.solve_vec(&rhs))
}

/// Large-`f` terminal state: row mean + column mean − grand mean.
pub fn predict_terminal_large_f(h: &TargetTensor, i: usize, j: usize) -> Result<Vector> {
    if h.order() != 2 {
        return Err(Error::Dimension(format!(
            "expected a target matrix, got order {}",
            h.order()
        )));
    }
    let (nu, nv) = (h.dims()[0], h.dims()[1]);
    if i >= nu || j >= nv {
        return Err(Error::Domain(format!(
            "choice pair ({i}, {j}) out of range"
        )));
    }
    let (rows, cols, total) = target_sums(h);
    Ok(&cols[j] / nu as f64 + &rows[i] / nv as f64 - total / (nu * nv) as f64)
}
