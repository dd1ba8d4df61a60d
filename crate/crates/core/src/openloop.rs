//! Minimum-average-cost open-loop control families for compatible targets.
//!
//! Every optimal control has the form `u_l^i(t) = B_lᵀ e^{-Aᵀt} P_l^i`. The
//! parameters are found by eliminating the pivot agent's reference choice
//! from the generator constraints, solving the `(L−1)n` block system `Ω z = Θ`
//! for the remaining reference parameters, and back-substituting.

use crate::error::{Error, Result};
use crate::model::{compatibility_residual, generator_set, is_compatible, LinearSystem, Scenario};
use crate::numerics::{
    controllability_of, gramian, mat_exp, solve_linear, Gramian, Matrix, SpdFactor, Vector,
    CONTROLLABILITY_TOL,
};

/// A synthesized family of open-loop controls, one per agent and choice.
#[derive(Debug, Clone)]
pub struct OpenLoopLaw {
    system: LinearSystem,
    t0: f64,
    t_final: f64,
    x0: Vector,
    /// `params[l][i]` is `P_l^i`.
    params: Vec<Vec<Vector>>,
    gramians: Vec<Gramian>,
}

/// The reduced stationarity system for the non-pivot reference parameters.
#[derive(Debug, Clone)]
pub struct SynthesisSystem {
    pub omega: Matrix,
    pub theta: Vector,
    pub pivot: usize,
}

/// Gramians, factorizations and propagated targets shared by the synthesis steps.
struct Prepared {
    gramians: Vec<Gramian>,
    factors: Vec<SpdFactor>,
    /// `e^{-AT} G_l(i) − e^{-A t0} x0` for every generator.
    reduced: Vec<Vec<Vector>>,
    /// `e^{-AT} (G_l(i) − G_base)`.
    offsets: Vec<Vec<Vector>>,
    y0: Vector,
    base_reduced: Vector,
}

fn prepare(scenario: &Scenario) -> Result<Prepared> {
    scenario.validate()?;
    let h = &scenario.targets;
    if !is_compatible(h, None) {
        return Err(Error::Incompatible {
            residual: compatibility_residual(h),
        });
    }
    let sys = &scenario.system;
    let a = sys.a();
    let mut gramians = Vec::with_capacity(sys.agents());
    let mut factors = Vec::with_capacity(sys.agents());
    for (l, b) in sys.inputs().iter().enumerate() {
        let w = gramian(a, b, scenario.t0, scenario.t_final)?;
        let c = controllability_of(&w, CONTROLLABILITY_TOL);
        if !c.controllable {
            return Err(Error::Uncontrollable {
                agent: l,
                condition: c.condition_estimate,
            });
        }
        factors.push(SpdFactor::new(&w.value, &format!("gramian of agent {l}"))?);
        gramians.push(w);
    }
    let back = mat_exp(a, -scenario.t_final)?;
    let y0 = mat_exp(a, -scenario.t0)? * &scenario.x0;
    let g = generator_set(h);
    let base_prop = &back * &g.base;
    let reduced = (0..sys.agents())
        .map(|l| {
            (0..h.dims()[l])
                .map(|i| &back * g.axis(l, i) - &y0)
                .collect()
        })
        .collect();
    let offsets = (0..sys.agents())
        .map(|l| {
            (0..h.dims()[l])
                .map(|i| &back * g.axis(l, i) - &base_prop)
                .collect()
        })
        .collect();
    Ok(Prepared {
        gramians,
        factors,
        reduced,
        offsets,
        base_reduced: base_prop - &y0,
        y0,
    })
}

fn mean(vs: &[Vector]) -> Vector {
    let mut acc = Vector::zeros(vs[0].len());
    for v in vs {
        acc += v;
    }
    acc / vs.len() as f64
}

fn build_system(prep: &Prepared, pivot: usize) -> SynthesisSystem {
    let agents = prep.gramians.len();
    let n = prep.y0.len();
    let free: Vec<usize> = (0..agents).filter(|&l| l != pivot).collect();
    let dim = free.len() * n;
    let mut omega = Matrix::zeros(dim, dim);
    let mut theta = Vector::zeros(dim);
    let pivot_factor = &prep.factors[pivot];
    let pivot_term = pivot_factor.solve_vec(&mean(&prep.reduced[pivot]));
    for (row, &k) in free.iter().enumerate() {
        for (col, &m) in free.iter().enumerate() {
            let mut block = pivot_factor.solve(&prep.gramians[m].value);
            if row == col {
                block += Matrix::identity(n, n);
            }
            omega.view_mut((row * n, col * n), (n, n)).copy_from(&block);
        }
        // W_k⁻¹ e^{-AT} mean_i(G_base − G_k(i)) + W_p⁻¹ mean_i(e^{-AT} G_p(i) − y0)
        let own = prep.factors[k].solve_vec(&-mean(&prep.offsets[k]));
        theta.rows_mut(row * n, n).copy_from(&(own + &pivot_term));
    }
    SynthesisSystem {
        omega,
        theta,
        pivot,
    }
}

/// The `Ω`, `Θ` pair for a given pivot agent.
pub fn synthesis_system(scenario: &Scenario, pivot: usize) -> Result<SynthesisSystem> {
    check_pivot(scenario, pivot)?;
    let prep = prepare(scenario)?;
    Ok(build_system(&prep, pivot))
}

fn check_pivot(scenario: &Scenario, pivot: usize) -> Result<()> {
    if pivot >= scenario.system.agents() {
        return Err(Error::Config(format!(
            "pivot agent {pivot} out of range for {} agents",
            scenario.system.agents()
        )));
    }
    Ok(())
}

/// Synthesizes the optimal target-achieving family with the last agent as pivot.
pub fn synthesize(scenario: &Scenario) -> Result<OpenLoopLaw> {
    synthesize_with_pivot(scenario, scenario.system.agents() - 1)
}

pub fn synthesize_with_pivot(scenario: &Scenario, pivot: usize) -> Result<OpenLoopLaw> {
    check_pivot(scenario, pivot)?;
    let prep = prepare(scenario)?;
    let agents = scenario.system.agents();
    let n = scenario.system.state_dim();
    let sys = build_system(&prep, pivot);

    let mut reference: Vec<Option<Vector>> = vec![None; agents];
    if !sys.theta.is_empty() {
        let rhs = Matrix::from_column_slice(sys.theta.len(), 1, sys.theta.as_slice());
        let z = solve_linear(&sys.omega, &rhs).map_err(|e| match e {
            Error::Singular { condition, .. } => Error::Singular {
                context: "reduced synthesis system".into(),
                condition,
            },
            other => other,
        })?;
        let free = (0..agents).filter(|&l| l != pivot);
        for (slot, l) in free.enumerate() {
            reference[l] = Some(z.view((slot * n, 0), (n, 1)).column(0).into_owned());
        }
    }

    // Σ_{k≠p} W_k P_k^0
    let mut coupled = Vector::zeros(n);
    for (l, p) in reference.iter().enumerate() {
        if let Some(p) = p {
            coupled += &prep.gramians[l].value * p;
        }
    }

    let dims = scenario.targets.dims();
    let params = (0..agents)
        .map(|l| {
            (0..dims[l])
                .map(|i| match &reference[l] {
                    Some(p0) if i == 0 => p0.clone(),
                    Some(p0) => prep.factors[l].solve_vec(&prep.offsets[l][i]) + p0,
                    None => prep.factors[l].solve_vec(&(&prep.reduced[l][i] - &coupled)),
                })
                .collect()
        })
        .collect();
    debug_assert!(
        (&prep.base_reduced - &prep.reduced[0][0]).amax()
            < 1e-12 * (1.0 + prep.base_reduced.amax())
    );

    Ok(OpenLoopLaw {
        system: scenario.system.clone(),
        t0: scenario.t0,
        t_final: scenario.t_final,
        x0: scenario.x0.clone(),
        params,
        gramians: prep.gramians,
    })
}

impl OpenLoopLaw {
    pub fn system(&self) -> &LinearSystem {
        &self.system
    }

    pub fn horizon(&self) -> (f64, f64) {
        (self.t0, self.t_final)
    }

    pub fn x0(&self) -> &Vector {
        &self.x0
    }

    pub fn params(&self) -> &[Vec<Vector>] {
        &self.params
    }

    pub fn param(&self, agent: usize, choice: usize) -> &Vector {
        &self.params[agent][choice]
    }

    pub fn gramians(&self) -> &[Gramian] {
        &self.gramians
    }

    pub fn choice_counts(&self) -> Vec<usize> {
        self.params.iter().map(Vec::len).collect()
    }

    /// `B_lᵀ e^{-Aᵀt} P_l^i`.
    pub fn control_value(&self, agent: usize, choice: usize, t: f64) -> Result<Vector> {
        let slack = 1e-12 * (self.t_final - self.t0).abs().max(1.0);
        if !(t >= self.t0 - slack && t <= self.t_final + slack) {
            return Err(Error::Domain(format!(
                "t = {t} outside the horizon [{}, {}]",
                self.t0, self.t_final
            )));
        }
        if agent >= self.params.len() || choice >= self.params[agent].len() {
            return Err(Error::Domain(format!(
                "no control for agent {agent}, choice {choice}"
            )));
        }
        let back = mat_exp(self.system.a(), -t)?;
        Ok(self.system.input(agent).transpose() * back.transpose() * &self.params[agent][choice])
    }

    /// `B_lᵀ · back · P_l^i` with `back = e^{-Aᵀt}` supplied by the caller.
    pub fn control_with(&self, agent: usize, choice: usize, back: &Matrix) -> Vector {
        self.system.input(agent).transpose() * (back * &self.params[agent][choice])
    }

    /// Controls of every agent for one choice tuple.
    pub fn controls(&self, choices: &[usize], t: f64) -> Result<Vec<Vector>> {
        choices
            .iter()
            .enumerate()
            .map(|(l, &i)| self.control_value(l, i, t))
            .collect()
    }

    /// `Σ_l (1/N_l) Σ_i P_l^iᵀ W_l P_l^i`.
    pub fn average_cost(&self) -> f64 {
        self.params
            .iter()
            .zip(&self.gramians)
            .map(|(ps, w)| ps.iter().map(|p| p.dot(&(&w.value * p))).sum::<f64>() / ps.len() as f64)
            .sum()
    }

    /// Closed-form terminal state `e^{AT}(e^{-At0}x0 + Σ_l W_l P_l^{i_l})`.
    pub fn terminal_state(&self, choices: &[usize]) -> Result<Vector> {
        let a = self.system.a();
        let mut y = mat_exp(a, -self.t0)? * &self.x0;
        for (l, &i) in choices.iter().enumerate() {
            y += &self.gramians[l].value * &self.params[l][i];
        }
        Ok(mat_exp(a, self.t_final)? * y)
    }
}

/// Minimum regulatory cost of a scalar plant `ẋ = a x + Σ b_l u_l` driven
/// from `x0` to zero over `[0, T]`.
pub fn regulatory_cost(a: f64, b: &[f64], x0: f64, t_final: f64) -> f64 {
    let sb: f64 = b.iter().map(|v| v * v).sum();
    // g = ∫_0^T e^{-2as} ds, continuous through a = 0
    let g = if (a * t_final).abs() < 1e-8 {
        t_final * (1.0 - a * t_final)
    } else {
        -(-2.0 * a * t_final).exp_m1() / (2.0 * a)
    };
    x0 * x0 / (g * sb)
}

/// Closed-form two-agent scalar law for `a = 0`, `b₁ = b₂ = 1`, `t0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoAgentScalarLaw {
    /// `controls[agent][choice]`, constant in time.
    pub controls: [[f64; 2]; 2],
    pub cost: f64,
}

/// `h[i][j]` is the target when agent 1 picks `i` and agent 2 picks `j`.
pub fn two_agent_scalar_law(h: [[f64; 2]; 2], x0: f64, t_final: f64) -> Result<TwoAgentScalarLaw> {
    if !(t_final > 0.0) {
        return Err(Error::Domain(format!(
            "horizon must be positive, got {t_final}"
        )));
    }
    let [[h11, h12], [h21, h22]] = h;
    let s = 1.0 / (4.0 * t_final);
    let controls = [
        [
            s * (2.0 * h11 + h12 - h21 - 2.0 * x0),
            s * (2.0 * h22 + h21 - h12 - 2.0 * x0),
        ],
        [
            s * (2.0 * h11 - h12 + h21 - 2.0 * x0),
            s * (2.0 * h22 + h12 - h21 - 2.0 * x0),
        ],
    ];
    let cost = s * ((h11 - x0).powi(2) + (h22 - x0).powi(2) + 0.5 * (h21 - h12).powi(2));
    Ok(TwoAgentScalarLaw { controls, cost })
}

/// Cost of reaching each target in turn with a single shared choice,
/// averaged over targets: `mean((H − x0)²) / ((b₁² + b₂²) T)` for `a = 0`.
pub fn single_choice_cost(targets: &[f64], x0: f64, b1: f64, b2: f64, t_final: f64) -> f64 {
    let mean_sq = targets.iter().map(|h| (h - x0).powi(2)).sum::<f64>() / targets.len() as f64;
    mean_sq / ((b1 * b1 + b2 * b2) * t_final)
}
