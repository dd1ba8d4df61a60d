//! Independent verification of the synthesized laws.
//!
//! The target-achieving problem is solved as a plain equality-constrained
//! quadratic program over the stacked parameters `z = (P_l^i)` without the
//! pivot reduction; the penalized problem is solved as one symmetric
//! positive-definite system; and a piecewise-constant discretization of the
//! controls gives a family-free sanity check.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::approach::{ApproachLaw, ApproachOptions, CoreMode, OffsetMode};
use crate::error::{Error, Result};
use crate::feedback::GramianRoute;
use crate::model::{compatibility_residual, is_compatible, Scenario, TargetTensor};
use crate::numerics::{gramian, mat_exp, Matrix, SpdFactor, Vector};
use crate::openloop::OpenLoopLaw;
use crate::sim::{run_ensemble, AffineFamily, GainLaw, SimOptions};

/// Relative singular-value threshold for numerical rank.
pub const RANK_TOL: f64 = 1e-10;

/// Relative tolerance of the KKT constraint residual.
pub const KKT_CONSTRAINT_TOL: f64 = 1e-9;
/// Relative tolerance of the KKT stationarity residual.
pub const KKT_STATIONARITY_TOL: f64 = 1e-8;

fn norm_inf(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves the saddle-point system `[[2D, Eᵀ], [E, 0]] (z, λ) = (0, h)`.
///
/// Rows and columns are scaled symmetrically to unit max-norm before an LU
/// factorization with two refinement steps, so the Gramian blocks may differ
/// by many orders of magnitude.
fn solve_saddle(d: &Matrix, e: &Matrix, h: &Vector) -> Result<(Vector, Vector)> {
    let (dim, rows) = (d.nrows(), e.nrows());
    let size = dim + rows;
    let mut kkt = Matrix::zeros(size, size);
    kkt.view_mut((0, 0), (dim, dim)).copy_from(&(d * 2.0));
    kkt.view_mut((0, dim), (dim, rows))
        .copy_from(&e.transpose());
    kkt.view_mut((dim, 0), (rows, dim)).copy_from(e);
    let scale: Vec<f64> = (0..size)
        .map(|r| {
            let top = kkt.row(r).amax();
            if top > 0.0 {
                1.0 / top.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = Matrix::from_fn(size, size, |r, c| scale[r] * kkt[(r, c)] * scale[c]);
    let mut rhs = Vector::zeros(size);
    for r in 0..rows {
        rhs[dim + r] = scale[dim + r] * h[r];
    }
    let lu = scaled.clone().lu();
    let singular = || Error::Singular {
        context: "KKT system".into(),
        condition: crate::numerics::condition_estimate(&scaled),
    };
    let mut y = lu.solve(&rhs).ok_or_else(singular)?;
    for _ in 0..2 {
        let residual = &rhs - &scaled * &y;
        if let Some(dy) = lu.solve(&residual) {
            y += dy;
        }
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(singular());
    }
    let x = Vector::from_fn(size, |r, _| scale[r] * y[r]);
    Ok((x.rows(0, dim).into_owned(), x.rows(dim, rows).into_owned()))
}

/// Solution record of the constrained quadratic program.
#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    /// Stacked parameters, agent-major then choice.
    pub z: Vector,
    /// `params[l][i]` is `P_l^i`.
    pub params: Vec<Vec<Vector>>,
    /// One multiplier block per generator constraint.
    pub multipliers: Vector,
    /// `‖E z − h‖∞`.
    pub constraint_residual: f64,
    /// `‖2D z + Eᵀλ‖∞`.
    pub stationarity_residual: f64,
    pub objective: f64,
    pub constraint_rank: usize,
}

/// Layout of the stacked parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    n: usize,
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl ParamLayout {
    pub fn new(n: usize, dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &d in dims {
            offsets.push(acc);
            acc += d * n;
        }
        ParamLayout {
            n,
            dims: dims.to_vec(),
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().sum::<usize>() * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row of the first entry of `P_l^i`.
    pub fn start(&self, agent: usize, choice: usize) -> usize {
        self.offsets[agent] + choice * self.n
    }

    pub fn flatten(&self, params: &[Vec<Vector>]) -> Vector {
        let mut z = Vector::zeros(self.len());
        for (l, ps) in params.iter().enumerate() {
            for (i, p) in ps.iter().enumerate() {
                z.rows_mut(self.start(l, i), self.n).copy_from(p);
            }
        }
        z
    }

    pub fn unflatten(&self, z: &Vector) -> Vec<Vec<Vector>> {
        (0..self.dims.len())
            .map(|l| {
                (0..self.dims[l])
                    .map(|i| z.rows(self.start(l, i), self.n).into_owned())
                    .collect()
            })
            .collect()
    }
}

/// The quadratic program `min zᵀDz s.t. E z = h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    pub layout: ParamLayout,
    /// Block-diagonal `(1/N_l) W_l`.
    pub d: Matrix,
    pub e: Matrix,
    pub h: Vector,
}

impl ConstraintSystem {
    pub fn objective(&self, z: &Vector) -> f64 {
        z.dot(&(&self.d * z))
    }
}

fn require_compatible(h: &TargetTensor) -> Result<()> {
    if !is_compatible(h, None) {
        return Err(Error::Incompatible {
            residual: compatibility_residual(h),
        });
    }
    Ok(())
}

/// One constraint block per generator entry: `Σ_l W_l P_l^{i_l} = e^{-AT}H − e^{-At0}x0`.
pub fn constraint_system(scenario: &Scenario) -> Result<ConstraintSystem> {
    scenario.validate()?;
    let sys = &scenario.system;
    let n = sys.state_dim();
    let dims = scenario.targets.dims().to_vec();
    let layout = ParamLayout::new(n, &dims);
    let a = sys.a();
    let ws = sys
        .inputs()
        .iter()
        .map(|b| gramian(a, b, scenario.t0, scenario.t_final).map(|g| g.value))
        .collect::<Result<Vec<_>>>()?;

    let mut d = Matrix::zeros(layout.len(), layout.len());
    for (l, w) in ws.iter().enumerate() {
        for i in 0..dims[l] {
            let s = layout.start(l, i);
            d.view_mut((s, s), (n, n)).copy_from(&(w / dims[l] as f64));
        }
    }

    let tuples = constraint_tuples(&scenario.targets);
    let back = mat_exp(a, -scenario.t_final)?;
    let y0 = mat_exp(a, -scenario.t0)? * &scenario.x0;
    let mut e = Matrix::zeros(tuples.len() * n, layout.len());
    let mut h = Vector::zeros(tuples.len() * n);
    for (r, tuple) in tuples.iter().enumerate() {
        for (l, &i) in tuple.iter().enumerate() {
            e.view_mut((r * n, layout.start(l, i)), (n, n))
                .copy_from(&ws[l]);
        }
        h.rows_mut(r * n, n)
            .copy_from(&(&back * scenario.targets.get(tuple) - &y0));
    }
    Ok(ConstraintSystem { layout, d, e, h })
}

/// Numerical rank from singular values.
pub fn numerical_rank(m: &Matrix) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

/// Minimizes the average cost subject to every generator constraint via the full KKT system.
pub fn kkt_solve(scenario: &Scenario) -> Result<KktSolution> {
    require_compatible(&scenario.targets)?;
    let cs = constraint_system(scenario)?;
    let rows = cs.e.nrows();
    let rank = numerical_rank(&cs.e);
    if rank < rows {
        return Err(Error::Consistency(format!(
            "constraint matrix has rank {rank}, expected {rows}"
        )));
    }
    let (z, lambda) = solve_saddle(&cs.d, &cs.e, &cs.h)?;
    let constraint_residual = (&cs.e * &z - &cs.h).amax();
    let stationarity_residual = (&cs.d * &z * 2.0 + cs.e.transpose() * &lambda).amax();
    let constraint_scale = cs.h.amax() + norm_inf(&cs.e) * z.amax();
    let stationarity_scale =
        2.0 * norm_inf(&cs.d) * z.amax() + norm_inf(&cs.e.transpose()) * lambda.amax();
    if constraint_residual > KKT_CONSTRAINT_TOL * constraint_scale.max(f64::MIN_POSITIVE)
        || stationarity_residual > KKT_STATIONARITY_TOL * stationarity_scale.max(f64::MIN_POSITIVE)
    {
        return Err(Error::Consistency(format!(
            "KKT residuals {constraint_residual:e} (constraint) and {stationarity_residual:e} (stationarity) exceed tolerance"
        )));
    }
    Ok(KktSolution {
        params: cs.layout.unflatten(&z),
        objective: cs.objective(&z),
        z,
        multipliers: lambda,
        constraint_residual,
        stationarity_residual,
        constraint_rank: rank,
    })
}

/// Orthonormal basis of the row space of `E`.
fn row_space(e: &Matrix) -> Matrix {
    let svd = e.transpose().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let top = svd.singular_values.max();
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| top > 0.0 && s > RANK_TOL * top)
        .map(|(k, _)| k)
        .collect();
    Matrix::from_fn(u.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// Random unit directions in the null space of the constraint matrix.
pub fn tangent_directions(cs: &ConstraintSystem, count: usize, seed: u64) -> Vec<Vector> {
    let basis = row_space(&cs.e);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = cs.layout.len();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let d = Vector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)));
        let t = &d - &basis * (basis.transpose() * &d);
        let norm = t.norm();
        if norm > 1e-8 {
            out.push(t / norm);
        } else if dim == basis.ncols() {
            break;
        }
    }
    out
}

/// Largest central-difference directional derivative of the average cost along random constraint-tangent directions.
pub fn stationarity_check_params(
    scenario: &Scenario,
    params: &[Vec<Vector>],
    directions: usize,
    seed: u64,
) -> Result<f64> {
    let cs = constraint_system(scenario)?;
    let z = cs.layout.flatten(params);
    let step = 1e-3 * (1.0 + z.amax());
    let mut worst: f64 = 0.0;
    for d in tangent_directions(&cs, directions, seed) {
        let plus = cs.objective(&(&z + &d * step));
        let minus = cs.objective(&(&z - &d * step));
        worst = worst.max(((plus - minus) / (2.0 * step)).abs());
    }
    Ok(worst)
}

pub fn stationarity_check(
    law: &OpenLoopLaw,
    scenario: &Scenario,
    directions: usize,
) -> Result<f64> {
    stationarity_check_params(scenario, law.params(), directions, 0x5EED)
}

/// Minimizer of the penalized objective over `u_i = Bᵀe^{-Aᵀt}p_i`, `v_j = Cᵀe^{-Aᵀt}q_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedSolution {
    pub p: Vec<Vector>,
    pub q: Vec<Vector>,
    /// `x_ij(T)` indexed `[i][j]`.
    pub terminal_states: Vec<Vec<Vector>>,
    pub control_energy: f64,
    /// `(f / N_uN_v) Σ ‖x_ij(T) − H_ij‖²`.
    pub terminal_penalty: f64,
    pub objective: f64,
}

impl PenalizedSolution {
    /// `(1/N_uN_v) Σ ‖x_ij(T) − H_ij‖²`.
    pub fn mean_square_error(&self, f: f64) -> f64 {
        self.terminal_penalty / f
    }
}

pub fn penalized_solve(scenario: &Scenario, f: f64) -> Result<PenalizedSolution> {
    scenario.validate()?;
    if scenario.system.agents() != 2 {
        return Err(Error::Config(
            "penalized oracle needs exactly two agents".into(),
        ));
    }
    if !(f > 0.0 && f.is_finite()) {
        return Err(Error::Domain(format!(
            "penalty weight must be positive, got {f}"
        )));
    }
    let sys = &scenario.system;
    let a = sys.a();
    let n = sys.state_dim();
    let (nu, nv) = (scenario.targets.dims()[0], scenario.targets.dims()[1]);
    let (t0, t_final) = (scenario.t0, scenario.t_final);
    let wb = gramian(a, sys.input(0), t0, t_final)?.value;
    let wc = gramian(a, sys.input(1), t0, t_final)?.value;
    let fwd = mat_exp(a, t_final)?;
    let gb = &fwd * &wb;
    let gc = &fwd * &wc;
    let free = &fwd * (mat_exp(a, -t0)? * &scenario.x0);
    let scale = f / (nu * nv) as f64;

    let dim = (nu + nv) * n;
    let mut q = Matrix::zeros(dim, dim);
    let mut rhs = Vector::zeros(dim);
    let gbtgb = gb.transpose() * &gb;
    let gctgc = gc.transpose() * &gc;
    let gbtgc = gb.transpose() * &gc;
    for i in 0..nu {
        let block = &wb / nu as f64 + &gbtgb * (f / nu as f64);
        q.view_mut((i * n, i * n), (n, n)).copy_from(&block);
    }
    for j in 0..nv {
        let s = (nu + j) * n;
        let block = &wc / nv as f64 + &gctgc * (f / nv as f64);
        q.view_mut((s, s), (n, n)).copy_from(&block);
    }
    for i in 0..nu {
        for j in 0..nv {
            let cross = &gbtgc * scale;
            q.view_mut((i * n, (nu + j) * n), (n, n)).copy_from(&cross);
            q.view_mut(((nu + j) * n, i * n), (n, n))
                .copy_from(&cross.transpose());
            let c = &free - scenario.targets.get(&[i, j]);
            let mut ri = rhs.rows_mut(i * n, n);
            ri -= gb.transpose() * &c * scale;
            let mut rj = rhs.rows_mut((nu + j) * n, n);
            rj -= gc.transpose() * &c * scale;
        }
    }
    let sol = SpdFactor::new(&q, "penalized normal equations")?.solve_vec(&rhs);
    let p: Vec<Vector> = (0..nu).map(|i| sol.rows(i * n, n).into_owned()).collect();
    let qv: Vec<Vector> = (0..nv)
        .map(|j| sol.rows((nu + j) * n, n).into_owned())
        .collect();

    let control_energy = p.iter().map(|x| x.dot(&(&wb * x))).sum::<f64>() / nu as f64
        + qv.iter().map(|x| x.dot(&(&wc * x))).sum::<f64>() / nv as f64;
    let terminal_states: Vec<Vec<Vector>> = (0..nu)
        .map(|i| {
            (0..nv)
                .map(|j| &free + &gb * &p[i] + &gc * &qv[j])
                .collect()
        })
        .collect();
    let mut sq = 0.0;
    for i in 0..nu {
        for j in 0..nv {
            sq += (&terminal_states[i][j] - scenario.targets.get(&[i, j])).norm_squared();
        }
    }
    let terminal_penalty = scale * sq;
    Ok(PenalizedSolution {
        p,
        q: qv,
        terminal_states,
        control_energy,
        terminal_penalty,
        objective: control_energy + terminal_penalty,
    })
}

/// Optimum over piecewise-constant controls.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSolution {
    pub segments: usize,
    /// `levels[l][i][s]` is agent `l`'s control on segment `s` under choice `i`.
    pub levels: Vec<Vec<Vec<Vector>>>,
    pub objective: f64,
    pub constraint_residual: f64,
}

/// `∫_0^Δ e^{Aσ} dσ B` from the exponential of `[[A, B], [0, 0]]`.
fn hold_input_map(a: &Matrix, b: &Matrix, delta: f64) -> Result<Matrix> {
    let (n, m) = (a.nrows(), b.ncols());
    let mut block = Matrix::zeros(n + m, n + m);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, m)).copy_from(b);
    Ok(mat_exp(&block, delta)?.view((0, n), (n, m)).into_owned())
}

/// Target-achieving optimum over controls held constant on `segments` equal intervals.
pub fn discretized_solve(scenario: &Scenario, segments: usize) -> Result<DiscretizedSolution> {
    require_compatible(&scenario.targets)?;
    scenario.validate()?;
    if segments == 0 {
        return Err(Error::Config("at least one segment is required".into()));
    }
    let sys = &scenario.system;
    let a = sys.a();
    let n = sys.state_dim();
    let dims = scenario.targets.dims().to_vec();
    let delta = scenario.horizon() / segments as f64;

    // column offsets of each (agent, choice) block of segment levels
    let mut offsets = Vec::new();
    let mut dim = 0;
    for (l, &nl) in dims.iter().enumerate() {
        let width = segments * sys.input_dim(l);
        offsets.push((0..nl).map(|i| dim + i * width).collect::<Vec<_>>());
        dim += nl * width;
    }
    // maps[l][s]: effect on x(T) of agent l's level on segment s
    let maps = sys
        .inputs()
        .iter()
        .map(|b| {
            let gamma = hold_input_map(a, b, delta)?;
            (0..segments)
                .map(|s| {
                    Ok(
                        mat_exp(a, scenario.t_final - scenario.t0 - (s + 1) as f64 * delta)?
                            * &gamma,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut d = Matrix::zeros(dim, dim);
    for (l, &nl) in dims.iter().enumerate() {
        let m = sys.input_dim(l);
        let w = delta / nl as f64;
        for i in 0..nl {
            for k in 0..segments * m {
                let r = offsets[l][i] + k;
                d[(r, r)] = w;
            }
        }
    }

    let tuples = constraint_tuples(&scenario.targets);
    let free = mat_exp(a, scenario.horizon())? * &scenario.x0;
    let rows = tuples.len() * n;
    let mut e = Matrix::zeros(rows, dim);
    let mut h = Vector::zeros(rows);
    for (r, tuple) in tuples.iter().enumerate() {
        for (l, &i) in tuple.iter().enumerate() {
            let m = sys.input_dim(l);
            for (s, map) in maps[l].iter().enumerate() {
                e.view_mut((r * n, offsets[l][i] + s * m), (n, m))
                    .copy_from(map);
            }
        }
        h.rows_mut(r * n, n)
            .copy_from(&(scenario.targets.get(tuple) - &free));
    }

    let (c, _) = solve_saddle(&d, &e, &h)?;

    let levels = dims
        .iter()
        .enumerate()
        .map(|(l, &nl)| {
            let m = sys.input_dim(l);
            (0..nl)
                .map(|i| {
                    (0..segments)
                        .map(|s| c.rows(offsets[l][i] + s * m, m).into_owned())
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(DiscretizedSolution {
        segments,
        levels,
        objective: c.dot(&(&d * &c)),
        constraint_residual: (&e * &c - &h).amax(),
    })
}

/// One row of the approach-mode arbitration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeOutcome {
    pub core: CoreMode,
    pub offsets: OffsetMode,
    /// Simulated control energy plus terminal penalty.
    pub objective: f64,
    pub control_energy: f64,
    pub terminal_penalty: f64,
    /// Largest terminal-state deviation from the oracle's optimum.
    pub max_state_gap: f64,
    /// Largest deviation of the law's controls at `t0` from the oracle's optimal controls at `t0`.
    pub initial_gap: f64,
}

/// Comparison of every approach-law interpretation against the penalized oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ArbitrationReport {
    pub penalty: f64,
    pub oracle_objective: f64,
    pub outcomes: Vec<ModeOutcome>,
}

impl ArbitrationReport {
    /// The interpretation with the lowest objective.
    pub fn best(&self) -> &ModeOutcome {
        self.outcomes
            .iter()
            .min_by(|a, b| a.objective.total_cmp(&b.objective))
            .expect("arbitration always covers at least one mode")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "approach-mode arbitration (f = {:e})", self.penalty);
        let _ = writeln!(out, "  oracle objective: {:.12e}", self.oracle_objective);
        let _ = writeln!(
            out,
            "  {:<11} {:<11} {:>20} {:>14} {:>14} {:>14}",
            "core", "offsets", "objective", "rel. excess", "state gap", "t0 gap"
        );
        for o in &self.outcomes {
            let excess = (o.objective - self.oracle_objective)
                / self.oracle_objective.abs().max(f64::MIN_POSITIVE);
            let _ = writeln!(
                out,
                "  {:<11} {:<11} {:>20.12e} {:>14.3e} {:>14.3e} {:>14.3e}",
                o.core.name(),
                o.offsets.name(),
                o.objective,
                excess,
                o.max_state_gap,
                o.initial_gap
            );
        }
        let best = self.best();
        let _ = writeln!(
            out,
            "  lowest objective: core {}, offsets {}",
            best.core, best.offsets
        );
        out
    }
}

/// Simulates every approach-law interpretation and compares it with the penalized oracle.
pub fn arbitrate_modes(scenario: &Scenario, f: f64, steps: usize) -> Result<ArbitrationReport> {
    let oracle = penalized_solve(scenario, f)?;
    let opts = SimOptions {
        steps,
        record: false,
    };
    let (nu, nv) = (scenario.targets.dims()[0], scenario.targets.dims()[1]);
    let mut outcomes = Vec::new();
    for core in CoreMode::ALL {
        for offsets in [OffsetMode::Terminal, OffsetMode::AsPrinted] {
            let law = ApproachLaw::new(scenario, f, ApproachOptions { core, offsets })?
                .with_route(GramianRoute::Block);
            let initial_gap = initial_control_gap(scenario, &law, &oracle)?;
            let family =
                AffineFamily::scheduled(Arc::new(law), scenario.t0, scenario.t_final, steps)?;
            let report = run_ensemble(scenario, &family, None, &opts)?;
            let sq: f64 = report
                .tuples
                .iter()
                .map(|t| t.terminal_error.norm_squared())
                .sum();
            let terminal_penalty = f * sq / (nu * nv) as f64;
            let max_state_gap = report
                .tuples
                .iter()
                .map(|t| {
                    (&t.terminal_state - &oracle.terminal_states[t.choices[0]][t.choices[1]]).amax()
                })
                .fold(0.0, f64::max);
            outcomes.push(ModeOutcome {
                core,
                offsets,
                objective: report.average_cost + terminal_penalty,
                control_energy: report.average_cost,
                terminal_penalty,
                max_state_gap,
                initial_gap,
            });
        }
    }
    Ok(ArbitrationReport {
        penalty: f,
        oracle_objective: oracle.objective,
        outcomes,
    })
}

/// Largest difference at `t0` between the law's controls and the oracle's
/// `Bᵀe^{-Aᵀt0}p_i`, `Cᵀe^{-Aᵀt0}q_j` over every choice pair.
pub fn initial_control_gap(
    scenario: &Scenario,
    law: &ApproachLaw,
    oracle: &PenalizedSolution,
) -> Result<f64> {
    let sys = &scenario.system;
    let gains = law.gains(scenario.t0)?;
    let back = mat_exp(&sys.a().transpose(), -scenario.t0)?;
    let (bt, ct) = (
        sys.input(0).transpose() * &back,
        sys.input(1).transpose() * &back,
    );
    let mut worst: f64 = 0.0;
    for (i, p) in oracle.p.iter().enumerate() {
        for (j, q) in oracle.q.iter().enumerate() {
            let us = gains.apply(&[i, j], &scenario.x0);
            worst = worst
                .max((&us[0] - &bt * p).amax())
                .max((&us[1] - &ct * q).amax());
        }
    }
    Ok(worst)
}

/// Generator tuples encoded by the constraint rows, in row order: the
/// reference tuple, then each agent's non-reference choices.
pub fn constraint_tuples(h: &TargetTensor) -> Vec<Vec<usize>> {
    let dims = h.dims();
    let mut tuples = vec![vec![0; dims.len()]];
    for (l, &nl) in dims.iter().enumerate() {
        for i in 1..nl {
            let mut t = vec![0; dims.len()];
            t[l] = i;
            tuples.push(t);
        }
    }
    tuples
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{independent_constraint_count, LinearSystem};
    use crate::openloop::synthesize;

    fn scalar(h: &[f64], x0: f64) -> Scenario {
        let sys = LinearSystem::new(
            Matrix::zeros(1, 1),
            vec![Matrix::identity(1, 1), Matrix::identity(1, 1)],
        )
        .unwrap();
        Scenario::new(
            sys,
            0.0,
            1.0,
            Vector::from_element(1, x0),
            TargetTensor::scalar(vec![2, 2], h).unwrap(),
        )
        .unwrap()
    }

    fn rendezvous(h: [f64; 4]) -> Scenario {
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let sys = LinearSystem::new(a, vec![b.clone(), -b]).unwrap();
        let targets = TargetTensor::padded(vec![2, 2], &h, 2).unwrap();
        Scenario::new(sys, 0.0, 1.0, Vector::from_vec(vec![5.0, 0.0]), targets).unwrap()
    }

    #[test]
    fn kkt_zero_problem() {
        let sol = kkt_solve(&scalar(&[0.0; 4], 0.0)).unwrap();
        assert!(sol.z.amax() < 1e-15);
        assert!(sol.objective.abs() < 1e-15);
    }

    #[test]
    fn kkt_two_choice_example() {
        let sol = kkt_solve(&scalar(&[1.0, 0.0, 0.0, -1.0], 0.0)).unwrap();
        assert!((sol.objective - 0.5).abs() < 1e-12);
        let want = [0.5, -0.5, 0.5, -0.5];
        for (k, w) in want.iter().enumerate() {
            assert!((sol.z[k] - w).abs() < 1e-12);
        }
        assert!(sol.constraint_residual < 1e-12 && sol.stationarity_residual < 1e-12);
    }

    #[test]
    fn kkt_matches_closed_form_on_rendezvous() {
        let s = rendezvous([10.0, 0.0, 0.0, -10.0]);
        let sol = kkt_solve(&s).unwrap();
        let law = synthesize(&s).unwrap();
        assert!((sol.objective - law.average_cost()).abs() < 1e-10 * sol.objective);
        for (a, b) in sol
            .params
            .iter()
            .flatten()
            .zip(law.params().iter().flatten())
        {
            assert!((a - b).amax() < 1e-8 * (1.0 + b.amax()));
        }
        assert_eq!(
            sol.constraint_rank,
            independent_constraint_count(&[2, 2]) * 2
        );
    }

    #[test]
    fn kkt_rejects_incompatible() {
        assert!(matches!(
            kkt_solve(&scalar(&[5.0, 0.0, 0.0, 0.0], 0.0)),
            Err(Error::Incompatible { .. })
        ));
    }

    #[test]
    fn stationarity_of_optimum_and_perturbation() {
        let s = rendezvous([10.0, 0.0, 0.0, -10.0]);
        let law = synthesize(&s).unwrap();
        assert!(stationarity_check(&law, &s, 20).unwrap() < 1e-7);
        let cs = constraint_system(&s).unwrap();
        let d = &tangent_directions(&cs, 1, 3)[0];
        assert!((&cs.e * d).amax() < 1e-10);
        let z = cs.layout.flatten(law.params()) + d * 1e-2;
        let moved = cs.layout.unflatten(&z);
        assert!(stationarity_check_params(&s, &moved, 20, 1).unwrap() > 1e-4);
    }

    #[test]
    fn stationarity_single_agent() {
        let sys = LinearSystem::new(
            Matrix::from_element(1, 1, 0.4),
            vec![Matrix::identity(1, 1)],
        )
        .unwrap();
        let s = Scenario::new(
            sys,
            0.0,
            1.0,
            Vector::from_element(1, 1.0),
            TargetTensor::scalar(vec![1], &[3.0]).unwrap(),
        )
        .unwrap();
        let law = synthesize(&s).unwrap();
        assert!(stationarity_check(&law, &s, 5).unwrap() < 1e-7);
    }

    #[test]
    fn penalized_small_f_vanishes() {
        let sol = penalized_solve(&rendezvous([10.0, 0.0, 0.0, -10.0]), 1e-12).unwrap();
        assert!(sol.p.iter().chain(&sol.q).all(|v| v.amax() < 1e-9));
    }

    #[test]
    fn penalized_large_f_compatible() {
        let s = rendezvous([10.0, 0.0, 0.0, -10.0]);
        let sol = penalized_solve(&s, 1e6).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((&sol.terminal_states[i][j] - s.targets.get(&[i, j])).amax() < 1e-3);
            }
        }
    }

    #[test]
    fn penalized_large_f_incompatible_follows_means() {
        let s = rendezvous([10.0, 0.0, 0.0, 0.0]);
        let sol = penalized_solve(&s, 1e6).unwrap();
        let want = [[7.5, 2.5], [2.5, -2.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((sol.terminal_states[i][j][0] - want[i][j]).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn discretized_close_to_parametric() {
        let s = rendezvous([10.0, 0.0, 0.0, -10.0]);
        let disc = discretized_solve(&s, 20).unwrap();
        let kkt = kkt_solve(&s).unwrap();
        assert!(disc.constraint_residual < 1e-8);
        assert!(disc.objective >= kkt.objective * (1.0 - 1e-12));
        assert!(disc.objective <= kkt.objective * 1.01);
    }

    #[test]
    fn arbitration_prefers_product_core_on_double_integrator() {
        let s = rendezvous([10.0, 0.0, 0.0, 0.0]);
        let report = arbitrate_modes(&s, 1.0, 400).unwrap();
        assert_eq!(report.best().core, CoreMode::Product);
        let text = report.render();
        eprintln!("{text}");
        assert!(text.contains("lowest objective"));
    }

    #[test]
    fn product_terminal_law_starts_on_the_penalized_optimum() {
        let a = Matrix::from_row_slice(2, 2, &[0.3, 1.0, -0.5, -0.2]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = Matrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let sys = LinearSystem::new(a, vec![b, c]).unwrap();
        let targets =
            TargetTensor::padded(vec![2, 3], &[10.0, 0.0, 1.0, 0.0, 0.0, 3.0], 2).unwrap();
        let s = Scenario::new(sys, 0.2, 1.3, Vector::from_vec(vec![5.0, -1.0]), targets).unwrap();
        for f in [0.1, 1.0, 100.0] {
            let oracle = penalized_solve(&s, f).unwrap();
            for core in CoreMode::ALL {
                for offsets in [OffsetMode::Terminal, OffsetMode::AsPrinted] {
                    let law = ApproachLaw::new(&s, f, ApproachOptions { core, offsets }).unwrap();
                    let gap = initial_control_gap(&s, &law, &oracle).unwrap();
                    if core == CoreMode::Product && offsets == OffsetMode::Terminal {
                        assert!(gap < 1e-9, "f = {f}: gap {gap:e}");
                    } else {
                        assert!(gap > 1e-3, "f = {f}, {core}/{offsets}: gap {gap:e}");
                    }
                }
            }
        }
    }

    #[test]
    fn layout_round_trip() {
        let layout = ParamLayout::new(2, &[2, 3]);
        let params = vec![
            vec![
                Vector::from_vec(vec![1.0, 2.0]),
                Vector::from_vec(vec![3.0, 4.0]),
            ],
            (0..3).map(|k| Vector::from_element(2, k as f64)).collect(),
        ];
        assert_eq!(layout.unflatten(&layout.flatten(&params)), params);
        assert_eq!(
            constraint_tuples(&TargetTensor::scalar(vec![2, 3], &[0.0; 6]).unwrap()).len(),
            4
        );
    }
}
