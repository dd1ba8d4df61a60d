//! Dense small-matrix primitives: matrix exponential, controllability
//! Gramians, linear solves.
//!
//! Everything here is a pure function of its inputs. Matrices are
//! `nalgebra::DMatrix<f64>`; the problems in scope have state dimension of a
//! handful, so nothing here is tuned for size.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative eigenvalue ratio below which a Gramian is treated as singular.
pub const CONTROLLABILITY_TOL: f64 = 1e-10;

const GRAMIAN_REL_TOL: f64 = 1e-12;
const GL_PANEL_ORDER: usize = 16;
const GRAMIAN_MIN_NODES: usize = 32;
const GRAMIAN_MAX_NODES: usize = 512;

// Degree-13 Padé scaling-and-squaring (Higham 2005).
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152e0;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} has non-finite entries")))
    }
}

fn norm_1(m: &Matrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn norm_inf(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `e^{M t}` by scaling and squaring with a Padé approximant of degree at most 13.
pub fn mat_exp(m: &Matrix, t: f64) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !t.is_finite() {
        return Err(Error::Numeric(format!("non-finite time {t}")));
    }
    check_finite(m, "exponent")?;
    let n = m.nrows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let a = m * t;
    let norm = norm_1(&a);
    let ident = Matrix::identity(n, n);
    if norm == 0.0 {
        return Ok(ident);
    }

    let a2 = &a * &a;
    for &(order, theta) in &THETA {
        if norm <= theta {
            let coeffs: &[f64] = match order {
                3 => &PADE_3,
                5 => &PADE_5,
                7 => &PADE_7,
                _ => &PADE_9,
            };
            let (u, v) = pade_low(&a, &a2, coeffs);
            let result = pade_quotient(&u, &v)?;
            check_finite(&result, "matrix exponential")?;
            return Ok(result);
        }
    }

    let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
    let scale = 2f64.powi(-s);
    let a = &a * scale;
    let a2 = &a2 * (scale * scale);
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE_13;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    let mut result = pade_quotient(&u, &v)?;
    for _ in 0..s {
        result = &result * &result;
    }
    check_finite(&result, "matrix exponential")?;
    Ok(result)
}

fn pade_low(a: &Matrix, a2: &Matrix, coeffs: &[f64]) -> (Matrix, Matrix) {
    let n = a.nrows();
    let mut power = Matrix::identity(n, n);
    let mut u_even = Matrix::zeros(n, n);
    let mut v = Matrix::zeros(n, n);
    for k in 0..coeffs.len() / 2 {
        v += &power * coeffs[2 * k];
        u_even += &power * coeffs[2 * k + 1];
        power = &power * a2;
    }
    (a * u_even, v)
}

fn pade_quotient(u: &Matrix, v: &Matrix) -> Result<Matrix> {
    let num = v + u;
    let den = v - u;
    den.lu()
        .solve(&num)
        .ok_or_else(|| Error::Numeric("Padé denominator is singular".into()))
}

/// Nodes and weights of the `order`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    let nf = order as f64;
    for i in 0..order.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[order - 1 - i] = x;
        weights[i] = w;
        weights[order - 1 - i] = w;
    }
    (nodes, weights)
}

fn panel_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(GL_PANEL_ORDER))
}

/// A controllability Gramian `∫ e^{-At} B Bᵀ e^{-Aᵀt} dt` over an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Gramian {
    pub value: Matrix,
    pub interval: (f64, f64),
    /// Ratio of largest to smallest eigenvalue; infinite when singular.
    pub condition_estimate: f64,
}

impl Gramian {
    fn from_value(value: Matrix, interval: (f64, f64)) -> Self {
        let value = symmetrize(&value);
        let condition_estimate = condition_spd(&value);
        Gramian {
            value,
            interval,
            condition_estimate,
        }
    }

    pub fn dim(&self) -> usize {
        self.value.nrows()
    }
}

fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn symmetric_eigen_extremes(m: &Matrix) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

fn condition_spd(m: &Matrix) -> f64 {
    let (min, max) = symmetric_eigen_extremes(m);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_gramian_inputs(a: &Matrix, b: &Matrix, t_start: f64, t_end: f64) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "A must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != a.nrows() {
        return Err(Error::Dimension(format!(
            "B has {} rows but A is {}x{}",
            b.nrows(),
            a.nrows(),
            a.ncols()
        )));
    }
    if !(t_start.is_finite() && t_end.is_finite()) || t_start >= t_end {
        return Err(Error::Domain(format!(
            "gramian interval [{t_start}, {t_end}] is degenerate"
        )));
    }
    Ok(())
}

fn composite_gl(
    a_neg: &Matrix,
    b: &Matrix,
    t_start: f64,
    t_end: f64,
    panels: usize,
) -> Result<Matrix> {
    let (nodes, weights) = panel_rule();
    let n = a_neg.nrows();
    let width = (t_end - t_start) / panels as f64;
    let mut acc = Matrix::zeros(n, n);
    for p in 0..panels {
        let lo = t_start + width * p as f64;
        let mid = lo + 0.5 * width;
        for (x, w) in nodes.iter().zip(weights) {
            let s = mid + 0.5 * width * x;
            let g = mat_exp(a_neg, s)? * b;
            acc += (&g * g.transpose()) * (0.5 * width * w);
        }
    }
    Ok(acc)
}

/// `∫_{t_start}^{t_end} e^{-At} B Bᵀ e^{-Aᵀt} dt` by composite Gauss–Legendre
/// quadrature, doubling the node count from 32 until successive estimates
/// agree to 1e-12 relative (Frobenius).
pub fn gramian(a: &Matrix, b: &Matrix, t_start: f64, t_end: f64) -> Result<Gramian> {
    check_gramian_inputs(a, b, t_start, t_end)?;
    let a_neg = -a;
    let mut nodes = GRAMIAN_MIN_NODES;
    let mut prev = composite_gl(&a_neg, b, t_start, t_end, nodes / GL_PANEL_ORDER)?;
    while nodes < GRAMIAN_MAX_NODES {
        nodes *= 2;
        let next = composite_gl(&a_neg, b, t_start, t_end, nodes / GL_PANEL_ORDER)?;
        let scale = next.norm();
        let delta = (&next - &prev).norm();
        if delta <= GRAMIAN_REL_TOL * scale || scale == 0.0 {
            check_finite(&next, "gramian")?;
            return Ok(Gramian::from_value(next, (t_start, t_end)));
        }
        prev = next;
    }
    Err(Error::Numeric(format!(
        "gramian quadrature did not converge with {GRAMIAN_MAX_NODES} nodes on [{t_start}, {t_end}]"
    )))
}

/// Gramian at a fixed node count; exposes the quadrature for convergence checks.
pub fn gramian_with_nodes(
    a: &Matrix,
    b: &Matrix,
    t_start: f64,
    t_end: f64,
    nodes: usize,
) -> Result<Matrix> {
    check_gramian_inputs(a, b, t_start, t_end)?;
    if nodes == 0 || nodes % GL_PANEL_ORDER != 0 {
        return Err(Error::Domain(format!(
            "node count must be a positive multiple of {GL_PANEL_ORDER}"
        )));
    }
    composite_gl(&-a, b, t_start, t_end, nodes / GL_PANEL_ORDER)
}

/// Same integral as [`gramian`], evaluated with one exponential of the
/// augmented block matrix `[[A, BBᵀ], [0, -Aᵀ]]` (Van Loan).
pub fn gramian_block(a: &Matrix, b: &Matrix, t_start: f64, t_end: f64) -> Result<Gramian> {
    check_gramian_inputs(a, b, t_start, t_end)?;
    let value = remaining_gramian_core(a, &(b * b.transpose()), t_end - t_start)?;
    // Shift the origin: ∫_{t_s}^{t_e} = e^{-A t_s} (∫_0^{t_e - t_s}) e^{-Aᵀ t_s}.
    let shift = mat_exp(a, -t_start)?;
    let value = &shift * value * shift.transpose();
    check_finite(&value, "gramian")?;
    Ok(Gramian::from_value(value, (t_start, t_end)))
}

/// `∫_0^τ e^{-As} Q e^{-Aᵀs} ds` via the block exponential.
fn remaining_gramian_core(a: &Matrix, q: &Matrix, tau: f64) -> Result<Matrix> {
    let n = a.nrows();
    let mut block = Matrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, n)).copy_from(q);
    block.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let e = mat_exp(&block, tau)?;
    let g12 = e.view((0, n), (n, n)).into_owned();
    let g22 = e.view((n, n), (n, n)).into_owned();
    Ok(g22.transpose() * g12)
}

/// Result of [`check_controllable`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controllability {
    pub controllable: bool,
    pub condition_estimate: f64,
}

/// True iff the smallest Gramian eigenvalue exceeds `tol` times the largest.
pub fn check_controllable(
    a: &Matrix,
    b: &Matrix,
    t_start: f64,
    t_end: f64,
    tol: f64,
) -> Result<Controllability> {
    let w = gramian(a, b, t_start, t_end)?;
    Ok(controllability_of(&w, tol))
}

pub(crate) fn controllability_of(w: &Gramian, tol: f64) -> Controllability {
    let (min, max) = symmetric_eigen_extremes(&w.value);
    Controllability {
        controllable: max > 0.0 && min > tol * max,
        condition_estimate: w.condition_estimate,
    }
}

/// Reciprocal 1-norm condition number of a square matrix, from an explicit
/// inverse. Only used for diagnostics on small systems.
pub fn condition_estimate(m: &Matrix) -> f64 {
    match m.clone().try_inverse() {
        Some(inv) => norm_1(m) * norm_1(&inv),
        None => f64::INFINITY,
    }
}

/// Solve `M X = rhs` by LU with partial pivoting and one step of iterative
/// refinement. Fails when the residual contract `‖MX − rhs‖∞ ≤ 1e-10‖rhs‖∞`
/// cannot be met or `M` is numerically singular.
pub fn solve_linear(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "solve needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if rhs.nrows() != m.nrows() {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, matrix has {}",
            rhs.nrows(),
            m.nrows()
        )));
    }
    check_finite(m, "system matrix")?;
    check_finite(rhs, "right-hand side")?;
    let singular = || Error::Singular {
        context: "linear solve".into(),
        condition: condition_estimate(m),
    };
    let lu = m.clone().lu();
    let mut x = lu.solve(rhs).ok_or_else(singular)?;
    let residual = rhs - m * &x;
    if let Some(dx) = lu.solve(&residual) {
        x += dx;
    }
    let rhs_norm = norm_inf(rhs);
    let res_norm = norm_inf(&(m * &x - rhs));
    if !x.iter().all(|v| v.is_finite()) || res_norm > 1e-10 * rhs_norm.max(f64::MIN_POSITIVE) {
        return Err(singular());
    }
    Ok(x)
}

/// Convenience wrapper of [`solve_linear`] for a single right-hand side.
pub fn solve_vector(m: &Matrix, rhs: &Vector) -> Result<Vector> {
    let x = solve_linear(m, &Matrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
    Ok(x.column(0).into_owned())
}

/// Cached Cholesky factorization of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(m: &Matrix, context: &str) -> Result<Self> {
        Cholesky::new(symmetrize(m))
            .map(|chol| SpdFactor { chol })
            .ok_or_else(|| Error::Singular {
                context: context.to_string(),
                condition: condition_spd(m),
            })
    }

    pub fn solve(&self, rhs: &Matrix) -> Matrix {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &Vector) -> Vector {
        self.chol.solve(rhs)
    }
}
