//! Problem description: plants, horizons, target tensors, and the
//! compatibility theory that decides which target tensors are realizable by
//! communication-free open-loop controls.
//!
//! Choice indices are zero-based throughout the API: choice `0` of every
//! agent is the reference choice whose entries form the generator base.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::sim::NoiseConfig;

/// `ẋ = A x + Σ_l B_l u_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: Matrix,
    inputs: Vec<Matrix>,
}

impl LinearSystem {
    pub fn new(a: Matrix, inputs: Vec<Matrix>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::Dimension("a system needs at least one agent".into()));
        }
        for (l, b) in inputs.iter().enumerate() {
            if b.nrows() != a.nrows() {
                return Err(Error::Dimension(format!(
                    "input matrix of agent {l} has {} rows, expected {}",
                    b.nrows(),
                    a.nrows()
                )));
            }
            if b.ncols() == 0 {
                return Err(Error::Dimension(format!("agent {l} has no input channels")));
            }
        }
        if a.iter()
            .chain(inputs.iter().flat_map(|b| b.iter()))
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("system matrices must be finite".into()));
        }
        Ok(LinearSystem { a, inputs })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn input(&self, agent: usize) -> &Matrix {
        &self.inputs[agent]
    }

    pub fn inputs(&self) -> &[Matrix] {
        &self.inputs
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn agents(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dim(&self, agent: usize) -> usize {
        self.inputs[agent].ncols()
    }

    /// `A x + Σ_l B_l u_l`.
    pub fn drift(&self, x: &Vector, controls: &[Vector]) -> Vector {
        let mut dx = &self.a * x;
        for (b, u) in self.inputs.iter().zip(controls) {
            dx += b * u;
        }
        dx
    }
}

/// An L-order tensor of n-dimensional terminal targets, stored flat in
/// row-major order (last agent's index varies fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTensor {
    dims: Vec<usize>,
    entries: Vec<Vector>,
}

impl TargetTensor {
    pub fn new(dims: Vec<usize>, entries: Vec<Vector>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("invalid choice counts {dims:?}")));
        }
        let count: usize = dims.iter().product();
        if entries.len() != count {
            return Err(Error::Dimension(format!(
                "dims {dims:?} need {count} entries, got {}",
                entries.len()
            )));
        }
        let n = entries[0].len();
        if n == 0 || entries.iter().any(|e| e.len() != n) {
            return Err(Error::Dimension(
                "target vectors must share a nonzero length".into(),
            ));
        }
        if entries
            .iter()
            .flat_map(|e| e.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("target entries must be finite".into()));
        }
        Ok(TargetTensor { dims, entries })
    }

    /// Tensor of one-dimensional targets.
    pub fn scalar(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(
            dims,
            values.iter().map(|&v| Vector::from_element(1, v)).collect(),
        )
    }

    /// Each entry is `[value, 0, …, 0]` of length `n`; used for position
    /// targets with zero terminal velocity.
    pub fn padded(dims: Vec<usize>, values: &[f64], n: usize) -> Result<Self> {
        Self::new(
            dims,
            values
                .iter()
                .map(|&v| {
                    let mut e = Vector::zeros(n);
                    e[0] = v;
                    e
                })
                .collect(),
        )
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn vector_dim(&self) -> usize {
        self.entries[0].len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Vector] {
        &self.entries
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        linear_index(&self.dims, idx)
    }

    pub fn get(&self, idx: &[usize]) -> &Vector {
        &self.entries[self.linear_index(idx)]
    }

    /// Entry `(0, …, i, …, 0)` with `i` at position `agent`.
    pub fn axis_entry(&self, agent: usize, choice: usize) -> &Vector {
        let mut idx = vec![0; self.order()];
        idx[agent] = choice;
        self.get(&idx)
    }

    /// Largest absolute component over all entries.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.amax()).fold(0.0, f64::max)
    }

    pub fn tuples(&self) -> TupleIter {
        TupleIter::new(&self.dims)
    }
}

pub(crate) fn linear_index(dims: &[usize], idx: &[usize]) -> usize {
    assert_eq!(
        dims.len(),
        idx.len(),
        "index arity does not match tensor order"
    );
    idx.iter().zip(dims).fold(0, |acc, (&i, &d)| {
        assert!(i < d, "index {i} out of range for dimension {d}");
        acc * d + i
    })
}

/// Row-major iteration over every choice tuple of a dims vector.
#[derive(Debug, Clone)]
pub struct TupleIter {
    dims: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl TupleIter {
    pub fn new(dims: &[usize]) -> Self {
        let next = if dims.iter().all(|&d| d > 0) {
            Some(vec![0; dims.len()])
        } else {
            None
        };
        TupleIter {
            dims: dims.to_vec(),
            next,
        }
    }
}

impl Iterator for TupleIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        for pos in (0..succ.len()).rev() {
            succ[pos] += 1;
            if succ[pos] < self.dims[pos] {
                self.next = Some(succ);
                return Some(current);
            }
            succ[pos] = 0;
        }
        Some(current)
    }
}

/// The entries of a target tensor with at most one non-reference index.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSet {
    pub base: Vector,
    /// `rays[l][k]` is the entry with agent `l` at choice `k + 1` and every
    /// other agent at choice 0.
    pub rays: Vec<Vec<Vector>>,
}

impl GeneratorSet {
    pub fn len(&self) -> usize {
        1 + self.rays.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Generator for agent `l` at choice `i` (choice 0 is the base).
    pub fn axis(&self, agent: usize, choice: usize) -> &Vector {
        if choice == 0 {
            &self.base
        } else {
            &self.rays[agent][choice - 1]
        }
    }
}

pub fn generator_set(h: &TargetTensor) -> GeneratorSet {
    let base = h.get(&vec![0; h.order()]).clone();
    let rays = (0..h.order())
        .map(|l| {
            (1..h.dims()[l])
                .map(|i| h.axis_entry(l, i).clone())
                .collect()
        })
        .collect();
    GeneratorSet { base, rays }
}

/// Builds every entry as `Σ_l G_l(i_l) − (L − 1) G_base`.
pub fn reconstruct(g: &GeneratorSet, dims: &[usize]) -> Result<TargetTensor> {
    if g.rays.len() != dims.len() {
        return Err(Error::Dimension(format!(
            "generator set has {} agents, dims have {}",
            g.rays.len(),
            dims.len()
        )));
    }
    for (l, (rays, &d)) in g.rays.iter().zip(dims).enumerate() {
        if rays.len() + 1 != d {
            return Err(Error::Dimension(format!(
                "agent {l}: {} generators for {d} choices",
                rays.len() + 1
            )));
        }
        if rays.iter().any(|r| r.len() != g.base.len()) {
            return Err(Error::Dimension(format!(
                "agent {l}: generator length mismatch"
            )));
        }
    }
    let order = dims.len();
    let entries = TupleIter::new(dims)
        .map(|idx| {
            let nonref: Vec<usize> = (0..order).filter(|&l| idx[l] != 0).collect();
            match nonref.as_slice() {
                [] => g.base.clone(),
                [l] => g.axis(*l, idx[*l]).clone(),
                _ => {
                    let mut acc = -(order as f64 - 1.0) * &g.base;
                    for (l, &i) in idx.iter().enumerate() {
                        acc += g.axis(l, i);
                    }
                    acc
                }
            }
        })
        .collect();
    TargetTensor::new(dims.to_vec(), entries)
}

/// Largest ∞-norm deviation of any entry from its generator reconstruction.
pub fn compatibility_residual(h: &TargetTensor) -> f64 {
    let rebuilt =
        reconstruct(&generator_set(h), h.dims()).expect("generator set matches its own dims");
    h.entries()
        .iter()
        .zip(rebuilt.entries())
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max)
}

/// Default tolerance: 1e-9 of the largest entry magnitude, floored at 1e-12.
pub fn default_tolerance(h: &TargetTensor) -> f64 {
    (1e-9 * h.max_abs()).max(1e-12)
}

pub fn is_compatible(h: &TargetTensor, tol: Option<f64>) -> bool {
    compatibility_residual(h) <= tol.unwrap_or_else(|| default_tolerance(h))
}

/// Number of independent terminal constraints, `1 + Σ N_l − L`.
pub fn independent_constraint_count(dims: &[usize]) -> usize {
    1 + dims.iter().sum::<usize>() - dims.len()
}

/// A complete synthesis/simulation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub system: LinearSystem,
    pub t0: f64,
    pub t_final: f64,
    pub x0: Vector,
    pub targets: TargetTensor,
    pub switch_time: Option<f64>,
    pub penalty_weight: Option<f64>,
    pub noise: Option<NoiseConfig>,
}

impl Scenario {
    /// Noise-free scenario without switch time or penalty.
    pub fn new(
        system: LinearSystem,
        t0: f64,
        t_final: f64,
        x0: Vector,
        targets: TargetTensor,
    ) -> Result<Self> {
        let s = Scenario {
            system,
            t0,
            t_final,
            x0,
            targets,
            switch_time: None,
            penalty_weight: None,
            noise: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_switch_time(mut self, t_switch: f64) -> Result<Self> {
        self.switch_time = Some(t_switch);
        self.validate()?;
        Ok(self)
    }

    pub fn with_penalty(mut self, f: f64) -> Result<Self> {
        self.penalty_weight = Some(f);
        self.validate()?;
        Ok(self)
    }

    pub fn with_noise(mut self, noise: NoiseConfig) -> Result<Self> {
        self.noise = Some(noise);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t_final.is_finite()) || self.t0 >= self.t_final {
            return Err(Error::Domain(format!(
                "horizon [{}, {}] is empty",
                self.t0, self.t_final
            )));
        }
        if let Some(ts) = self.switch_time {
            if !(ts > self.t0 && ts < self.t_final) {
                return Err(Error::Domain(format!(
                    "switch time {ts} must lie strictly inside ({}, {})",
                    self.t0, self.t_final
                )));
            }
        }
        if let Some(f) = self.penalty_weight {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::Domain(format!(
                    "penalty weight must be positive, got {f}"
                )));
            }
        }
        let n = self.system.state_dim();
        if self.x0.len() != n {
            return Err(Error::Dimension(format!(
                "x0 has length {}, state dimension is {n}",
                self.x0.len()
            )));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("x0 must be finite".into()));
        }
        if self.targets.vector_dim() != n {
            return Err(Error::Dimension(format!(
                "targets have dimension {}, state dimension is {n}",
                self.targets.vector_dim()
            )));
        }
        if self.targets.order() != self.system.agents() {
            return Err(Error::Dimension(format!(
                "target tensor has order {}, system has {} agents",
                self.targets.order(),
                self.system.agents()
            )));
        }
        if let Some(noise) = &self.noise {
            noise.validate(n)?;
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.t_final - self.t0
    }
}
