//! Seeded random scenario generators shared by the integration tests.
#![allow(dead_code)]

use choicectl::model::{
    generator_set, reconstruct, GeneratorSet, LinearSystem, Scenario, TargetTensor,
};
use choicectl::numerics::{check_controllable, Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Smallest accepted Gramian eigenvalue ratio for generated systems.
pub const MIN_GRAMIAN_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Unstable,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * gaussian(rng))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * gaussian(rng))
}

/// Shifts a random matrix so its spectral abscissa is `−0.3` (stable) or `+0.3` (unstable).
pub fn random_drift(rng: &mut ChaCha8Rng, n: usize, stability: Stability) -> Matrix {
    let m = random_matrix(rng, n, n, 0.6);
    let abscissa = m
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let target = match stability {
        Stability::Stable => -0.3,
        Stability::Unstable => 0.3,
    };
    m + Matrix::identity(n, n) * (target - abscissa)
}

/// A system whose every agent is well conditioned over `[t0, T]`.
pub fn random_system(
    rng: &mut ChaCha8Rng,
    n: usize,
    agents: usize,
    stability: Stability,
    t0: f64,
    t_final: f64,
) -> LinearSystem {
    loop {
        let a = random_drift(rng, n, stability);
        let inputs: Vec<Matrix> = (0..agents)
            .map(|_| {
                let m = rng.random_range(1..=2usize.min(n));
                random_matrix(rng, n, m, 1.0)
            })
            .collect();
        let ok = inputs.iter().all(|b| {
            check_controllable(&a, b, t0, t_final, MIN_GRAMIAN_RATIO)
                .map(|c| c.controllable)
                .unwrap_or(false)
        });
        if ok {
            return LinearSystem::new(a, inputs).expect("generated system is well formed");
        }
    }
}

/// Compatible tensor reconstructed from random generators.
pub fn random_compatible_targets(
    rng: &mut ChaCha8Rng,
    dims: &[usize],
    n: usize,
    scale: f64,
) -> TargetTensor {
    let g = GeneratorSet {
        base: random_vector(rng, n, scale),
        rays: dims
            .iter()
            .map(|&d| (1..d).map(|_| random_vector(rng, n, scale)).collect())
            .collect(),
    };
    reconstruct(&g, dims).expect("dims match generators")
}

/// Arbitrary (generically incompatible) tensor.
pub fn random_targets(rng: &mut ChaCha8Rng, dims: &[usize], n: usize, scale: f64) -> TargetTensor {
    let count: usize = dims.iter().product();
    TargetTensor::new(
        dims.to_vec(),
        (0..count).map(|_| random_vector(rng, n, scale)).collect(),
    )
    .expect("dims match entries")
}

/// Compatible scenario with n ≤ 4, L ≤ 3, N_l ≤ 3; even seeds are stable, odd seeds unstable.
pub fn random_compatible_scenario(seed: u64) -> Scenario {
    let mut rng = rng(seed);
    let n = rng.random_range(1..=4);
    let agents = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..agents).map(|_| rng.random_range(1..=3)).collect();
    let stability = if seed % 2 == 0 {
        Stability::Stable
    } else {
        Stability::Unstable
    };
    let t0 = rng.random_range(-0.5..0.5);
    let t_final = t0 + rng.random_range(0.5..2.0);
    let system = random_system(&mut rng, n, agents, stability, t0, t_final);
    let x0 = random_vector(&mut rng, n, 1.0);
    let targets = random_compatible_targets(&mut rng, &dims, n, 2.0);
    Scenario::new(system, t0, t_final, x0, targets).expect("generated scenario is valid")
}

/// Two-agent scenario with n ≤ `max_n` and N ≤ 3 per agent.
pub fn random_two_agent_scenario(seed: u64, compatible: bool, max_n: usize) -> Scenario {
    let mut rng = rng(seed);
    let n = rng.random_range(1..=max_n);
    let dims = vec![rng.random_range(1..=3), rng.random_range(1..=3)];
    let stability = if seed % 2 == 0 {
        Stability::Stable
    } else {
        Stability::Unstable
    };
    let t0 = 0.0;
    let t_final = rng.random_range(0.5..1.5);
    let system = random_system(&mut rng, n, 2, stability, t0, t_final);
    let x0 = random_vector(&mut rng, n, 1.0);
    let targets = if compatible {
        random_compatible_targets(&mut rng, &dims, n, 2.0)
    } else {
        random_targets(&mut rng, &dims, n, 2.0)
    };
    Scenario::new(system, t0, t_final, x0, targets).expect("generated scenario is valid")
}

/// `‖a − b‖∞ / max(‖b‖∞, 1e-300)`.
pub fn rel_diff(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

/// `‖a − b‖∞ / max(‖b‖∞, 1)`.
pub fn scaled_diff(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Exhaustive check of every pairwise difference constraint: for each pair of
/// agents and each pair of choices of each, with the rest fixed,
/// `H[.., i, .., j, ..] − H[.., i', .., j, ..] = H[.., i, .., j', ..] − H[.., i', .., j', ..]`.
pub fn quadruple_violation(h: &TargetTensor) -> f64 {
    let dims = h.dims().to_vec();
    let order = dims.len();
    let mut worst: f64 = 0.0;
    for base in h.tuples() {
        for l in 0..order {
            for m in (l + 1)..order {
                for i2 in 0..dims[l] {
                    for j2 in 0..dims[m] {
                        let a = base.clone();
                        let mut b = base.clone();
                        b[l] = i2;
                        let mut c = base.clone();
                        c[m] = j2;
                        let mut d = base.clone();
                        d[l] = i2;
                        d[m] = j2;
                        let lhs = h.get(&a) - h.get(&b);
                        let rhs = h.get(&c) - h.get(&d);
                        worst = worst.max((lhs - rhs).amax());
                    }
                }
            }
        }
    }
    worst
}

/// Generator set of a tensor, re-exported for brevity.
pub fn generators(h: &TargetTensor) -> GeneratorSet {
    generator_set(h)
}
