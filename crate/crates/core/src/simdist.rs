//! Parameter box, Gaussian/Dirac parameter distributions and the discrete
//! `{+δ, 0, −δ}` step algebra that moves their means.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pendulum::EnvParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("dimension {dim}: lower bound {lo} is not below upper bound {hi}")]
    EmptyInterval { dim: usize, lo: f64, hi: f64 },
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("dimension {dim}: value {value} outside [{lo}, {hi}]")]
    OutOfBounds {
        dim: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("dimension {dim}: standard deviation {value} must be finite and nonnegative")]
    BadStddev { dim: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub names: Vec<String>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamSpace {
    pub fn new(names: Vec<String>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, SpaceError> {
        if lo.len() != hi.len() || names.len() != lo.len() {
            return Err(SpaceError::Dimension {
                expected: names.len(),
                got: lo.len().min(hi.len()),
            });
        }
        let space = ParamSpace { names, lo, hi };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        for (dim, (lo, hi)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(lo < hi) {
                return Err(SpaceError::EmptyInterval {
                    dim,
                    lo: *lo,
                    hi: *hi,
                });
            }
        }
        Ok(())
    }

    /// Masses and damping coefficients, each in `[1, 2]`.
    pub fn pendulum() -> Self {
        Self::pendulum_with_ranges([(1.0, 2.0); 4])
    }

    pub fn pendulum_with_ranges(ranges: [(f64, f64); 4]) -> Self {
        ParamSpace::new(
            ["m1", "m2", "b1", "b2"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ranges.iter().map(|r| r.0).collect(),
            ranges.iter().map(|r| r.1).collect(),
        )
        .expect("pendulum ranges must be nonempty")
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn range(&self, dim: usize) -> f64 {
        self.hi[dim] - self.lo[dim]
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims()
            && x.iter()
                .enumerate()
                .all(|(d, v)| *v >= self.lo[d] && *v <= self.hi[d])
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, v)| v.clamp(self.lo[d], self.hi[d]))
            .collect()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, v)| (v - self.lo[d]) / self.range(d))
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(d, v)| self.lo[d] + v * self.range(d))
            .collect()
    }

    /// Uniform lattice with `resolution` points per dimension, endpoints
    /// included, in lexicographic order (last dimension fastest).
    pub fn grid(&self, resolution: usize) -> Vec<Vec<f64>> {
        assert!(resolution >= 2, "grid resolution must be at least 2");
        let dims = self.dims();
        let axis: Vec<Vec<f64>> = (0..dims)
            .map(|d| {
                (0..resolution)
                    .map(|i| self.lo[d] + self.range(d) * i as f64 / (resolution - 1) as f64)
                    .collect()
            })
            .collect();
        let total = resolution.pow(dims as u32);
        (0..total)
            .map(|mut flat| {
                let mut point = vec![0.0; dims];
                for d in (0..dims).rev() {
                    point[d] = axis[d][flat % resolution];
                    flat /= resolution;
                }
                point
            })
            .collect()
    }
}

/// Diagonal Gaussian over the parameter box whose mean always stays inside
/// the box. A zero standard deviation makes the dimension a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParamDist {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl SimParamDist {
    pub fn new(space: &ParamSpace, mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self, SpaceError> {
        if mean.len() != space.dims() {
            return Err(SpaceError::Dimension {
                expected: space.dims(),
                got: mean.len(),
            });
        }
        if stddev.len() != space.dims() {
            return Err(SpaceError::Dimension {
                expected: space.dims(),
                got: stddev.len(),
            });
        }
        for (dim, v) in mean.iter().enumerate() {
            if !(*v >= space.lo[dim] && *v <= space.hi[dim]) {
                return Err(SpaceError::OutOfBounds {
                    dim,
                    value: *v,
                    lo: space.lo[dim],
                    hi: space.hi[dim],
                });
            }
        }
        for (dim, s) in stddev.iter().enumerate() {
            if !(s.is_finite() && *s >= 0.0) {
                return Err(SpaceError::BadStddev { dim, value: *s });
            }
        }
        Ok(SimParamDist { mean, stddev })
    }

    pub fn dirac(space: &ParamSpace, mean: Vec<f64>) -> Result<Self, SpaceError> {
        let n = mean.len();
        Self::new(space, mean, vec![0.0; n])
    }

    /// Gaussian with standard deviation equal to `fraction` of each range.
    pub fn with_relative_stddev(
        space: &ParamSpace,
        mean: Vec<f64>,
        fraction: f64,
    ) -> Result<Self, SpaceError> {
        let stddev = (0..space.dims())
            .map(|d| fraction * space.range(d))
            .collect();
        Self::new(space, mean, stddev)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    pub fn is_dirac(&self) -> bool {
        self.stddev.iter().all(|s| *s == 0.0)
    }

    pub fn mean_params(&self) -> EnvParams {
        EnvParams::from_slice(&self.mean)
    }

    /// Draws one parameter vector, clamped into the box.
    pub fn sample(&self, space: &ParamSpace, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(space, &mut rng)
    }

    pub fn sample_with(&self, space: &ParamSpace, rng: &mut impl rand::Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.stddev)
            .enumerate()
            .map(|(d, (m, s))| {
                if *s == 0.0 {
                    *m
                } else {
                    let v = Normal::new(*m, *s).expect("validated stddev").sample(rng);
                    v.clamp(space.lo[d], space.hi[d])
                }
            })
            .collect()
    }

    /// Pendulum environment drawn from this distribution.
    pub fn sample_env(&self, space: &ParamSpace, seed: u64) -> EnvParams {
        EnvParams::from_slice(&self.sample(space, seed))
    }

    /// Moves each mean by `step · delta · range`, clamped into the box.
    pub fn apply_action(
        &self,
        space: &ParamSpace,
        action: &AdaptAction,
        delta: f64,
    ) -> SimParamDist {
        assert!(
            delta > 0.0 && delta <= 0.5,
            "step size must lie in (0, 0.5]"
        );
        assert_eq!(action.dims(), space.dims(), "action dimension mismatch");
        let mean = self
            .mean
            .iter()
            .zip(action.steps())
            .enumerate()
            .map(|(d, (m, a))| {
                (m + f64::from(a.sign()) * delta * space.range(d)).clamp(space.lo[d], space.hi[d])
            })
            .collect();
        SimParamDist {
            mean,
            stddev: self.stddev.clone(),
        }
    }

    /// Mean mapped into the unit box.
    pub fn normalized_mean(&self, space: &ParamSpace) -> Vec<f64> {
        space.to_unit(&self.mean)
    }
}

/// Euclidean distance between normalized means.
pub fn dist_distance(space: &ParamSpace, a: &SimParamDist, b: &SimParamDist) -> f64 {
    space
        .to_unit(a.mean())
        .iter()
        .zip(space.to_unit(b.mean()))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Per-dimension step. The discriminant order is the fixed branch-index order
/// used by the Q-network and its tie-break: `+1`, `0`, `−1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    Up = 0,
    Stay = 1,
    Down = 2,
}

impl Step {
    pub const ALL: [Step; 3] = [Step::Up, Step::Stay, Step::Down];

    pub fn sign(self) -> i8 {
        match self {
            Step::Up => 1,
            Step::Stay => 0,
            Step::Down => -1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Step {
        Step::ALL[i]
    }

    pub fn from_sign(s: i8) -> Step {
        match s.signum() {
            1 => Step::Up,
            0 => Step::Stay,
            _ => Step::Down,
        }
    }

    pub fn negated(self) -> Step {
        Step::from_sign(-self.sign())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdaptAction(Vec<Step>);

impl AdaptAction {
    pub fn new(steps: Vec<Step>) -> Self {
        AdaptAction(steps)
    }

    pub fn stay(dims: usize) -> Self {
        AdaptAction(vec![Step::Stay; dims])
    }

    pub fn from_signs(signs: &[i8]) -> Self {
        AdaptAction(signs.iter().map(|s| Step::from_sign(*s)).collect())
    }

    pub fn from_indices(idx: &[usize]) -> Self {
        AdaptAction(idx.iter().map(|i| Step::from_index(*i)).collect())
    }

    pub fn steps(&self) -> impl Iterator<Item = Step> + '_ {
        self.0.iter().copied()
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|s| s.index()).collect()
    }

    pub fn signs(&self) -> Vec<i8> {
        self.0.iter().map(|s| s.sign()).collect()
    }

    pub fn negated(&self) -> Self {
        AdaptAction(self.0.iter().map(|s| s.negated()).collect())
    }

    /// Compact `+0-` style rendering used in result files.
    pub fn code(&self) -> String {
        self.0
            .iter()
            .map(|s| match s {
                Step::Up => '+',
                Step::Stay => '0',
                Step::Down => '-',
            })
            .collect()
    }
}
