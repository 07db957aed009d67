//! Linearized double pendulum balanced at the upright equilibrium.
//!
//! Two point masses sit at the ends of two massless unit-length links; both
//! joints are actuated and carry viscous damping. States are
//! `(q1, q2, q̇1, q̇2)` where `q1` is the first link's deviation from vertical
//! and `q2` the relative angle of the second joint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{discretize, dlqr, Matrix, NumericsError};

pub const LINK_LENGTH: f64 = 1.0;
pub const GRAVITY: f64 = 9.81;
/// Number of `(q1, q2)` samples in an observation.
pub const OBS_POINTS: usize = 12;
pub const OBS_DIM: usize = 2 * OBS_POINTS;
/// Rollouts are truncated and flagged once the state norm exceeds this.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Cost assigned to a diverged rollout; large enough that its reward is exactly 0.
pub const DIVERGED_COST: f64 = 1e12;

pub type State = [f64; 4];
pub type Torque = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub m1: f64,
    pub m2: f64,
    pub b1: f64,
    pub b2: f64,
}

impl EnvParams {
    pub fn new(m1: f64, m2: f64, b1: f64, b2: f64) -> Self {
        let p = EnvParams { m1, m2, b1, b2 };
        assert!(
            p.is_valid(),
            "environment parameters must be finite and positive: {p:?}"
        );
        p
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v > 0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.m1, self.m2, self.b1, self.b2]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), 4, "pendulum parameters are 4-dimensional");
        EnvParams::new(v[0], v[1], v[2], v[3])
    }
}

/// Mass matrix, Coriolis vector `C(q,q̇)q̇` and gravity vector `g(q)` of the
/// manipulator equation `M q̈ + C q̇ + g = u − diag(b) q̇`.
fn manipulator_terms(p: &EnvParams, x: &State) -> ([[f64; 2]; 2], [f64; 2], [f64; 2]) {
    let (l1, l2) = (LINK_LENGTH, LINK_LENGTH);
    let [q1, q2, w1, w2] = *x;
    let (c2, s2) = (q2.cos(), q2.sin());
    let m11 = p.m1 * l1 * l1 + p.m2 * (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * c2);
    let m12 = p.m2 * (l2 * l2 + l1 * l2 * c2);
    let m22 = p.m2 * l2 * l2;
    let h = p.m2 * l1 * l2 * s2;
    let coriolis = [-h * (2.0 * w1 * w2 + w2 * w2), h * w1 * w1];
    // potential energy m1 g l1 cos q1 + m2 g (l1 cos q1 + l2 cos(q1+q2)); g(q) = ∂V/∂q
    let s1 = q1.sin();
    let s12 = (q1 + q2).sin();
    let gravity = [
        -(p.m1 + p.m2) * GRAVITY * l1 * s1 - p.m2 * GRAVITY * l2 * s12,
        -p.m2 * GRAVITY * l2 * s12,
    ];
    ([[m11, m12], [m12, m22]], coriolis, gravity)
}

/// State derivative of the full nonlinear model.
pub fn nonlinear_dynamics(p: &EnvParams, x: &State, u: &Torque) -> State {
    let (m, c, g) = manipulator_terms(p, x);
    let rhs = [
        u[0] - p.b1 * x[2] - c[0] - g[0],
        u[1] - p.b2 * x[3] - c[1] - g[1],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    assert!(det.abs() > 1e-12, "singular mass matrix");
    let a1 = (m[1][1] * rhs[0] - m[0][1] * rhs[1]) / det;
    let a2 = (m[0][0] * rhs[1] - m[1][0] * rhs[0]) / det;
    [x[2], x[3], a1, a2]
}

/// Total mechanical energy (kinetic plus potential, upright reference).
pub fn mechanical_energy(p: &EnvParams, x: &State) -> f64 {
    let (m, _, _) = manipulator_terms(p, x);
    let (w1, w2) = (x[2], x[3]);
    let kinetic = 0.5 * (m[0][0] * w1 * w1 + 2.0 * m[0][1] * w1 * w2 + m[1][1] * w2 * w2);
    let y1 = LINK_LENGTH * x[0].cos();
    let y2 = y1 + LINK_LENGTH * (x[0] + x[1]).cos();
    kinetic + GRAVITY * (p.m1 * y1 + p.m2 * y2)
}

/// Jacobians `(A, B)` of the nonlinear model at the upright equilibrium.
pub fn linearize(p: &EnvParams) -> (Matrix, Matrix) {
    let (l1, l2) = (LINK_LENGTH, LINK_LENGTH);
    let m11 = p.m1 * l1 * l1 + p.m2 * (l1 + l2) * (l1 + l2);
    let m12 = p.m2 * (l2 * l2 + l1 * l2);
    let m22 = p.m2 * l2 * l2;
    let det = m11 * m22 - m12 * m12;
    let minv = Matrix::from_rows(&[[m22 / det, -m12 / det], [-m12 / det, m11 / det]]);
    // −∂g/∂q at q = 0
    let stiffness = Matrix::from_rows(&[
        [
            (p.m1 + p.m2) * GRAVITY * l1 + p.m2 * GRAVITY * l2,
            p.m2 * GRAVITY * l2,
        ],
        [p.m2 * GRAVITY * l2, p.m2 * GRAVITY * l2],
    ]);
    let damping = Matrix::diag(&[p.b1, p.b2]);

    let mut a = Matrix::zeros(4, 4);
    a.set_block(0, 2, &Matrix::identity(2));
    a.set_block(2, 0, &(&minv * &stiffness));
    a.set_block(2, 2, &-&(&minv * &damping));
    let mut b = Matrix::zeros(4, 2);
    b.set_block(2, 0, &minv);
    (a, b)
}

/// Classical fourth-order Runge–Kutta step.
pub fn rk4_step<const N: usize>(
    f: impl Fn(&[f64; N]) -> [f64; N],
    x: &[f64; N],
    h: f64,
) -> [f64; N] {
    let shift = |base: &[f64; N], k: &[f64; N], s: f64| {
        let mut out = *base;
        for i in 0..N {
            out[i] += s * k[i];
        }
        out
    };
    let k1 = f(x);
    let k2 = f(&shift(x, &k1, 0.5 * h));
    let k3 = f(&shift(x, &k2, 0.5 * h));
    let k4 = f(&shift(x, &k3, h));
    let mut out = *x;
    for i in 0..N {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Rollout timing and quadratic cost weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Control period; torques are held constant over each period.
    pub control_dt: f64,
    /// RK4 step; must divide `control_dt`.
    pub integrator_dt: f64,
    pub horizon: f64,
    /// Diagonal of the state weight `Q_c`.
    pub state_weights: [f64; 4],
    /// Diagonal of the torque weight `R_c`.
    pub torque_weights: [f64; 2],
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            control_dt: 0.01,
            integrator_dt: 0.01,
            horizon: 2.5,
            state_weights: [1.0; 4],
            torque_weights: [0.1; 2],
        }
    }
}

impl RolloutConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.control_dt).round() as usize
    }

    fn substeps(&self) -> usize {
        let n = (self.control_dt / self.integrator_dt).round() as usize;
        assert!(
            n >= 1 && (n as f64 * self.integrator_dt - self.control_dt).abs() < 1e-12,
            "integrator step must divide the control period"
        );
        n
    }

    pub fn state_cost(&self) -> Matrix {
        Matrix::diag(&self.state_weights)
    }

    pub fn torque_cost(&self) -> Matrix {
        Matrix::diag(&self.torque_weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    /// One state per control instant, `steps + 1` entries. After divergence the
    /// last reached state is repeated.
    pub states: Vec<State>,
    /// Torque applied over each control period, `steps` entries.
    pub actions: Vec<Torque>,
    pub cost: f64,
    pub diverged: bool,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|i| i as f64 * self.dt).collect()
    }
}

/// Closed-loop rollout of the linearized target dynamics under `u = −K x`.
/// The running cost is integrated alongside the state by the same RK4 steps.
pub fn rollout(target: &EnvParams, gain: &Matrix, x0: &State, cfg: &RolloutConfig) -> Trajectory {
    assert!(gain.rows() == 2 && gain.cols() == 4, "gain must be 2x4");
    assert!(
        x0.iter().all(|v| v.is_finite()),
        "initial state must be finite"
    );
    let (a, b) = linearize(target);
    let a = to_array44(&a);
    let b = to_array42(&b);
    let k = to_array24(gain);
    let (qw, rw) = (cfg.state_weights, cfg.torque_weights);
    let steps = cfg.steps();
    let sub = cfg.substeps();
    let h = cfg.integrator_dt;

    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    let mut x = *x0;
    let mut cost = 0.0;
    let mut diverged = false;
    states.push(x);
    for _ in 0..steps {
        let u = [
            -(k[0][0] * x[0] + k[0][1] * x[1] + k[0][2] * x[2] + k[0][3] * x[3]),
            -(k[1][0] * x[0] + k[1][1] * x[1] + k[1][2] * x[2] + k[1][3] * x[3]),
        ];
        let bu: [f64; 4] = std::array::from_fn(|i| b[i][0] * u[0] + b[i][1] * u[1]);
        let u_cost = rw[0] * u[0] * u[0] + rw[1] * u[1] * u[1];
        let f = |z: &[f64; 5]| -> [f64; 5] {
            let mut d = [0.0; 5];
            for i in 0..4 {
                d[i] = a[i][0] * z[0] + a[i][1] * z[1] + a[i][2] * z[2] + a[i][3] * z[3] + bu[i];
            }
            d[4] = qw[0] * z[0] * z[0]
                + qw[1] * z[1] * z[1]
                + qw[2] * z[2] * z[2]
                + qw[3] * z[3] * z[3]
                + u_cost;
            d
        };
        let mut z = [x[0], x[1], x[2], x[3], 0.0];
        for _ in 0..sub {
            z = rk4_step(f, &z, h);
        }
        x = [z[0], z[1], z[2], z[3]];
        cost += z[4];
        actions.push(u);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            diverged = true;
            states.push(x);
            break;
        }
        states.push(x);
    }
    if diverged {
        let last_x = *states.last().unwrap();
        let last_u = *actions.last().unwrap();
        states.resize(steps + 1, last_x);
        actions.resize(steps, last_u);
        cost = DIVERGED_COST;
    }
    Trajectory {
        dt: cfg.control_dt,
        states,
        actions,
        cost,
        diverged,
    }
}

fn to_array44(m: &Matrix) -> [[f64; 4]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn to_array42(m: &Matrix) -> [[f64; 2]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn to_array24(m: &Matrix) -> [[f64; 4]; 2] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// Which part of a trajectory an observation samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    /// Whole trial, endpoints included.
    Full,
    /// Final 0.5 s only.
    LastWindow,
}

impl ObsMode {
    pub const LAST_WINDOW_SECONDS: f64 = 0.5;

    pub fn as_str(&self) -> &'static str {
        match self {
            ObsMode::Full => "full",
            ObsMode::LastWindow => "last_window",
        }
    }

    /// Sample indices into a trajectory with `len` states spaced by `dt`.
    pub fn indices(&self, len: usize, dt: f64) -> [usize; OBS_POINTS] {
        assert!(len >= OBS_POINTS, "trajectory too short to observe");
        let last = len - 1;
        let start = match self {
            ObsMode::Full => 0,
            ObsMode::LastWindow => {
                last.saturating_sub((Self::LAST_WINDOW_SECONDS / dt).round() as usize)
            }
        };
        let span = (last - start) as f64;
        std::array::from_fn(|k| {
            start + (span * k as f64 / (OBS_POINTS - 1) as f64).round() as usize
        })
    }
}

/// Observation clip; diverged trajectories saturate here.
pub const OBS_CLIP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajObservation {
    pub values: [f64; OBS_DIM],
}

impl TrajObservation {
    pub fn zeros() -> Self {
        TrajObservation {
            values: [0.0; OBS_DIM],
        }
    }

    /// Squared Euclidean distance between observations.
    pub fn sq_distance(&self, other: &TrajObservation) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Joint-angle samples `(q1, q2)` at 12 evenly spaced instants; the action
/// sequence is not part of the observation.
pub fn observe(t: &Trajectory, mode: ObsMode) -> TrajObservation {
    let idx = mode.indices(t.states.len(), t.dt);
    let mut values = [0.0; OBS_DIM];
    for (k, &i) in idx.iter().enumerate() {
        let s = &t.states[i];
        values[2 * k] = clamp_obs(s[0]);
        values[2 * k + 1] = clamp_obs(s[1]);
    }
    TrajObservation { values }
}

fn clamp_obs(v: f64) -> f64 {
    if v.is_nan() {
        OBS_CLIP
    } else {
        v.clamp(-OBS_CLIP, OBS_CLIP)
    }
}

/// How mean panel cost maps to a reward in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMapKind {
    /// `exp(−κ·(J/J* − 1))` with `J*` the matched-LQR cost on the same target.
    Relative,
    /// `mean_i exp(−J_i / J_scale)` over the panel.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub map: RewardMapKind,
    /// Target used to calibrate the map's single constant.
    pub calibration_target: [f64; 4],
    /// Relative map: parameters of the reference controller, the LQR for the
    /// centre of the standard box.
    pub reference_params: [f64; 4],
    /// Relative map: reward the reference controller scores on the calibration target.
    pub centroid_level: f64,
    /// Absolute map: reward the matched controller scores on the calibration target.
    pub matched_level: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            map: RewardMapKind::Relative,
            calibration_target: [1.8, 1.2, 1.5, 1.5],
            reference_params: [1.5; 4],
            centroid_level: 0.95,
            matched_level: 0.98,
        }
    }
}

/// Rollout settings, the fixed panel of initial states, and the reward map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub rollout: RolloutConfig,
    pub panel_seed: u64,
    pub panel_size: usize,
    /// Initial joint angles are drawn uniformly from `[-a, a]`.
    pub panel_amplitude: f64,
    /// Initial state of the single trajectory observed per adaptation step.
    pub obs_state: State,
    pub reward: RewardConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            rollout: RolloutConfig::default(),
            panel_seed: 7,
            panel_size: 8,
            panel_amplitude: 0.4,
            obs_state: [0.3, 0.3, 0.0, 0.0],
            reward: RewardConfig::default(),
        }
    }
}

impl TaskConfig {
    pub fn panel(&self) -> Vec<State> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.panel_seed);
        let a = self.panel_amplitude;
        (0..self.panel_size)
            .map(|_| {
                let q1 = rng.random_range(-a..=a);
                let q2 = rng.random_range(-a..=a);
                [q1, q2, 0.0, 0.0]
            })
            .collect()
    }
}

/// LQR gain for the linearized dynamics at `params`, discretized at the
/// control period with the cost weights scaled by it.
pub fn matched_lqr(params: &EnvParams, cfg: &RolloutConfig) -> Result<Matrix, NumericsError> {
    let (a, b) = linearize(params);
    let sys = discretize(&a, &b, cfg.control_dt)?;
    let q = cfg.state_cost().scale(cfg.control_dt);
    let r = cfg.torque_cost().scale(cfg.control_dt);
    dlqr(&sys, &q, &r).map(|(k, _)| k)
}

/// A target environment together with the mean panel cost of its own LQR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub params: EnvParams,
    pub reference_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardMap {
    Relative { sharpness: f64 },
    Absolute { j_scale: f64 },
}

impl RewardMap {
    /// The calibrated constant (κ or `J_scale`).
    pub fn constant(&self) -> f64 {
        match self {
            RewardMap::Relative { sharpness } => *sharpness,
            RewardMap::Absolute { j_scale } => *j_scale,
        }
    }
}

/// Reward evaluator with a frozen initial-state panel and calibrated map.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub config: TaskConfig,
    pub panel: Vec<State>,
    pub map: RewardMap,
}

/// Outcome of running one policy on one target.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reward: f64,
    pub mean_cost: f64,
    /// The single trajectory from `obs_state`, used as the observation.
    pub trajectory: Trajectory,
}

impl RewardModel {
    pub fn new(config: TaskConfig, map: RewardMap) -> Self {
        let c = map.constant();
        assert!(
            c > 0.0 && c.is_finite(),
            "reward constant must be positive and finite"
        );
        let panel = config.panel();
        RewardModel { config, panel, map }
    }

    /// Calibrates the map's constant on `config.reward.calibration_target`.
    pub fn calibrate(config: TaskConfig) -> Self {
        let params = EnvParams::from_slice(&config.reward.calibration_target);
        let matched =
            matched_lqr(&params, &config.rollout).expect("calibration target must be stabilizable");
        let probe = RewardModel::new(config.clone(), RewardMap::Relative { sharpness: 1.0 });
        let matched_costs = probe.panel_costs(&params, &matched);
        assert!(
            matched_costs.iter().all(|c| *c < DIVERGED_COST),
            "calibration controller diverged"
        );
        let map = match config.reward.map {
            RewardMapKind::Relative => {
                let level = config.reward.centroid_level;
                assert!(level > 0.0 && level < 1.0);
                let reference = mean(&matched_costs);
                let centroid = matched_lqr(
                    &EnvParams::from_slice(&config.reward.reference_params),
                    &config.rollout,
                )
                .expect("reference controller must be stabilizable");
                let excess = probe.mean_cost(&params, &centroid) / reference - 1.0;
                assert!(
                    excess > 0.0,
                    "centroid controller must be worse than the matched one"
                );
                RewardMap::Relative {
                    sharpness: -level.ln() / excess,
                }
            }
            RewardMapKind::Absolute => {
                let level = config.reward.matched_level;
                assert!(level > 0.0 && level < 1.0);
                let score = |s: f64| {
                    mean(
                        &matched_costs
                            .iter()
                            .map(|c| (-c / s).exp())
                            .collect::<Vec<_>>(),
                    )
                };
                // score is increasing in s
                let (mut lo, mut hi) = (1e-12_f64, 1.0_f64);
                while score(hi) < level {
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if score(mid) < level {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                RewardMap::Absolute { j_scale: hi }
            }
        };
        RewardModel::new(config, map)
    }

    /// Builds a [`Target`], synthesizing its matched controller.
    pub fn target(&self, params: EnvParams) -> Target {
        let reference_cost = match matched_lqr(&params, &self.config.rollout) {
            Ok(k) => self.mean_cost(&params, &k),
            Err(_) => f64::NAN,
        };
        Target {
            params,
            reference_cost,
        }
    }

    pub fn panel_costs(&self, params: &EnvParams, gain: &Matrix) -> Vec<f64> {
        self.panel
            .iter()
            .map(|x0| rollout(params, gain, x0, &self.config.rollout).cost)
            .collect()
    }

    pub fn mean_cost(&self, params: &EnvParams, gain: &Matrix) -> f64 {
        mean(&self.panel_costs(params, gain))
    }

    fn reward_from_costs(&self, target: &Target, costs: &[f64]) -> f64 {
        match self.map {
            RewardMap::Relative { sharpness } => {
                let ratio = mean(costs) / target.reference_cost;
                assert!(!ratio.is_nan(), "target has no reference cost");
                (-sharpness * (ratio - 1.0).max(0.0)).exp()
            }
            RewardMap::Absolute { j_scale } => mean(
                &costs
                    .iter()
                    .map(|c| (-c / j_scale).exp())
                    .collect::<Vec<_>>(),
            ),
        }
    }

    /// Reward in `[0, 1]`; diverged rollouts drive it to 0.
    pub fn reward(&self, target: &Target, gain: &Matrix) -> f64 {
        self.reward_from_costs(target, &self.panel_costs(&target.params, gain))
    }

    pub fn observation_rollout(&self, params: &EnvParams, gain: &Matrix) -> Trajectory {
        rollout(params, gain, &self.config.obs_state, &self.config.rollout)
    }

    pub fn evaluate(&self, target: &Target, gain: &Matrix) -> Evaluation {
        let costs = self.panel_costs(&target.params, gain);
        Evaluation {
            reward: self.reward_from_costs(target, &costs),
            mean_cost: mean(&costs),
            trajectory: self.observation_rollout(&target.params, gain),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nominal() -> EnvParams {
        EnvParams::new(1.5, 1.5, 1.5, 1.5)
    }

    #[test]
    fn kinematic_block_structure() {
        let (a, b) = linearize(&EnvParams::new(1.2, 1.9, 1.1, 1.7));
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(a[(i, j)], 0.0);
                assert_eq!(a[(i, j + 2)], if i == j { 1.0 } else { 0.0 });
                assert_eq!(b[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn equilibria_have_zero_derivative() {
        let p = nominal();
        assert_eq!(nonlinear_dynamics(&p, &[0.0; 4], &[0.0; 2]), [0.0; 4]);
        let down = nonlinear_dynamics(&p, &[std::f64::consts::PI, 0.0, 0.0, 0.0], &[0.0; 2]);
        for v in down {
            assert!(v.abs() < 1e-12, "{down:?}");
        }
    }

    #[test]
    fn energy_conserved_without_damping() {
        let p = EnvParams {
            m1: 1.3,
            m2: 1.7,
            b1: 0.0,
            b2: 0.0,
        };
        let mut x = [0.4, -0.3, 0.2, 0.1];
        let e0 = mechanical_energy(&p, &x);
        for _ in 0..10_000 {
            x = rk4_step(|s| nonlinear_dynamics(&p, s, &[0.0; 2]), &x, 1e-4);
        }
        assert!((mechanical_energy(&p, &x) - e0).abs() < 1e-6);
    }

    #[test]
    fn zero_initial_state_stays_at_rest() {
        let t = rollout(
            &nominal(),
            &Matrix::zeros(2, 4),
            &[0.0; 4],
            &RolloutConfig::default(),
        );
        assert_eq!(t.states.len(), 251);
        assert!(t.states.iter().all(|s| *s == [0.0; 4]));
        assert_eq!(t.cost, 0.0);
        assert!(!t.diverged);
    }

    #[test]
    fn open_loop_repels_from_upright() {
        let x0 = [0.1, 0.0, 0.0, 0.0];
        let t = rollout(
            &nominal(),
            &Matrix::zeros(2, 4),
            &x0,
            &RolloutConfig::default(),
        );
        let norm = t
            .states
            .last()
            .unwrap()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        // unstable modes grow by ~e^14 over the horizon, short of the cap
        assert!(norm > 1e3 * 0.1, "final norm {norm}");
        assert_eq!(t.states.len(), 251);
    }

    #[test]
    fn positive_feedback_is_flagged_diverged() {
        let mut k = Matrix::zeros(2, 4);
        for i in 0..2 {
            k[(i, i)] = -200.0;
        }
        let t = rollout(
            &nominal(),
            &k,
            &[0.1, 0.0, 0.0, 0.0],
            &RolloutConfig::default(),
        );
        assert!(t.diverged);
        assert_eq!(t.cost, DIVERGED_COST);
        assert_eq!(t.states.len(), 251);
        assert_eq!(t.actions.len(), 250);
        assert!(t.states.iter().all(|s| s.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn observe_constant_and_zero() {
        let mk = |s: State| Trajectory {
            dt: 0.01,
            states: vec![s; 251],
            actions: vec![[0.0; 2]; 250],
            cost: 0.0,
            diverged: false,
        };
        assert_eq!(
            observe(&mk([0.0; 4]), ObsMode::Full),
            TrajObservation::zeros()
        );
        let o = observe(&mk([0.25, -0.5, 3.0, 4.0]), ObsMode::LastWindow);
        for k in 0..OBS_POINTS {
            assert_eq!(o.values[2 * k], 0.25);
            assert_eq!(o.values[2 * k + 1], -0.5);
        }
    }

    #[test]
    fn observation_indices() {
        let full = ObsMode::Full.indices(251, 0.01);
        assert_eq!(full[0], 0);
        assert_eq!(full[11], 250);
        let last = ObsMode::LastWindow.indices(251, 0.01);
        assert_eq!(last[0], 200);
        assert_eq!(last[11], 250);
        assert!(last.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn panel_is_deterministic_and_bounded() {
        let cfg = TaskConfig::default();
        let p = cfg.panel();
        assert_eq!(p, cfg.panel());
        assert_eq!(p.len(), 8);
        assert!(p
            .iter()
            .all(|s| s[0].abs() <= 0.4 && s[1].abs() <= 0.4 && s[2] == 0.0 && s[3] == 0.0));
    }

    fn random_params(rng: &mut ChaCha8Rng) -> EnvParams {
        EnvParams::new(
            rng.random_range(1.0..=2.0),
            rng.random_range(1.0..=2.0),
            rng.random_range(1.0..=2.0),
            rng.random_range(1.0..=2.0),
        )
    }

    #[test]
    fn linearize_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = 1e-6;
        let mut cases = vec![nominal()];
        cases.extend((0..50).map(|_| random_params(&mut rng)));
        for p in cases {
            let (a, b) = linearize(&p);
            for j in 0..4 {
                let mut xp = [0.0; 4];
                xp[j] = h;
                let mut xm = [0.0; 4];
                xm[j] = -h;
                let fp = nonlinear_dynamics(&p, &xp, &[0.0; 2]);
                let fm = nonlinear_dynamics(&p, &xm, &[0.0; 2]);
                for i in 0..4 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert!(
                        (fd - a[(i, j)]).abs() < 1e-5,
                        "A[{i},{j}] {fd} vs {}",
                        a[(i, j)]
                    );
                }
            }
            for j in 0..2 {
                let mut up = [0.0; 2];
                up[j] = h;
                let mut um = [0.0; 2];
                um[j] = -h;
                let fp = nonlinear_dynamics(&p, &[0.0; 4], &up);
                let fm = nonlinear_dynamics(&p, &[0.0; 4], &um);
                for i in 0..4 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert!((fd - b[(i, j)]).abs() < 1e-5, "B[{i},{j}]");
                }
            }
        }
    }

    #[test]
    fn gravity_block_has_two_unstable_modes() {
        let grid = [1.0, 1.25, 1.5, 1.75, 2.0];
        for &m1 in &grid {
            for &m2 in &grid {
                for &b1 in &grid {
                    for &b2 in &grid {
                        let (a, _) = linearize(&EnvParams::new(m1, m2, b1, b2));
                        let g = a.block(2, 0, 2, 2);
                        // relative coordinates put negative entries off the diagonal
                        assert!(g[(0, 0)] > 0.0 && g[(1, 1)] > 0.0);
                        let tr = g[(0, 0)] + g[(1, 1)];
                        let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
                        assert!(tr > 0.0 && det > 0.0, "({m1},{m2}): tr {tr} det {det}");
                    }
                }
            }
        }
    }

    #[test]
    fn matched_lqr_beats_random_gains() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = RolloutConfig::default();
        let x0 = [0.3, 0.3, 0.0, 0.0];
        for p in [nominal(), EnvParams::new(1.8, 1.2, 1.5, 1.5)] {
            let k = matched_lqr(&p, &cfg).unwrap();
            let best = rollout(&p, &k, &x0, &cfg).cost;
            for _ in 0..100 {
                let g = Matrix::from_vec(
                    2,
                    4,
                    (0..8).map(|_| rng.random_range(-50.0..=50.0)).collect(),
                );
                assert!(best < rollout(&p, &g, &x0, &cfg).cost);
            }
        }
    }

    fn model() -> RewardModel {
        RewardModel::calibrate(TaskConfig::default())
    }

    #[test]
    fn reward_calibration_and_extremes() {
        let m = model();
        let wd = m.target(EnvParams::new(1.8, 1.2, 1.5, 1.5));
        let matched = matched_lqr(&wd.params, &m.config.rollout).unwrap();
        assert!(m.reward(&wd, &matched) >= 0.97);
        let centroid = matched_lqr(&nominal(), &m.config.rollout).unwrap();
        assert!((m.reward(&wd, &centroid) - 0.95).abs() < 1e-9);
        assert!(m.reward(&wd, &Matrix::zeros(2, 4)) <= 0.01);
        assert_eq!(m.reward(&wd, &centroid), model().reward(&wd, &centroid));
    }

    #[test]
    fn absolute_map_scores_matched_controller_at_level() {
        let mut cfg = TaskConfig::default();
        cfg.reward.map = RewardMapKind::Absolute;
        let m = RewardModel::calibrate(cfg);
        let wd = m.target(EnvParams::new(1.8, 1.2, 1.5, 1.5));
        let matched = matched_lqr(&wd.params, &m.config.rollout).unwrap();
        assert!((m.reward(&wd, &matched) - 0.98).abs() < 1e-9);
        assert!(m.reward(&wd, &Matrix::zeros(2, 4)) <= 0.01);
    }

    #[test]
    fn reward_is_monotone_in_mean_cost() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = m.target(EnvParams::new(1.8, 1.2, 1.5, 1.5));
        let mut scored: Vec<(f64, f64)> = (0..30)
            .map(|_| {
                let k = matched_lqr(&random_params(&mut rng), &m.config.rollout).unwrap();
                let e = m.evaluate(&t, &k);
                (e.mean_cost, e.reward)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(scored.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn halved_integrator_step_barely_moves_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let coarse = RolloutConfig::default();
        let fine = RolloutConfig {
            integrator_dt: coarse.control_dt / 2.0,
            ..coarse
        };
        for _ in 0..20 {
            let target = random_params(&mut rng);
            let k = matched_lqr(&random_params(&mut rng), &coarse).unwrap();
            let x0 = [
                rng.random_range(-0.4..=0.4),
                rng.random_range(-0.4..=0.4),
                0.0,
                0.0,
            ];
            let a = rollout(&target, &k, &x0, &coarse).cost;
            let b = rollout(&target, &k, &x0, &fine).cost;
            assert!((a - b).abs() / b < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn last_window_sees_only_the_settled_state() {
        let p = EnvParams::new(1.8, 1.2, 1.5, 1.5);
        let x0 = [0.3, 0.3, 0.0, 0.0];
        let peak = |o: &TrajObservation| o.values.iter().map(|v| v.abs()).fold(0.0, f64::max);

        // default weights settle with a ~1 s time constant
        let cfg = RolloutConfig::default();
        let t = rollout(&p, &matched_lqr(&p, &cfg).unwrap(), &x0, &cfg);
        let full = observe(&t, ObsMode::Full);
        let last = observe(&t, ObsMode::LastWindow);
        assert_eq!(full.values[0], 0.3);
        assert!(peak(&last) < 0.1 * peak(&full));

        // a stiff position weight converges well before the window opens
        let stiff = RolloutConfig {
            state_weights: [1e4, 1e4, 1.0, 1.0],
            ..cfg
        };
        let t = rollout(&p, &matched_lqr(&p, &stiff).unwrap(), &x0, &stiff);
        assert!(peak(&observe(&t, ObsMode::LastWindow)) < 1e-3);
        assert!(peak(&observe(&t, ObsMode::Full)) >= 0.3);
    }
}
