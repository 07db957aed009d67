//! Invariants shared by the property tests and the acceptance run. Each check
//! returns `Err` with a description instead of panicking so callers can report.

#![allow(dead_code)]

use adaptsim::adaptrl::LearnerConfig;
use adaptsim::adaptrl::{
    shape_reward, td_loss_and_grad, BdqNet, EpsilonSchedule, ReplayBuffer, Transition,
    BRANCH_ACTIONS, STATE_DIM,
};
use adaptsim::harness::{normalize_report, run_adaptsim, run_sysid, Budget, Method};
use adaptsim::numerics::{discretize, dlqr, DiscreteSystem, Matrix};
use adaptsim::pendulum::{
    linearize, matched_lqr, nonlinear_dynamics, observe, rollout, EnvParams, ObsMode, RewardModel,
    RolloutConfig, TaskConfig, OBS_DIM,
};
use adaptsim::pipeline::checkpoint::{decode, encode};
use adaptsim::pipeline::{adapt, adapt_state, meta_train, AdaptSettings, MetaConfig, MetaOutcome};
use adaptsim::simdist::{AdaptAction, ParamSpace, SimParamDist};
use adaptsim::sysid::{grid_observations, point_estimate, GridPosterior, SysIdConfig};
use adaptsim::taskpolicy::{PolicyCache, PolicyTrainer, ReuseConfig, TaskPolicy};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(
            proptest::test_runner::RngAlgorithm::ChaCha,
        ),
    )
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Check
where
    S::Value: std::fmt::Debug,
{
    runner(cases)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn model() -> RewardModel {
    RewardModel::calibrate(TaskConfig::default())
}

fn params_in_box() -> impl Strategy<Value = [f64; 4]> {
    [1.0..=2.0f64, 1.0..=2.0f64, 1.0..=2.0f64, 1.0..=2.0f64]
}

// ---------- numerics ----------

/// Random discrete system with a generic (hence controllable) input matrix.
pub fn random_system(rng: &mut impl Rng, n: usize, m: usize) -> DiscreteSystem {
    let a = Matrix::from_vec(
        n,
        n,
        (0..n * n).map(|_| rng.random_range(-0.6..0.6)).collect(),
    );
    let b = Matrix::from_vec(
        n,
        m,
        (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    DiscreteSystem::new(a, b, 0.01)
}

fn random_psd(rng: &mut impl Rng, n: usize, floor: f64) -> Matrix {
    let l = Matrix::from_vec(
        n,
        n,
        (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    &(&l * &l.transpose()) + &Matrix::identity(n).scale(floor)
}

fn riccati_residual(sys: &DiscreteSystem, q: &Matrix, r: &Matrix, p: &Matrix) -> f64 {
    let (a, b) = (&sys.a, &sys.b);
    let at = a.transpose();
    let bt = b.transpose();
    let s = r + &(&(&bt * p) * b);
    let k = s
        .solve(&(&(&bt * p) * a))
        .expect("R + BᵀPB is positive definite");
    let rhs = &(q + &(&(&at * p) * a)) - &(&(&(&at * p) * b) * &k);
    (p - &rhs).norm_inf()
}

/// Riccati residual, symmetry and semidefiniteness of every returned `P` over
/// `count` random stabilizable systems.
pub fn riccati_solutions(count: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..count {
        let n = 2 + k % 3;
        let m = 1 + k % 2;
        let sys = random_system(&mut rng, n, m);
        let q = random_psd(&mut rng, n, 0.1);
        let r = random_psd(&mut rng, m, 0.1);
        let (_, p) = dlqr(&sys, &q, &r).map_err(|e| format!("system {k}: {e}"))?;
        let res = riccati_residual(&sys, &q, &r, &p);
        ensure(res < 1e-8, || format!("system {k}: residual {res:e}"))?;
        ensure((&p - &p.transpose()).max_abs() < 1e-10, || {
            format!("system {k}: P not symmetric")
        })?;
        for _ in 0..100 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rq = p.quad_form(&x) / x.iter().map(|v| v * v).sum::<f64>();
            ensure(rq >= -1e-10, || {
                format!("system {k}: Rayleigh quotient {rq}")
            })?;
        }
    }
    Ok(())
}

/// Backward recursion in Joseph form, written independently of the solver.
fn finite_horizon_gain(sys: &DiscreteSystem, q: &Matrix, r: &Matrix, horizon: usize) -> Matrix {
    let (a, b) = (&sys.a, &sys.b);
    let mut p = q.clone();
    let mut k = Matrix::zeros(b.cols(), a.rows());
    for _ in 0..horizon {
        let bt = b.transpose();
        k = (r + &(&(&bt * &p) * b)).solve(&(&(&bt * &p) * a)).unwrap();
        let acl = a - &(b * &k);
        p = &(q + &(&(&k.transpose() * r) * &k)) + &(&(&acl.transpose() * &p) * &acl);
        p = p.symmetrized();
    }
    k
}

pub fn dlqr_matches_finite_horizon(count: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..count {
        let sys = random_system(&mut rng, 4, 2);
        let q = random_psd(&mut rng, 4, 0.1);
        let r = random_psd(&mut rng, 2, 0.1);
        let (gain, _) = dlqr(&sys, &q, &r).map_err(|e| format!("system {k}: {e}"))?;
        let oracle = finite_horizon_gain(&sys, &q, &r, 10_000);
        let err = (&gain - &oracle).max_abs();
        ensure(err < 1e-6, || {
            format!("system {k}: gain differs by {err:e}")
        })?;
    }
    Ok(())
}

pub fn discretization_semigroup() -> Check {
    run(
        20,
        (params_in_box(), 1usize..8, 0.001f64..0.01),
        |(p, n, dt)| {
            let (a, b) = linearize(&EnvParams::from_slice(&p));
            let one = discretize(&a, &b, dt).unwrap();
            let many = discretize(&a, &b, n as f64 * dt).unwrap();
            let mut ad = Matrix::identity(4);
            for _ in 0..n {
                ad = &ad * &one.a;
            }
            prop_assert!(
                (&ad - &many.a).max_abs() < 1e-8,
                "semigroup error {}",
                (&ad - &many.a).max_abs()
            );
            Ok(())
        },
    )
}

// ---------- pendulum ----------

pub fn linearize_matches_finite_differences(count: u32) -> Check {
    run(count, params_in_box(), |p| {
        let p = EnvParams::from_slice(&p);
        let (a, b) = linearize(&p);
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = [0.0; 4];
            let mut xm = [0.0; 4];
            xp[j] = h;
            xm[j] = -h;
            let fp = nonlinear_dynamics(&p, &xp, &[0.0; 2]);
            let fm = nonlinear_dynamics(&p, &xm, &[0.0; 2]);
            for i in 0..4 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                prop_assert!(
                    (fd - a[(i, j)]).abs() < 1e-5,
                    "A[{i},{j}]: {fd} vs {}",
                    a[(i, j)]
                );
            }
        }
        for j in 0..2 {
            let mut up = [0.0; 2];
            let mut um = [0.0; 2];
            up[j] = h;
            um[j] = -h;
            let fp = nonlinear_dynamics(&p, &[0.0; 4], &up);
            let fm = nonlinear_dynamics(&p, &[0.0; 4], &um);
            for i in 0..4 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                prop_assert!(
                    (fd - b[(i, j)]).abs() < 1e-5,
                    "B[{i},{j}]: {fd} vs {}",
                    b[(i, j)]
                );
            }
        }
        Ok(())
    })
}

pub fn reward_monotone_in_cost() -> Check {
    let m = model();
    run(
        30,
        (params_in_box(), params_in_box(), params_in_box()),
        |(t, a, b)| {
            let target = m.target(EnvParams::from_slice(&t));
            let ka = matched_lqr(&EnvParams::from_slice(&a), &m.config.rollout).unwrap();
            let kb = matched_lqr(&EnvParams::from_slice(&b), &m.config.rollout).unwrap();
            let (ja, jb) = (
                m.mean_cost(&target.params, &ka),
                m.mean_cost(&target.params, &kb),
            );
            let (ra, rb) = (m.reward(&target, &ka), m.reward(&target, &kb));
            if ja <= jb {
                prop_assert!(ra >= rb, "cost {ja} <= {jb} but reward {ra} < {rb}");
            } else {
                prop_assert!(rb >= ra, "cost {jb} < {ja} but reward {rb} < {ra}");
            }
            Ok(())
        },
    )
}

pub fn observation_shape() -> Check {
    let cfg = RolloutConfig::default();
    run(20, (params_in_box(), params_in_box()), |(t, k)| {
        let gain = matched_lqr(&EnvParams::from_slice(&k), &cfg).unwrap();
        let traj = rollout(
            &EnvParams::from_slice(&t),
            &gain,
            &[0.3, 0.3, 0.0, 0.0],
            &cfg,
        );
        for mode in [ObsMode::Full, ObsMode::LastWindow] {
            let o = observe(&traj, mode);
            prop_assert_eq!(o.values.len(), OBS_DIM);
            prop_assert!(o.values.iter().all(|v| v.is_finite()));
            prop_assert_eq!(
                mode.indices(traj.states.len(), traj.dt),
                mode.indices(251, 0.01)
            );
        }
        Ok(())
    })
}

pub fn integrator_resolution(count: u32) -> Check {
    let base = RolloutConfig::default();
    let fine = RolloutConfig {
        integrator_dt: base.integrator_dt / 2.0,
        ..base.clone()
    };
    run(count, (params_in_box(), params_in_box()), |(t, k)| {
        let target = EnvParams::from_slice(&t);
        let gain = matched_lqr(&EnvParams::from_slice(&k), &base).unwrap();
        let x0 = [0.3, -0.2, 0.0, 0.0];
        let c = rollout(&target, &gain, &x0, &base).cost;
        let f = rollout(&target, &gain, &x0, &fine).cost;
        prop_assert!((c - f).abs() / f < 1e-3, "cost {c} vs {f}");
        Ok(())
    })
}

// ---------- simdist ----------

fn actions(len: usize) -> impl Strategy<Value = Vec<[i8; 4]>> {
    prop::collection::vec([-1i8..=1, -1i8..=1, -1i8..=1, -1i8..=1], len)
}

pub fn action_clamp_closure() -> Check {
    let space = ParamSpace::pendulum();
    run(
        64,
        (params_in_box(), actions(100), 0.01f64..=0.5),
        |(start, seq, delta)| {
            let mut d = SimParamDist::dirac(&space, start.to_vec()).unwrap();
            for a in seq {
                d = d.apply_action(&space, &AdaptAction::from_signs(&a), delta);
                prop_assert!(space.contains(d.mean()), "mean {:?} left the box", d.mean());
            }
            Ok(())
        },
    )
}

pub fn action_negation_round_trip() -> Check {
    let space = ParamSpace::pendulum();
    run(
        256,
        (
            params_in_box(),
            [-1i8..=1, -1i8..=1, -1i8..=1, -1i8..=1],
            0.01f64..=0.5,
        ),
        |(start, a, delta)| {
            let d = SimParamDist::dirac(&space, start.to_vec()).unwrap();
            let action = AdaptAction::from_signs(&a);
            let no_clamp = (0..4).all(|i| {
                let moved = start[i] + f64::from(a[i]) * delta * space.range(i);
                moved >= space.lo[i] && moved <= space.hi[i]
            });
            if no_clamp {
                let back = d.apply_action(&space, &action, delta).apply_action(
                    &space,
                    &action.negated(),
                    delta,
                );
                for i in 0..4 {
                    prop_assert!((back.mean()[i] - start[i]).abs() < 1e-12);
                }
            }
            Ok(())
        },
    )
}

pub fn normalization_bijection() -> Check {
    let space = ParamSpace::pendulum_with_ranges([(0.5, 3.0), (1.3, 2.3), (1.0, 2.0), (0.1, 10.0)]);
    let lo = space.lo.clone();
    let hi = space.hi.clone();
    let strat = (0..4).map(|d| lo[d]..=hi[d]).collect::<Vec<_>>();
    run(256, strat, |x| {
        let back = space.from_unit(&space.to_unit(&x));
        for d in 0..4 {
            prop_assert!((back[d] - x[d]).abs() < 1e-12);
        }
        Ok(())
    })
}

// ---------- taskpolicy ----------

struct CountingTrainer;

impl PolicyTrainer for CountingTrainer {
    fn train(&mut self, d: &SimParamDist, _budget: u64) -> TaskPolicy {
        TaskPolicy {
            gain: Matrix::zeros(2, 4),
            synthesized_for: d.clone(),
            budget_used: 0,
            reuse_count: 0,
            failed: false,
        }
    }

    fn fine_tune(&mut self, policy: &TaskPolicy, _d: &SimParamDist, _budget: u64) -> TaskPolicy {
        policy.clone()
    }
}

fn walk(space: &ParamSpace, start: [f64; 4], steps: &[[i8; 4]]) -> Vec<SimParamDist> {
    let mut d = SimParamDist::dirac(space, start.to_vec()).unwrap();
    let mut out = vec![d.clone()];
    for a in steps {
        d = d.apply_action(space, &AdaptAction::from_signs(a), 0.1);
        out.push(d.clone());
    }
    out
}

pub fn reuse_cache_invariants() -> Check {
    let space = ParamSpace::pendulum();
    run(32, (params_in_box(), actions(99)), |(start, steps)| {
        let queries = walk(&space, start, &steps);
        let cfg = ReuseConfig::default();
        let mut cache = PolicyCache::new(cfg);
        let ids: Vec<usize> = queries
            .iter()
            .map(|q| cache.get_or_train(&space, q, &mut CountingTrainer).0)
            .collect();
        for id in 0..cache.policy_count() {
            prop_assert!(cache.policy(id).budget_used <= cfg.max_budget + cfg.init_budget);
        }
        prop_assert!(
            cache.total_budget() < 100 * cfg.init_budget,
            "reuse saved nothing"
        );

        let mut again = PolicyCache::new(cfg);
        let ids2: Vec<usize> = queries
            .iter()
            .map(|q| again.get_or_train(&space, q, &mut CountingTrainer).0)
            .collect();
        prop_assert_eq!(&ids, &ids2);
        prop_assert_eq!(cache, again);

        let mut fresh = PolicyCache::new(ReuseConfig {
            reuse_threshold: 0.0,
            ..cfg
        });
        for q in &queries {
            let (_, outcome) = fresh.get_or_train(&space, q, &mut CountingTrainer);
            prop_assert_eq!(outcome, adaptsim::taskpolicy::CacheOutcome::Fresh);
        }
        prop_assert_eq!(fresh.total_budget(), 100 * cfg.init_budget);
        Ok(())
    })
}

// ---------- adaptrl ----------

pub fn sparse_reward_boundary() -> Check {
    for t in [0.0, 0.5, 0.95, 1.0] {
        ensure(shape_reward(t, t) == t, || {
            format!("reward equal to threshold {t} was zeroed")
        })?;
    }
    run(512, (0.0f64..=1.0, 0.0f64..=1.0), |(raw, thr)| {
        let s = shape_reward(raw, thr);
        prop_assert_eq!(s, if raw >= thr { raw } else { 0.0 });
        Ok(())
    })
}

fn random_net(seed: u64, hidden: &[usize], weight_scale: f64) -> BdqNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = BdqNet::new(STATE_DIM, hidden, 4, &mut rng);
    net.params_mut()
        .for_each(|p| *p = *p * weight_scale + rng.random_range(-0.1..0.1));
    net
}

pub fn dueling_identity() -> Check {
    run(
        64,
        (
            any::<u64>(),
            0.1f64..20.0,
            prop::collection::vec(-5.0f64..5.0, STATE_DIM),
        ),
        |(seed, scale, s)| {
            let net = random_net(seed, &[16, 16], scale);
            let v = net.value(&s);
            for branch in net.forward(&s) {
                let mean = branch.iter().sum::<f64>() / BRANCH_ACTIONS as f64;
                prop_assert!(
                    (mean - v).abs() <= 1e-10 * v.abs().max(1.0),
                    "branch mean {mean} vs value {v}"
                );
            }
            Ok(())
        },
    )
}

/// Analytic gradients of a linear functional of Q against central
/// differences, for parameters in every layer of the full-size network.
pub fn network_gradients() -> Check {
    let net = random_net(5, &[128, 128], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = 3;
    let x: Vec<f64> = (0..batch * STATE_DIM)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w: Vec<Vec<[f64; 3]>> = (0..batch)
        .map(|_| {
            (0..4)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect()
        })
        .collect();
    let objective = |n: &BdqNet| -> f64 {
        let q = n.forward_cached(&x, batch).q;
        (0..batch)
            .map(|b| {
                (0..4)
                    .map(|d| (0..3).map(|k| q[b][d][k] * w[b][d][k]).sum::<f64>())
                    .sum::<f64>()
            })
            .sum()
    };
    let cache = net.forward_cached(&x, batch);
    let mut grad = net.zeros_like();
    net.backward(&cache, &w, &mut grad);
    let analytic: Vec<f64> = grad.params().copied().collect();
    let count = net.param_count();
    let h = 1e-6;
    let mut checked = 0;
    // stride so every layer's weights and biases are visited
    for idx in (0..count).step_by(97).chain(count - 20..count) {
        if analytic[idx].abs() < 1e-7 {
            continue;
        }
        let mut p = net.clone();
        *p.params_mut().nth(idx).unwrap() += h;
        let mut m = net.clone();
        *m.params_mut().nth(idx).unwrap() -= h;
        let fd = (objective(&p) - objective(&m)) / (2.0 * h);
        let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs());
        ensure(rel < 1e-4, || {
            format!("param {idx}: fd {fd} vs analytic {}", analytic[idx])
        })?;
        checked += 1;
    }
    ensure(checked > 100, || {
        format!("only {checked} parameters had usable gradients")
    })
}

fn dummy_transition(k: usize) -> Transition {
    Transition {
        state: (0..STATE_DIM)
            .map(|i| ((i + k) as f64 * 0.3).sin())
            .collect(),
        action: vec![k % 3, (k + 1) % 3, (k + 2) % 3, k % 3],
        reward: (k % 10) as f64 / 10.0,
        next_state: (0..STATE_DIM)
            .map(|i| ((i * k) as f64 * 0.1).cos())
            .collect(),
        terminal: k % 10 == 9,
    }
}

/// Inclusion count of every entry over `draws` batches of `batch` from a
/// 100-entry buffer, each within 3σ of the binomial expectation.
pub fn replay_uniformity(draws: usize, batch: usize) -> Check {
    let n = 100;
    let mut buf = ReplayBuffer::new(n, 2024);
    for k in 0..n {
        buf.push(dummy_transition(k));
    }
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        for i in buf.sample_indices(batch) {
            counts[i] += 1;
        }
    }
    let p = batch as f64 / n as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let worst = counts
        .iter()
        .map(|&c| (c as f64 - mean).abs() / sigma)
        .fold(0.0, f64::max);
    ensure(worst <= 3.0, || format!("an entry deviates by {worst:.2}σ"))
}

pub fn epsilon_schedule_shape() -> Check {
    run(256, (1usize..5000, 0.05f64..=1.0), |(total, frac)| {
        let s = EpsilonSchedule::new(total, frac);
        let values: Vec<f64> = (0..=total + 5).map(|e| s.value(e)).collect();
        prop_assert_eq!(values[0], 1.0);
        prop_assert!(values.windows(2).all(|w| w[1] <= w[0]));
        let span = frac * total as f64;
        let zero_from = span.ceil() as usize;
        for (e, v) in values.iter().enumerate() {
            if e >= zero_from {
                prop_assert_eq!(*v, 0.0, "episode {} of {}", e, total);
            } else {
                prop_assert!(*v > 0.0);
            }
        }
        Ok(())
    })
}

pub fn zero_lr_loss_is_constant() -> Check {
    let net = random_net(9, &[32, 32], 1.0);
    let target = random_net(10, &[32, 32], 1.0);
    let ts: Vec<Transition> = (0..16).map(dummy_transition).collect();
    let refs: Vec<&Transition> = ts.iter().collect();
    let first = td_loss_and_grad(&net, &target, &refs, 0.9).0;
    let mut learner = adaptsim::adaptrl::Learner::from_net(
        LearnerConfig {
            lr: 0.0,
            batch_size: 16,
            ..LearnerConfig::default()
        },
        net,
        3,
    );
    learner.target = target;
    for t in ts.iter().cloned() {
        learner.buffer.push(t);
    }
    for _ in 0..25 {
        let l = learner.train_step(0.9);
        ensure((l - first).abs() < 1e-12, || {
            format!("loss moved from {first} to {l}")
        })?;
    }
    Ok(())
}

// ---------- pipeline ----------

pub fn tiny_meta_config(total_steps: usize) -> MetaConfig {
    MetaConfig {
        total_steps,
        learner: LearnerConfig {
            hidden: vec![16, 16],
            batch_size: 8,
            ..LearnerConfig::default()
        },
        ..MetaConfig::default()
    }
}

/// Transition bookkeeping, library closure and greedy adaptation for one
/// small meta-training run.
pub fn pipeline_invariants(out: &MetaOutcome, cfg: &MetaConfig) -> Check {
    let i = cfg.horizon;
    let episodes = cfg.episodes();
    let ts = out.replay.entries();
    ensure(ts.len() == episodes * i, || {
        format!("{} transitions for {episodes} episodes of {i}", ts.len())
    })?;
    for (k, t) in ts.iter().enumerate() {
        ensure(t.terminal == (k % i == i - 1), || {
            format!("transition {k} terminal flag {}", t.terminal)
        })?;
        ensure((0.0..=1.0).contains(&t.reward), || {
            format!("transition {k} reward {}", t.reward)
        })?;
    }
    let lib = &out.checkpoint.library;
    ensure(lib.len() == episodes * (i + 1), || {
        format!("library holds {}", lib.len())
    })?;
    ensure(
        lib.entries()
            .iter()
            .all(|e| cfg.space.contains(e.dist.mean())),
        || "library mean outside the box".into(),
    )?;

    let m = model();
    let settings = AdaptSettings::from_config(cfg, 4);
    for target in [[1.8, 1.2, 1.5, 1.5], [1.8, 0.3, 1.5, 1.5]] {
        let r = adapt(
            &m,
            EnvParams::from_slice(&target),
            &out.checkpoint.online,
            lib,
            &settings,
        );
        let max = r
            .trace
            .iter()
            .map(|t| t.raw_reward)
            .fold(f64::NEG_INFINITY, f64::max);
        ensure(r.best_reward == max, || {
            format!("best {} but trace max {max}", r.best_reward)
        })?;
        for rec in &r.trace {
            if let Some(a) = &rec.action {
                let d = SimParamDist::dirac(&cfg.space, rec.mean.clone()).unwrap();
                let state = adapt_state(&cfg.space, &d, &rec.observation, cfg.obs_scale);
                ensure(out.checkpoint.online.greedy_action(&state) == *a, || {
                    "non-greedy adaptation action".into()
                })?;
            }
        }
    }
    Ok(())
}

pub fn checkpoint_round_trip(out: &MetaOutcome) -> Check {
    let bytes = encode(&out.checkpoint);
    let back = decode(&bytes).map_err(|e| e.to_string())?;
    ensure(back == out.checkpoint, || {
        "decoded checkpoint differs".into()
    })?;
    ensure(encode(&back) == bytes, || {
        "re-encoding is not byte-identical".into()
    })?;
    run(64, (0..bytes.len(), 1u8..=255), |(pos, flip)| {
        let mut b = bytes.clone();
        b[pos] ^= flip;
        prop_assert!(
            decode(&b).is_err(),
            "corruption at byte {pos} went unnoticed"
        );
        Ok(())
    })
}

pub fn small_meta_run() -> (MetaConfig, MetaOutcome) {
    let cfg = tiny_meta_config(200);
    let out = meta_train(&cfg, 3);
    (cfg, out)
}

// ---------- sysid ----------

/// Grid index of `t` and the lattice observations of its matched policy.
fn planted(
    t: &[f64],
    resolution: usize,
    m: &RewardModel,
) -> Result<
    (
        GridPosterior,
        usize,
        Vec<adaptsim::pendulum::TrajObservation>,
        adaptsim::pendulum::TrajObservation,
    ),
    String,
> {
    let post = GridPosterior::uniform(&ParamSpace::pendulum(), resolution);
    let idx = post
        .grid
        .iter()
        .position(|g| g.iter().zip(t).all(|(a, b)| (a - b).abs() < 1e-12))
        .ok_or_else(|| format!("{t:?} is not on the grid"))?;
    let p = EnvParams::from_slice(t);
    let gain = matched_lqr(&p, &m.config.rollout).map_err(|e| e.to_string())?;
    let sims = grid_observations(&post.grid, &gain, m, ObsMode::Full);
    let target = observe(&m.observation_rollout(&p, &gain), ObsMode::Full);
    Ok((post, idx, sims, target))
}

/// On-grid targets observed through their matched policy are recovered
/// exactly by the point estimate.
pub fn planted_point_recovery(targets: &[Vec<f64>], resolution: usize) -> Check {
    let m = model();
    for t in targets {
        let (post, idx, sims, target) = planted(t, resolution, &m)?;
        let est = point_estimate(&sims, &target);
        ensure(est == idx, || {
            format!("{t:?}: point estimate {:?}", post.grid[est])
        })?;
    }
    Ok(())
}

/// Posterior mean within one lattice cell of each planted target after
/// `updates` identical observations of its matched policy.
pub fn planted_bayes_recovery(targets: &[Vec<f64>], resolution: usize, updates: usize) -> Check {
    let m = model();
    let space = ParamSpace::pendulum();
    let sigma = SysIdConfig::default().sigma;
    for t in targets {
        let (mut post, _, sims, target) = planted(t, resolution, &m)?;
        for _ in 0..updates {
            post.update(&sims, &target, sigma);
        }
        let mean = post.mean();
        for d in 0..4 {
            let cell = space.range(d) / (resolution - 1) as f64;
            ensure((mean[d] - t[d]).abs() <= cell, || {
                format!("{t:?}: posterior mean {mean:?}")
            })?;
        }
    }
    Ok(())
}

/// Lattice points of the cell that contains the within-domain target.
pub fn wd_cell_targets() -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for m1 in [1.75, 1.875] {
        for m2 in [1.125, 1.25] {
            out.push(vec![m1, m2, 1.5, 1.5]);
        }
    }
    out
}

/// Random lattice points strictly inside the box.
pub fn random_grid_targets(count: usize, resolution: usize, seed: u64) -> Vec<Vec<f64>> {
    let space = ParamSpace::pendulum();
    let grid = space.grid(resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let g = &grid[rng.random_range(0..grid.len())];
        if (0..4).all(|d| g[d] > space.lo[d] && g[d] < space.hi[d]) {
            out.push(g.clone());
        }
    }
    out
}

pub fn posterior_order_insensitive() -> Check {
    let m = model();
    let space = ParamSpace::pendulum();
    let base = GridPosterior::uniform(&space, 3);
    let gains: Vec<Matrix> = [[1.2, 1.2, 1.2, 1.2], [1.8, 1.3, 1.6, 1.1], [1.5; 4]]
        .iter()
        .map(|p| matched_lqr(&EnvParams::from_slice(p), &m.config.rollout).unwrap())
        .collect();
    let t = EnvParams::new(1.4, 1.7, 1.3, 1.9);
    let obs: Vec<_> = gains
        .iter()
        .map(|g| {
            (
                grid_observations(&base.grid, g, &m, ObsMode::Full),
                observe(&m.observation_rollout(&t, g), ObsMode::Full),
            )
        })
        .collect();
    let mut fwd = base.clone();
    for (s, o) in &obs {
        fwd.update(s, o, 0.1);
    }
    let mut rev = base.clone();
    for (s, o) in obs.iter().rev() {
        rev.update(s, o, 0.1);
    }
    let diff = fwd
        .weights()
        .iter()
        .zip(rev.weights())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(diff < 1e-10, || {
        format!("update order changed weights by {diff:e}")
    })
}

// ---------- harness ----------

pub fn normalized_rewards_in_unit_interval() -> Check {
    run(
        512,
        (-1.0f64..2.0, 0.0f64..1.0, 0.0f64..1.0),
        |(raw, a, b)| {
            match normalize_report(raw, a, b) {
                Ok(v) => prop_assert!((0.0..=1.0).contains(&v) && b > a),
                Err(_) => prop_assert!(b <= a),
            }
            Ok(())
        },
    )
}

/// Every adaptive method consumes the same number of target rollouts.
pub fn budget_parity(out: &MetaOutcome) -> Check {
    let m = model();
    let space = ParamSpace::pendulum();
    let budget = Budget {
        n_chains: 2,
        horizon: 3,
    };
    let t = EnvParams::new(1.8, 0.3, 1.5, 1.5);
    let a = run_adaptsim(&m, &out.checkpoint, &t, budget, 0);
    ensure(a.target_rollouts == budget.target_rollouts(), || {
        format!("AdaptSim used {}", a.target_rollouts)
    })?;
    let sysid_cfg = SysIdConfig {
        resolution: 3,
        ..SysIdConfig::default()
    };
    for method in [
        Method::SysIdBayes,
        Method::SysIdPoint,
        Method::SysIdBayesState,
        Method::SysIdPointState,
    ] {
        let r = run_sysid(method, &m, &space, &t, budget, &sysid_cfg);
        ensure(r.target_rollouts == a.target_rollouts, || {
            format!(
                "{} used {} target rollouts, AdaptSim {}",
                method.name(),
                r.target_rollouts,
                a.target_rollouts
            )
        })?;
    }
    Ok(())
}
