//! Stochastic simulation: Markov mode paths, Gaussian measurement noise,
//! bias signals, rollouts under a feedback policy and Monte Carlo ensembles.
//!
//! Every trial draws from its own ChaCha stream seeded from
//! `(master_seed, trial)`, and ensemble statistics are accumulated in trial
//! order after the (possibly parallel) rollouts complete, so summaries are
//! bit-identical for any number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Controller, PemAdmModel, TransitionMatrix};

/// States with a norm above this are treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BiasSignal {
    Zero,
    Constant(Vec<f64>),
    /// `v(k) = amplitude · sin(2πk / period + phase)`, entrywise.
    Sinusoid { amplitude: Vec<f64>, period: f64, phase: f64 },
}

impl BiasSignal {
    pub fn value(&self, k: usize) -> DVector<f64> {
        match self {
            BiasSignal::Zero => DVector::zeros(0),
            BiasSignal::Constant(v) => DVector::from_column_slice(v),
            BiasSignal::Sinusoid { amplitude, period, phase } => {
                let s = (2.0 * std::f64::consts::PI * k as f64 / period + phase).sin();
                DVector::from_iterator(amplitude.len(), amplitude.iter().map(|a| a * s))
            }
        }
    }

    /// Value padded to dimension `nv` (the zero signal has no fixed size).
    pub fn value_in(&self, k: usize, nv: usize) -> Result<DVector<f64>> {
        let v = self.value(k);
        match v.len() {
            0 => Ok(DVector::zeros(nv)),
            n if n == nv => Ok(v),
            n => Err(Error::Dimension(format!("bias has {n} entries, model expects {nv}"))),
        }
    }

    /// Fails with [`Error::BiasBound`] at the first step whose norm exceeds `bound`.
    pub fn check_bound(&self, horizon: usize, bound: f64) -> Result<()> {
        for k in 0..=horizon {
            let norm = self.value(k).norm();
            if norm > bound * (1.0 + 1e-12) {
                return Err(Error::BiasBound { step: k, norm, bound });
            }
            if matches!(self, BiasSignal::Zero | BiasSignal::Constant(_)) {
                break;
            }
        }
        Ok(())
    }
}

/// Maps a perceived measurement to a control input.
pub trait Policy: Sync {
    fn act(&self, mode: usize, y: &DVector<f64>) -> DVector<f64>;

    /// Marks steps the policy handled by a fallback rule.
    fn flagged(&self, _mode: usize, _y: &DVector<f64>) -> bool {
        false
    }
}

impl Policy for Controller {
    fn act(&self, mode: usize, y: &DVector<f64>) -> DVector<f64> {
        &self.gains[mode] * y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub r: Vec<usize>,
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub seed: u64,
    /// First step whose state was non-finite or above [`DIVERGENCE_NORM`];
    /// the trajectory stops before it.
    pub diverged_at: Option<usize>,
    /// Steps where the policy reported a fallback.
    pub flagged_steps: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// SplitMix64 finalizer; used to derive independent per-trial seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trial_seed(master_seed: u64, trial: u64) -> u64 {
    splitmix64(splitmix64(master_seed) ^ trial.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut modes = ChaCha8Rng::seed_from_u64(seed);
    modes.set_stream(0);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(1);
    (modes, noise)
}

/// Next mode by inverse CDF on row `i` of `t`.
pub fn next_mode<R: Rng + ?Sized>(t: &TransitionMatrix, i: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let n = t.modes();
    let mut acc = 0.0;
    for j in 0..n {
        acc += t.prob(i, j);
        if u < acc {
            return j;
        }
    }
    // Rounding left `acc` slightly below one: take the last reachable mode.
    (0..n).rev().find(|&j| t.prob(i, j) > 0.0).unwrap_or(n - 1)
}

/// Mode sequence `r(0..=steps)` starting at `r0`.
pub fn sample_markov_path<R: Rng + ?Sized>(t: &TransitionMatrix, r0: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    assert!(r0 < t.modes(), "initial mode {r0} out of range");
    let mut out = Vec::with_capacity(steps + 1);
    out.push(r0);
    for _ in 0..steps {
        let last = *out.last().unwrap();
        out.push(next_mode(t, last, rng));
    }
    out
}

/// Simulates `y = C_r x + D_r w + E_r v`, `u = policy(r, y)`, `x⁺ = A x + B u`
/// for `k = 0..=horizon`; the input is also evaluated at the last step.
pub fn rollout(
    model: &PemAdmModel,
    policy: &dyn Policy,
    x0: &DVector<f64>,
    r0: usize,
    horizon: usize,
    bias: &BiasSignal,
    seed: u64,
) -> Result<Trajectory> {
    let n1 = model.state_dim();
    let nw = model.noise_dim();
    let nv = model.modes[0].e.ncols();
    if x0.len() != n1 {
        return Err(Error::Dimension(format!("x0 has {} entries, state has {n1}", x0.len())));
    }
    if r0 >= model.mode_count() {
        return Err(Error::InvalidArgument(format!("initial mode {r0} out of range")));
    }
    bias.check_bound(horizon, model.bias_bound)?;
    bias.value_in(0, nv)?;

    let (mut mrng, mut nrng) = streams(seed);
    let mut traj = Trajectory {
        x: Vec::with_capacity(horizon + 1),
        r: Vec::with_capacity(horizon + 1),
        u: Vec::with_capacity(horizon + 1),
        y: Vec::with_capacity(horizon + 1),
        seed,
        diverged_at: None,
        flagged_steps: 0,
    };
    let mut x = x0.clone();
    let mut r = r0;
    for k in 0..=horizon {
        let mode = &model.modes[r];
        let w = DVector::from_fn(nw, |_, _| nrng.sample::<f64, _>(StandardNormal));
        let v = bias.value_in(k, nv)?;
        let y = &mode.c * &x + &mode.d * w + &mode.e * v;
        let u = policy.act(r, &y);
        if policy.flagged(r, &y) {
            traj.flagged_steps += 1;
        }
        let x_next = (k < horizon).then(|| &model.a * &x + &model.b * &u);
        traj.x.push(x);
        traj.r.push(r);
        traj.u.push(u);
        traj.y.push(y);
        let Some(xn) = x_next else { break };
        if !xn.iter().all(|v| v.is_finite()) || xn.norm() > DIVERGENCE_NORM {
            traj.diverged_at = Some(k + 1);
            break;
        }
        x = xn;
        r = next_mode(&model.transition, r, &mut mrng);
    }
    Ok(traj)
}

/// `Σ_k x(k)ᵀ Q x(k) + u(k)ᵀ R u(k)` over the stored steps.
pub fn evaluate_cost(traj: &Trajectory, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    traj.x
        .iter()
        .zip(&traj.u)
        .map(|(x, u)| (x.transpose() * q * x)[(0, 0)] + (u.transpose() * r * u)[(0, 0)])
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub x0: Vec<f64>,
    pub r0: usize,
    pub horizon: usize,
    pub bias: BiasSignal,
    pub trials: usize,
    pub master_seed: u64,
    /// Cost weights; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::matrix::serde_opt_matrix")]
    pub q: Option<DMatrix<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::matrix::serde_opt_matrix")]
    pub r: Option<DMatrix<f64>>,
    /// Worker threads; `None` uses the global rayon pool.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Keep every trajectory in the summary.
    #[serde(default)]
    pub keep_trajectories: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub cost: f64,
    pub diverged_at: Option<usize>,
    pub flagged_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    /// `√((1/M) Σ_m ‖x_m(k)‖²)` over non-divergent trials.
    pub rmse: Vec<f64>,
    pub x_mean: Vec<Vec<f64>>,
    pub x_std: Vec<Vec<f64>>,
    pub u_mean: Vec<Vec<f64>>,
    pub u_std: Vec<Vec<f64>>,
    pub trials: Vec<TrialOutcome>,
    pub master_seed: u64,
    /// Trials contributing to the moment statistics.
    pub included: usize,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

impl MonteCarloSummary {
    pub fn trial_count(&self) -> usize {
        self.trials.len()
    }

    pub fn diverged_count(&self) -> usize {
        self.trials.iter().filter(|t| t.diverged_at.is_some()).count()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.cost).collect()
    }

    pub fn mean_cost(&self) -> f64 {
        let c: Vec<f64> = self.trials.iter().filter(|t| t.diverged_at.is_none()).map(|t| t.cost).collect();
        c.iter().sum::<f64>() / c.len() as f64
    }
}

/// Runs `cfg.trials` independent rollouts and aggregates them.
pub fn monte_carlo(model: &PemAdmModel, policy: &dyn Policy, cfg: &MonteCarloConfig) -> Result<MonteCarloSummary> {
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let n1 = model.state_dim();
    let n2 = model.input_dim();
    let q = cfg.q.clone().unwrap_or_else(|| DMatrix::identity(n1, n1));
    let r = cfg.r.clone().unwrap_or_else(|| DMatrix::identity(n2, n2));
    if q.shape() != (n1, n1) || r.shape() != (n2, n2) {
        return Err(Error::Dimension("cost weights do not match the model".into()));
    }
    let x0 = DVector::from_column_slice(&cfg.x0);

    let run = |m: usize| -> Result<Trajectory> {
        rollout(model, policy, &x0, cfg.r0, cfg.horizon, &cfg.bias, trial_seed(cfg.master_seed, m as u64))
    };
    let trajs: Vec<Trajectory> = match cfg.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| (0..cfg.trials).into_par_iter().map(run).collect::<Result<Vec<_>>>())?
        }
        None => (0..cfg.trials).into_par_iter().map(run).collect::<Result<Vec<_>>>()?,
    };

    let trials: Vec<TrialOutcome> = trajs
        .iter()
        .enumerate()
        .map(|(m, t)| TrialOutcome {
            trial: m,
            seed: t.seed,
            cost: evaluate_cost(t, &q, &r),
            diverged_at: t.diverged_at,
            flagged_steps: t.flagged_steps,
        })
        .collect();

    let ok: Vec<&Trajectory> = trajs.iter().filter(|t| t.diverged_at.is_none()).collect();
    let steps = cfg.horizon + 1;
    let moments = |get: &dyn Fn(&Trajectory, usize) -> &DVector<f64>, dim: usize| {
        let mut mean = vec![vec![f64::NAN; dim]; steps];
        let mut std = vec![vec![f64::NAN; dim]; steps];
        if ok.is_empty() {
            return (mean, std);
        }
        let m = ok.len() as f64;
        for k in 0..steps {
            for c in 0..dim {
                let mu = ok.iter().map(|t| get(t, k)[c]).sum::<f64>() / m;
                let var = ok.iter().map(|t| (get(t, k)[c] - mu).powi(2)).sum::<f64>() / m;
                mean[k][c] = mu;
                std[k][c] = var.sqrt();
            }
        }
        (mean, std)
    };
    let (x_mean, x_std) = moments(&|t, k| &t.x[k], n1);
    let (u_mean, u_std) = moments(&|t, k| &t.u[k], n2);
    let rmse = (0..steps)
        .map(|k| {
            if ok.is_empty() {
                f64::NAN
            } else {
                (ok.iter().map(|t| t.x[k].norm_squared()).sum::<f64>() / ok.len() as f64).sqrt()
            }
        })
        .collect();

    let included = ok.len();
    Ok(MonteCarloSummary {
        rmse,
        x_mean,
        x_std,
        u_mean,
        u_std,
        trials,
        master_seed: cfg.master_seed,
        included,
        trajectories: if cfg.keep_trajectories { trajs } else { Vec::new() },
    })
}
