//! Projected stochastic gradient ascent over a box, with the generalized
//! gradient mapping and convergence diagnostics.
//!
//! The update is `theta_{k+1} = Pi_C(theta_k + eta_k * grad_hat)`, recorded
//! through the generalized gradient `g_c = (Pi_C(theta + eta g) - theta) /
//! eta`, which coincides with the raw gradient whenever no coordinate
//! clamps. The stepsize schedule is `eta_k = eta0 * k^-p` with `p > 0.5`, so
//! the squared stepsizes are summable.

use serde::{Deserialize, Serialize};

use crate::error::OptimError;
use crate::gradient::saa_gradient;
use crate::model::{policy_value, BoxBounds, ModelParams, PolicyParams, RewardSpec};
use ndarray::Array1;

/// Entrywise clamp: the exact Euclidean projection onto a box.
pub fn project_box(theta: &[f64], bounds: &BoxBounds) -> Result<Vec<f64>, OptimError> {
    if bounds.lower.len() != theta.len() || bounds.upper.len() != theta.len() {
        return Err(OptimError::BoxLength {
            got: bounds.lower.len(),
            expected: theta.len(),
        });
    }
    for (i, (&lo, &hi)) in bounds.lower.iter().zip(&bounds.upper).enumerate() {
        if lo > hi {
            return Err(OptimError::MalformedBox {
                index: i,
                lower: lo,
                upper: hi,
            });
        }
    }
    Ok(theta
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(&x, (&lo, &hi))| x.clamp(lo, hi))
        .collect())
}

/// Generalized gradient `(Pi_C(theta + eta * grad) - theta) / eta`.
pub fn generalized_gradient(
    theta: &[f64],
    grad: &[f64],
    eta: f64,
    bounds: &BoxBounds,
) -> Result<Vec<f64>, OptimError> {
    assert!(eta > 0.0, "stepsize must be positive");
    let stepped: Vec<f64> = theta.iter().zip(grad).map(|(&x, &g)| x + eta * g).collect();
    let projected = project_box(&stepped, bounds)?;
    Ok(projected
        .iter()
        .zip(theta)
        .map(|(&p, &x)| (p - x) / eta)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Iteration budget.
    pub max_iters: usize,
    /// Posterior draws per iteration.
    pub draws_per_iter: usize,
    /// Base stepsize.
    pub eta0: f64,
    /// Decay exponent: `eta_k = eta0 * k^-p`.
    pub decay_p: f64,
    pub seed: u64,
    /// Fraction of the trace used for the first/last diagnostic windows.
    pub window_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 400,
            draws_per_iter: 50,
            eta0: 0.05,
            decay_p: 0.6,
            seed: 0,
            window_fraction: 0.1,
        }
    }
}

/// What the config validator reports beyond pass/fail.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigCheck {
    /// `eta0^2 * zeta(2p)`: the strict upper bound on the summed squared
    /// stepsizes of the infinite schedule.
    pub stepsize_sq_bound: f64,
    /// Summed squared stepsizes actually scheduled for `max_iters`.
    pub stepsize_sq_sum: f64,
    /// Set when `p > 1`: the stepsizes themselves are summable, which can
    /// freeze progress before reaching a stationary point.
    pub fast_decay_warning: bool,
}

impl OptimizerConfig {
    pub fn eta(&self, k: usize) -> f64 {
        self.eta0 * ((k + 1) as f64).powf(-self.decay_p)
    }

    pub fn validate(&self) -> Result<ConfigCheck, OptimError> {
        if self.max_iters < 1 {
            return Err(OptimError::Config("max_iters must be at least 1".into()));
        }
        if self.draws_per_iter < 1 {
            return Err(OptimError::Config(
                "draws_per_iter must be at least 1".into(),
            ));
        }
        if !(self.eta0 > 0.0) {
            return Err(OptimError::Config("eta0 must be positive".into()));
        }
        if !(self.decay_p > 0.5) {
            return Err(OptimError::Config(
                "decay exponent must exceed 0.5 so squared stepsizes are summable".into(),
            ));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 0.5) {
            return Err(OptimError::Config(
                "window fraction must lie in (0, 0.5]".into(),
            ));
        }
        let bound = self.eta0 * self.eta0 * riemann_zeta(2.0 * self.decay_p);
        let sum: f64 = (0..self.max_iters).map(|k| self.eta(k) * self.eta(k)).sum();
        debug_assert!(sum < bound);
        Ok(ConfigCheck {
            stepsize_sq_bound: bound,
            stepsize_sq_sum: sum,
            fast_decay_warning: self.decay_p > 1.0,
        })
    }
}

/// Riemann zeta for real s > 1 by direct summation with an Euler-Maclaurin
/// tail.
pub fn riemann_zeta(s: f64) -> f64 {
    assert!(s > 1.0, "zeta tail diverges for s <= 1");
    let n = 2000usize;
    let head: f64 = (1..=n).map(|k| (k as f64).powf(-s)).sum();
    let nf = n as f64;
    head + nf.powf(1.0 - s) / (s - 1.0) - 0.5 * nf.powf(-s) + s / 12.0 * nf.powf(-s - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// FNV-1a hash of the parameter bits, for replay checks.
    pub theta_hash: u64,
    pub j_hat: f64,
    /// Squared norm of the generalized gradient at this iterate.
    pub grad_norm_sq: f64,
    /// True when the raw step left the box and projection clipped it.
    pub projection_active: bool,
    pub eta: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub rows: Vec<TraceRow>,
}

pub fn hash_theta(theta: &[f64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for x in theta {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Core ascent loop over any objective/gradient source.
///
/// `eval` maps the current flat parameters and iteration index to an
/// objective estimate and its gradient. Every returned iterate lies in the
/// box; with a deterministic `eval` the whole run replays exactly.
pub fn optimize_with<F>(
    theta0: &[f64],
    bounds: &BoxBounds,
    config: &OptimizerConfig,
    mut eval: F,
) -> Result<(Vec<f64>, OptimizationTrace), OptimError>
where
    F: FnMut(&[f64], usize) -> (f64, Vec<f64>),
{
    let mut theta = project_box(theta0, bounds)?;
    let mut trace = OptimizationTrace::default();
    for k in 0..config.max_iters {
        let started = std::time::Instant::now();
        let eta = config.eta(k);
        let (j_hat, grad) = eval(&theta, k);
        let stepped: Vec<f64> = theta.iter().zip(&grad).map(|(&x, &g)| x + eta * g).collect();
        let projected = project_box(&stepped, bounds)?;
        let projection_active = stepped
            .iter()
            .zip(&projected)
            .any(|(&raw, &proj)| raw != proj);
        let g_c: Vec<f64> = projected
            .iter()
            .zip(&theta)
            .map(|(&p, &x)| (p - x) / eta)
            .collect();
        let grad_norm_sq = g_c.iter().map(|x| x * x).sum();
        theta = projected;
        trace.rows.push(TraceRow {
            iteration: k,
            theta_hash: hash_theta(&theta),
            j_hat,
            grad_norm_sq,
            projection_active,
            eta,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((theta, trace))
}

/// Supplies posterior draws per iteration: a fixed pool for deterministic
/// runs, or a live sampler that refreshes every iteration.
pub trait DrawSource {
    fn draws(&mut self, iteration: usize) -> &[ModelParams];
}

/// Reuses one fixed pool of draws at every iteration.
pub struct FixedDraws(pub Vec<ModelParams>);

impl DrawSource for FixedDraws {
    fn draws(&mut self, _iteration: usize) -> &[ModelParams] {
        &self.0
    }
}

/// Policy search by projected stochastic gradient ascent over posterior
/// draws. Invalid draws contribute zero gradient and the flat penalty value.
pub fn dbn_rl_optimize(
    source: &mut dyn DrawSource,
    reward: &RewardSpec,
    s1: &Array1<f64>,
    theta0: &PolicyParams,
    config: &OptimizerConfig,
) -> Result<(PolicyParams, OptimizationTrace), OptimError> {
    let flat0 = theta0.to_flat();
    let (flat, trace) = optimize_with(&flat0, &theta0.bounds, config, |flat, k| {
        let policy = theta0.with_flat(flat);
        let draws = source.draws(k);
        let j_hat = draws
            .iter()
            .map(|w| policy_value(w, &policy, reward, s1))
            .sum::<f64>()
            / draws.len() as f64;
        let grad = saa_gradient(&policy, draws, reward, s1);
        (j_hat, grad)
    })?;
    Ok((theta0.with_flat(&flat), trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Running average of the squared generalized-gradient norm.
    pub running_avg_grad_norm_sq: Vec<f64>,
    pub first_window_mean: f64,
    pub last_window_mean: f64,
    /// `last_window_mean / first_window_mean` (1 when the first window mean
    /// is zero).
    pub decay_ratio: f64,
    pub projection_active_fraction: f64,
}

/// Windowed summary of the gradient-norm decay and projection activity.
pub fn convergence_diagnostics(trace: &OptimizationTrace, window_fraction: f64) -> DiagnosticsReport {
    assert!(!trace.rows.is_empty(), "trace must be nonempty");
    assert!(window_fraction > 0.0 && window_fraction <= 0.5);
    let norms: Vec<f64> = trace.rows.iter().map(|r| r.grad_norm_sq).collect();
    let mut running = Vec::with_capacity(norms.len());
    let mut acc = 0.0;
    for (i, x) in norms.iter().enumerate() {
        acc += x;
        running.push(acc / (i + 1) as f64);
    }
    let window = ((norms.len() as f64 * window_fraction).ceil() as usize).max(1);
    let first = norms[..window].iter().sum::<f64>() / window as f64;
    let last = norms[norms.len() - window..].iter().sum::<f64>() / window as f64;
    let projected = trace.rows.iter().filter(|r| r.projection_active).count();
    DiagnosticsReport {
        running_avg_grad_norm_sq: running,
        first_window_mean: first,
        last_window_mean: last,
        decay_ratio: if first == 0.0 { 1.0 } else { last / first },
        projection_active_fraction: projected as f64 / trace.rows.len() as f64,
    }
}
