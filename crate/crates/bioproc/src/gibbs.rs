//! Conjugate Gibbs sampling of the network parameters from trajectory data.
//!
//! Every full conditional is available in closed form: coefficients and
//! means are Normal, residual variances are inverse-gamma. One sweep visits
//! the parameters time-major, family order (beta, v, sigma, mu, lambda),
//! always reading the latest values of everything else.
//!
//! Conventions worth pinning down, since the sums are easy to misindex:
//! the residual variance of a child `s_{t+1}^k` is `v[t+1][k]^2`; the
//! own-observation variance of an action mean `lambda_t^k` is
//! `sigma[t][k]^2`; and the child terms of a mean update weight each child
//! `l` by its own residual variance `v[t+1][l]^2`. Small-network analytic
//! posteriors in the tests pin these choices down.

#[cfg(test)]
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::GibbsError;
use crate::model::{validate_model, ModelParams, Trajectory};
use crate::rng::{self, Stream};

/// Parent index space for one transition: `0..n` are state parents,
/// `n..n+m` are action parents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parent {
    State(usize),
    Action(usize),
}

impl Parent {
    pub fn from_unified(j: usize, n: usize) -> Parent {
        if j < n {
            Parent::State(j)
        } else {
            Parent::Action(j - n)
        }
    }
}

/// Prior hyperparameters: Normal centers for coefficients and means with one
/// spread per family, inverse-gamma (kappa/2, rho/2) for the variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorHyper {
    /// Centers, shaped like the model they regularize.
    pub center: ModelParams,
    pub delta_beta: f64,
    pub delta_mu: f64,
    pub delta_lambda: f64,
    pub kappa_v: f64,
    pub rho_v: f64,
    pub kappa_sigma: f64,
    pub rho_sigma: f64,
}

impl PriorHyper {
    /// Weakly informative prior centered at a mechanism-derived model:
    /// unit spread on coefficients, wide spread on means, Inv-Gamma(2, 1)
    /// on the variances.
    pub fn mechanism_informed(center: ModelParams) -> Self {
        PriorHyper {
            center,
            delta_beta: 1.0,
            delta_mu: 10.0,
            delta_lambda: 10.0,
            kappa_v: 4.0,
            rho_v: 2.0,
            kappa_sigma: 4.0,
            rho_sigma: 2.0,
        }
    }

    pub fn valid(&self) -> bool {
        self.delta_beta > 0.0
            && self.delta_mu > 0.0
            && self.delta_lambda > 0.0
            && self.kappa_v > 0.0
            && self.rho_v > 0.0
            && self.kappa_sigma > 0.0
            && self.rho_sigma > 0.0
    }

    /// One draw from the prior, the chain's initial state. Masked-out
    /// coefficients stay at zero.
    pub fn draw(&self, stream: &mut Stream) -> ModelParams {
        let mut w = self.center.clone();
        for t in 0..w.horizon {
            for k in 0..w.n {
                w.mu_s[t][k] = rng::normal(stream, self.center.mu_s[t][k], self.delta_mu);
                w.v[t][k] = rng::inv_gamma(stream, self.kappa_v / 2.0, self.rho_v / 2.0).sqrt();
            }
        }
        for t in 0..w.transitions() {
            for k in 0..w.m {
                w.mu_a[t][k] = rng::normal(stream, self.center.mu_a[t][k], self.delta_lambda);
                w.sigma[t][k] =
                    rng::inv_gamma(stream, self.kappa_sigma / 2.0, self.rho_sigma / 2.0).sqrt();
            }
            for k in 0..w.n {
                for j in 0..w.n {
                    w.beta_s[t][(j, k)] = if w.mask_s[t][(j, k)] {
                        rng::normal(stream, self.center.beta_s[t][(j, k)], self.delta_beta)
                    } else {
                        0.0
                    };
                }
                for j in 0..w.m {
                    w.beta_a[t][(j, k)] = if w.mask_a[t][(j, k)] {
                        rng::normal(stream, self.center.beta_a[t][(j, k)], self.delta_beta)
                    } else {
                        0.0
                    };
                }
            }
        }
        w
    }
}

/// Trajectory dataset in model coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryData {
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryData {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        TrajectoryData { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn check_shape(&self, n: usize, m: usize, horizon: usize) -> Result<(), GibbsError> {
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.states.len() != horizon || traj.actions.len() + 1 != horizon {
                return Err(GibbsError::ShapeMismatch {
                    index: i,
                    detail: format!(
                        "{} states / {} actions, expected {} / {}",
                        traj.states.len(),
                        traj.actions.len(),
                        horizon,
                        horizon - 1
                    ),
                });
            }
            if traj.states.iter().any(|s| s.len() != n)
                || traj.actions.iter().any(|a| a.len() != m)
            {
                return Err(GibbsError::ShapeMismatch {
                    index: i,
                    detail: "state or action width differs from the model".into(),
                });
            }
        }
        Ok(())
    }
}

/// Chain initialization: empirical means and spreads from the data,
/// coefficients at the prior centers.
///
/// Initializing from a diffuse prior draw instead can strand the chain: a
/// badly placed mean inflates its variance draw, which collapses the
/// restoring precision of the own-observation term, and consecutive means
/// then random-walk along a near-neutral ridge for thousands of sweeps.
/// Starting at the empirical moments puts every conditional in its
/// well-conditioned regime from the first sweep.
pub fn data_informed_init(data: &TrajectoryData, priors: &PriorHyper) -> ModelParams {
    let mut w = priors.center.clone();
    let r_count = data.len().max(1) as f64;
    for t in 0..w.horizon {
        for k in 0..w.n {
            let mean: f64 =
                data.trajectories.iter().map(|tr| tr.states[t][k]).sum::<f64>() / r_count;
            let var: f64 = data
                .trajectories
                .iter()
                .map(|tr| (tr.states[t][k] - mean) * (tr.states[t][k] - mean))
                .sum::<f64>()
                / r_count;
            w.mu_s[t][k] = mean;
            w.v[t][k] = var.sqrt().max(1e-3);
        }
    }
    for t in 0..w.transitions() {
        for k in 0..w.m {
            let mean: f64 =
                data.trajectories.iter().map(|tr| tr.actions[t][k]).sum::<f64>() / r_count;
            let var: f64 = data
                .trajectories
                .iter()
                .map(|tr| (tr.actions[t][k] - mean) * (tr.actions[t][k] - mean))
                .sum::<f64>()
                / r_count;
            w.mu_a[t][k] = mean;
            w.sigma[t][k] = var.sqrt().max(1e-3);
        }
    }
    w.apply_masks();
    w
}

/// Deviation of parent `j` from its current mean at transition `t`.
fn parent_deviation(w: &ModelParams, traj: &Trajectory, t: usize, parent: Parent) -> f64 {
    match parent {
        Parent::State(j) => traj.states[t][j] - w.mu_s[t][j],
        Parent::Action(j) => traj.actions[t][j] - w.mu_a[t][j],
    }
}

fn parent_active(w: &ModelParams, t: usize, parent: Parent, child: usize) -> bool {
    match parent {
        Parent::State(j) => w.mask_s[t][(j, child)],
        Parent::Action(j) => w.mask_a[t][(j, child)],
    }
}

fn parent_coeff(w: &ModelParams, t: usize, parent: Parent, child: usize) -> f64 {
    match parent {
        Parent::State(j) => w.beta_s[t][(j, child)],
        Parent::Action(j) => w.beta_a[t][(j, child)],
    }
}

fn all_parents(n: usize, m: usize) -> impl Iterator<Item = Parent> {
    (0..n)
        .map(Parent::State)
        .chain((0..m).map(Parent::Action))
}

/// Sum of active-parent contributions to child `s_{t+1}^k`, excluding
/// `skip` when given.
fn parent_prediction(
    w: &ModelParams,
    traj: &Trajectory,
    t: usize,
    child: usize,
    skip: Option<Parent>,
) -> f64 {
    let mut pred = 0.0;
    for p in all_parents(w.n, w.m) {
        if Some(p) == skip || !parent_active(w, t, p, child) {
            continue;
        }
        pred += parent_coeff(w, t, p, child) * parent_deviation(w, traj, t, p);
    }
    pred
}

/// Observed-minus-fitted residual of child `s_{t+1}^k`, excluding the
/// contribution of `skip` when given.
fn child_residual(
    w: &ModelParams,
    traj: &Trajectory,
    t: usize,
    child: usize,
    skip: Option<Parent>,
) -> f64 {
    traj.states[t + 1][child] - w.mu_s[t + 1][child] - parent_prediction(w, traj, t, child, skip)
}

/// Full conditional of one coefficient `beta_t^{jk}` (unified parent index):
/// Normal with
/// `mean = (d^2 sum_i alpha_i m_i + v^2 beta0) / (d^2 sum_i alpha_i^2 + v^2)`
/// and `var = d^2 v^2 / (d^2 sum_i alpha_i^2 + v^2)`, where `alpha_i` is the
/// parent deviation and `m_i` the child residual with this edge removed.
pub fn beta_conditional(
    w: &ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    j: usize,
    k: usize,
) -> (f64, f64) {
    let parent = Parent::from_unified(j, w.n);
    let center = match parent {
        Parent::State(js) => priors.center.beta_s[t][(js, k)],
        Parent::Action(ja) => priors.center.beta_a[t][(ja, k)],
    };
    let d2 = priors.delta_beta * priors.delta_beta;
    let v2 = w.v[t + 1][k] * w.v[t + 1][k];
    let mut sum_alpha_m = 0.0;
    let mut sum_alpha_sq = 0.0;
    for traj in &data.trajectories {
        let alpha = parent_deviation(w, traj, t, parent);
        let m_res = child_residual(w, traj, t, k, Some(parent));
        sum_alpha_m += alpha * m_res;
        sum_alpha_sq += alpha * alpha;
    }
    let denom = d2 * sum_alpha_sq + v2;
    let mean = (d2 * sum_alpha_m + v2 * center) / denom;
    let var = d2 * v2 / denom;
    (mean, var.sqrt())
}

pub fn update_beta(
    w: &mut ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    j: usize,
    k: usize,
    stream: &mut Stream,
) {
    let parent = Parent::from_unified(j, w.n);
    if !parent_active(w, t, parent, k) {
        return; // masked edges stay at zero
    }
    let (mean, sd) = beta_conditional(w, data, priors, t, j, k);
    let draw = rng::normal(stream, mean, sd);
    match parent {
        Parent::State(js) => w.beta_s[t][(js, k)] = draw,
        Parent::Action(ja) => w.beta_a[t][(ja, k)] = draw,
    }
}

/// Full conditional of `(v_t^k)^2`: inverse-gamma with shape `(kappa + R)/2`
/// and scale `(rho + sum_i u_i^2)/2`, `u_i` the residual of `s_t^k` given
/// its parents (the raw deviation at the initial epoch).
pub fn v_conditional(
    w: &ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    k: usize,
) -> (f64, f64) {
    let mut sum_u_sq = 0.0;
    for traj in &data.trajectories {
        let u = if t == 0 {
            traj.states[0][k] - w.mu_s[0][k]
        } else {
            child_residual(w, traj, t - 1, k, None)
        };
        sum_u_sq += u * u;
    }
    let shape = (priors.kappa_v + data.len() as f64) / 2.0;
    let scale = (priors.rho_v + sum_u_sq) / 2.0;
    (shape, scale)
}

pub fn update_v(
    w: &mut ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    k: usize,
    stream: &mut Stream,
) {
    let (shape, scale) = v_conditional(w, data, priors, t, k);
    w.v[t][k] = rng::inv_gamma(stream, shape, scale).sqrt();
}

/// Full conditional of `(sigma_t^k)^2`, same shape as the `v` update with
/// residuals `a_t^k - lambda_t^k`.
pub fn sigma_conditional(
    w: &ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    k: usize,
) -> (f64, f64) {
    let mut sum_u_sq = 0.0;
    for traj in &data.trajectories {
        let u = traj.actions[t][k] - w.mu_a[t][k];
        sum_u_sq += u * u;
    }
    let shape = (priors.kappa_sigma + data.len() as f64) / 2.0;
    let scale = (priors.rho_sigma + sum_u_sq) / 2.0;
    (shape, scale)
}

pub fn update_sigma(
    w: &mut ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    k: usize,
    stream: &mut Stream,
) {
    let (shape, scale) = sigma_conditional(w, data, priors, t, k);
    w.sigma[t][k] = rng::inv_gamma(stream, shape, scale).sqrt();
}

/// Shared Normal-conditional machinery for the mean of a node: own
/// observations plus one regression term per child at the next epoch.
struct MeanUpdate {
    precision: f64,
    weighted_mean: f64,
}

impl MeanUpdate {
    fn new(center: f64, delta: f64) -> Self {
        let p0 = 1.0 / (delta * delta);
        MeanUpdate {
            precision: p0,
            weighted_mean: center * p0,
        }
    }

    fn finish(self) -> (f64, f64) {
        (self.weighted_mean / self.precision, (1.0 / self.precision).sqrt())
    }
}

/// Full conditional of a state mean `mu_t^k`.
pub fn mu_conditional(
    w: &ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    k: usize,
) -> (f64, f64) {
    let mut upd = MeanUpdate::new(priors.center.mu_s[t][k], priors.delta_mu);
    let own_var = w.v[t][k] * w.v[t][k];
    let r_count = data.len() as f64;
    upd.precision += r_count / own_var;
    for traj in &data.trajectories {
        // observation of mu_t^k: the state with its parent prediction removed
        let mut a_obs = traj.states[t][k];
        if t > 0 {
            a_obs -= parent_prediction(w, traj, t - 1, k, None);
        }
        upd.weighted_mean += a_obs / own_var;
    }
    if t + 1 < w.horizon {
        let me = Parent::State(k);
        for child in 0..w.n {
            if !parent_active(w, t, me, child) {
                continue;
            }
            let beta = parent_coeff(w, t, me, child);
            if beta == 0.0 {
                continue;
            }
            let child_var = w.v[t + 1][child] * w.v[t + 1][child];
            upd.precision += r_count * beta * beta / child_var;
            for traj in &data.trajectories {
                // residual of the child with this node's deviation replaced
                // by its raw value: linear in mu_t^k with slope beta
                let partial = child_residual(w, traj, t, child, Some(me));
                let c = beta * traj.states[t][k] - partial;
                upd.weighted_mean += beta * c / child_var;
            }
        }
    }
    upd.finish()
}

pub fn update_mu(
    w: &mut ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    k: usize,
    stream: &mut Stream,
) {
    let (mean, sd) = mu_conditional(w, data, priors, t, k);
    w.mu_s[t][k] = rng::normal(stream, mean, sd);
}

/// Full conditional of an action mean `lambda_t^k`.
pub fn lambda_conditional(
    w: &ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    k: usize,
) -> (f64, f64) {
    let mut upd = MeanUpdate::new(priors.center.mu_a[t][k], priors.delta_lambda);
    let own_var = w.sigma[t][k] * w.sigma[t][k];
    let r_count = data.len() as f64;
    upd.precision += r_count / own_var;
    for traj in &data.trajectories {
        upd.weighted_mean += traj.actions[t][k] / own_var;
    }
    let me = Parent::Action(k);
    for child in 0..w.n {
        if !parent_active(w, t, me, child) {
            continue;
        }
        let beta = parent_coeff(w, t, me, child);
        if beta == 0.0 {
            continue;
        }
        let child_var = w.v[t + 1][child] * w.v[t + 1][child];
        upd.precision += r_count * beta * beta / child_var;
        for traj in &data.trajectories {
            let partial = child_residual(w, traj, t, child, Some(me));
            let c = beta * traj.actions[t][k] - partial;
            upd.weighted_mean += beta * c / child_var;
        }
    }
    upd.finish()
}

pub fn update_lambda(
    w: &mut ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    t: usize,
    k: usize,
    stream: &mut Stream,
) {
    let (mean, sd) = lambda_conditional(w, data, priors, t, k);
    w.mu_a[t][k] = rng::normal(stream, mean, sd);
}

fn sweep_in_place(
    w: &mut ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    stream: &mut Stream,
) {
    for t in 0..w.horizon {
        if t + 1 < w.horizon {
            for k in 0..w.n {
                for j in 0..w.n + w.m {
                    update_beta(w, data, priors, t, j, k, stream);
                }
            }
        }
        for k in 0..w.n {
            update_v(w, data, priors, t, k, stream);
        }
        if t + 1 < w.horizon {
            for k in 0..w.m {
                update_sigma(w, data, priors, t, k, stream);
            }
        }
        for k in 0..w.n {
            update_mu(w, data, priors, t, k, stream);
        }
        if t + 1 < w.horizon {
            for k in 0..w.m {
                update_lambda(w, data, priors, t, k, stream);
            }
        }
    }
}

/// One full systematic scan; returns the new draw.
pub fn gibbs_sweep(
    current: &ModelParams,
    data: &TrajectoryData,
    priors: &PriorHyper,
    stream: &mut Stream,
) -> ModelParams {
    let mut w = current.clone();
    sweep_in_place(&mut w, data, priors, stream);
    w
}

/// Posterior draws plus the chain metadata needed to replay them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub draws: Vec<ModelParams>,
    pub seed: u64,
    pub burn_in: usize,
    pub thinning: usize,
    pub sweeps_run: usize,
    /// Indices of draws that fail the validity check (kept, but flagged).
    pub invalid_draw_indices: Vec<usize>,
}

/// Run one chain: `burn_in` discarded sweeps, then `b_draws` draws taken
/// every `thinning` sweeps. The chain starts from a prior draw.
pub fn sample_posterior(
    data: &TrajectoryData,
    priors: &PriorHyper,
    b_draws: usize,
    burn_in: usize,
    thinning: usize,
    seed: u64,
) -> Result<PosteriorDraws, GibbsError> {
    if data.is_empty() {
        return Err(GibbsError::EmptyDataset);
    }
    if b_draws == 0 {
        return Err(GibbsError::Config("need at least one draw".into()));
    }
    if thinning == 0 {
        return Err(GibbsError::Config("thinning must be at least 1".into()));
    }
    if !priors.valid() {
        return Err(GibbsError::Config("prior hyperparameters must be positive".into()));
    }
    let center = &priors.center;
    data.check_shape(center.n, center.m, center.horizon)?;

    let mut stream = rng::seeded(seed);
    let mut w = data_informed_init(data, priors);
    let mut sweeps = 0usize;
    for _ in 0..burn_in {
        sweep_in_place(&mut w, data, priors, &mut stream);
        sweeps += 1;
    }
    let mut draws = Vec::with_capacity(b_draws);
    let mut invalid = Vec::new();
    for i in 0..b_draws {
        for _ in 0..thinning {
            sweep_in_place(&mut w, data, priors, &mut stream);
            sweeps += 1;
        }
        if !validate_model(&w) {
            invalid.push(i);
        }
        draws.push(w.clone());
    }
    Ok(PosteriorDraws {
        draws,
        seed,
        burn_in,
        thinning,
        sweeps_run: sweeps,
        invalid_draw_indices: invalid,
    })
}

/// A live chain that feeds the optimizer fresh draws every iteration.
pub struct GibbsChain {
    data: TrajectoryData,
    priors: PriorHyper,
    state: ModelParams,
    stream: Stream,
    thinning: usize,
    buffer: Vec<ModelParams>,
    draws_per_batch: usize,
}

impl GibbsChain {
    /// Warm up a chain with `burn_in` sweeps so subsequent batches come from
    /// the stationary regime.
    pub fn start(
        data: TrajectoryData,
        priors: PriorHyper,
        burn_in: usize,
        thinning: usize,
        draws_per_batch: usize,
        seed: u64,
    ) -> Result<Self, GibbsError> {
        if data.is_empty() {
            return Err(GibbsError::EmptyDataset);
        }
        data.check_shape(priors.center.n, priors.center.m, priors.center.horizon)?;
        let stream = rng::seeded(seed);
        let mut stream = stream;
        let mut state = data_informed_init(&data, &priors);
        for _ in 0..burn_in {
            sweep_in_place(&mut state, &data, &priors, &mut stream);
        }
        Ok(GibbsChain {
            data,
            priors,
            state,
            stream,
            thinning: thinning.max(1),
            buffer: Vec::new(),
            draws_per_batch,
        })
    }

    pub fn next_batch(&mut self) -> &[ModelParams] {
        self.buffer.clear();
        for _ in 0..self.draws_per_batch {
            for _ in 0..self.thinning {
                sweep_in_place(&mut self.state, &self.data, &self.priors, &mut self.stream);
            }
            self.buffer.push(self.state.clone());
        }
        &self.buffer
    }
}

impl crate::optim::DrawSource for GibbsChain {
    fn draws(&mut self, _iteration: usize) -> &[ModelParams] {
        self.next_batch();
        &self.buffer
    }
}
