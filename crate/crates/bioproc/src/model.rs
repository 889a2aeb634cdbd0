//! Time-indexed linear-Gaussian network over states and actions, augmented
//! with a linear feedback policy.
//!
//! With state deviation `d_t = s_t - mu_s[t]`, the transition is
//!
//! ```text
//! s_{t+1} = mu_s[t+1] + beta_s[t]^T d_t + beta_a[t]^T (a_t - mu_a[t]) + v[t+1] .* z
//! a_t     = mu_a[t] + vartheta[t]^T d_t
//! ```
//!
//! where `beta_s[t]` is n x n with entry `(j, k)` the coefficient of parent
//! `s_t^j` on child `s_{t+1}^k`, and `beta_a[t]` is m x n laid out the same
//! way. Substituting the policy gives the closed-loop factor
//! `A_t = (beta_s[t] + vartheta[t] beta_a[t])^T`, so deviations propagate as
//! `d_{t+1} = A_t d_t + noise`. The pathway product over transitions
//! `h..=t` is therefore `R_{h,t} = A_t A_{t-1} ... A_h` (later factors on
//! the left), and every closed form below — prediction, policy value,
//! gradients, attribution — is expressed with these products.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::rng::{self, Stream};

/// Magnitude bound defining the validity region of model parameters.
pub const VALIDITY_BOUND: f64 = 1e10;

/// Full parameterization of the network.
///
/// Lengths: `mu_s` and `v` hold one entry per state epoch (`horizon` total);
/// `mu_a`, `sigma`, `beta_s`, `beta_a` and the masks hold one entry per
/// transition (`horizon - 1` total).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub mu_s: Vec<Array1<f64>>,
    pub v: Vec<Array1<f64>>,
    pub mu_a: Vec<Array1<f64>>,
    pub sigma: Vec<Array1<f64>>,
    pub beta_s: Vec<Array2<f64>>,
    pub beta_a: Vec<Array2<f64>>,
    pub mask_s: Vec<Array2<bool>>,
    pub mask_a: Vec<Array2<bool>>,
}

impl ModelParams {
    /// All-zero coefficients, unit residual scales, dense masks.
    pub fn zeroed(n: usize, m: usize, horizon: usize) -> Self {
        assert!(horizon >= 1, "horizon must be at least 1");
        let trans = horizon - 1;
        ModelParams {
            n,
            m,
            horizon,
            mu_s: vec![Array1::zeros(n); horizon],
            v: vec![Array1::ones(n); horizon],
            mu_a: vec![Array1::zeros(m); trans],
            sigma: vec![Array1::ones(m); trans],
            beta_s: vec![Array2::zeros((n, n)); trans],
            beta_a: vec![Array2::zeros((m, n)); trans],
            mask_s: vec![Array2::from_elem((n, n), true); trans],
            mask_a: vec![Array2::from_elem((m, n), true); trans],
        }
    }

    pub fn transitions(&self) -> usize {
        self.horizon - 1
    }

    /// Zero out every coefficient whose mask entry is false.
    pub fn apply_masks(&mut self) {
        for t in 0..self.transitions() {
            for ((j, k), b) in self.beta_s[t].indexed_iter_mut() {
                if !self.mask_s[t][(j, k)] {
                    *b = 0.0;
                }
            }
            for ((j, k), b) in self.beta_a[t].indexed_iter_mut() {
                if !self.mask_a[t][(j, k)] {
                    *b = 0.0;
                }
            }
        }
    }

    fn shapes_consistent(&self) -> bool {
        let trans = self.horizon - 1;
        self.mu_s.len() == self.horizon
            && self.v.len() == self.horizon
            && self.mu_a.len() == trans
            && self.sigma.len() == trans
            && self.beta_s.len() == trans
            && self.beta_a.len() == trans
            && self.mask_s.len() == trans
            && self.mask_a.len() == trans
            && self.mu_s.iter().all(|x| x.len() == self.n)
            && self.v.iter().all(|x| x.len() == self.n)
            && self.mu_a.iter().all(|x| x.len() == self.m)
            && self.sigma.iter().all(|x| x.len() == self.m)
            && self.beta_s.iter().all(|x| x.dim() == (self.n, self.n))
            && self.beta_a.iter().all(|x| x.dim() == (self.m, self.n))
            && self.mask_s.iter().all(|x| x.dim() == (self.n, self.n))
            && self.mask_a.iter().all(|x| x.dim() == (self.m, self.n))
    }
}

/// True iff the parameters lie in the validity region: every entry finite
/// with magnitude at most [`VALIDITY_BOUND`], and all residual scales
/// strictly positive.
pub fn validate_model(w: &ModelParams) -> bool {
    if !w.shapes_consistent() {
        return false;
    }
    let ok_mag = |x: f64| x.is_finite() && x.abs() <= VALIDITY_BOUND;
    let vecs_ok = w.mu_s.iter().chain(w.mu_a.iter()).all(|v| v.iter().all(|&x| ok_mag(x)));
    let betas_ok = w
        .beta_s
        .iter()
        .chain(w.beta_a.iter())
        .all(|b| b.iter().all(|&x| ok_mag(x)));
    let scales_ok = w
        .v
        .iter()
        .chain(w.sigma.iter())
        .all(|v| v.iter().all(|&x| ok_mag(x) && x > 0.0));
    vecs_ok && betas_ok && scales_ok
}

/// Per-entry box bounds on the flattened policy vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn symmetric(len: usize, half_width: f64) -> Self {
        BoxBounds {
            lower: vec![-half_width; len],
            upper: vec![half_width; len],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.len()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&lo, &hi))| x >= lo && x <= hi)
    }
}

/// Linear feedback policy: one n x m coefficient matrix per transition,
/// constrained to a box.
///
/// Flattening is fixed as `(vec(vartheta_0), ..., vec(vartheta_{H-2}))` with
/// column-major order inside each matrix; the box is indexed the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub vartheta: Vec<Array2<f64>>,
    pub bounds: BoxBounds,
}

impl PolicyParams {
    pub fn zeroed(n: usize, m: usize, horizon: usize, bounds: BoxBounds) -> Self {
        assert_eq!(bounds.len(), (horizon - 1) * n * m, "box length mismatch");
        PolicyParams {
            vartheta: vec![Array2::zeros((n, m)); horizon - 1],
            bounds,
        }
    }

    pub fn transitions(&self) -> usize {
        self.vartheta.len()
    }

    pub fn param_count(&self) -> usize {
        self.vartheta.iter().map(|v| v.len()).sum()
    }

    pub fn feasible(&self) -> bool {
        self.bounds.contains(&self.to_flat())
    }

    /// Flatten in the fixed order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for th in &self.vartheta {
            let (nrow, ncol) = th.dim();
            for q in 0..ncol {
                for p in 0..nrow {
                    out.push(th[(p, q)]);
                }
            }
        }
        out
    }

    /// Rebuild the matrices from a flat vector (inverse of [`to_flat`]).
    ///
    /// [`to_flat`]: PolicyParams::to_flat
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.param_count(), "flat length mismatch");
        let mut out = self.clone();
        let mut idx = 0;
        for th in &mut out.vartheta {
            let (nrow, ncol) = th.dim();
            for q in 0..ncol {
                for p in 0..nrow {
                    th[(p, q)] = flat[idx];
                    idx += 1;
                }
            }
        }
        out
    }

    /// Action prescribed at transition `t` given the state there.
    pub fn action(&self, w: &ModelParams, t: usize, state: &Array1<f64>) -> Array1<f64> {
        let dev = state - &w.mu_s[t];
        &w.mu_a[t] + &self.vartheta[t].t().dot(&dev)
    }
}

/// A policy made executable outside any one model: the coefficient matrices
/// together with the mean profiles they are anchored to and the coordinate
/// scales the model was fit in, frozen at export time. Rolling it out needs
/// nothing but the observed state in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoredPolicy {
    /// Anchor means in model (scaled) coordinates.
    pub mu_s: Vec<Array1<f64>>,
    pub mu_a: Vec<Array1<f64>>,
    pub vartheta: Vec<Array2<f64>>,
    /// Physical units per model unit, one entry per state coordinate.
    pub state_scale: Vec<f64>,
    /// Physical units per model unit, one entry per action coordinate.
    pub action_scale: Vec<f64>,
}

impl AnchoredPolicy {
    pub fn from_policy(policy: &PolicyParams, w: &ModelParams) -> Self {
        AnchoredPolicy {
            mu_s: w.mu_s[..w.horizon - 1].to_vec(),
            mu_a: w.mu_a.clone(),
            vartheta: policy.vartheta.clone(),
            state_scale: vec![1.0; w.n],
            action_scale: vec![1.0; w.m],
        }
    }

    /// Action in physical units given the state in physical units.
    pub fn action(&self, t: usize, state: &Array1<f64>) -> Array1<f64> {
        let t = t.min(self.vartheta.len() - 1);
        let scaled_state = Array1::from_iter(
            state
                .iter()
                .zip(&self.state_scale)
                .map(|(&x, &s)| x / s),
        );
        let dev = &scaled_state - &self.mu_s[t];
        let scaled_action = &self.mu_a[t] + &self.vartheta[t].t().dot(&dev);
        Array1::from_iter(
            scaled_action
                .iter()
                .zip(&self.action_scale)
                .map(|(&a, &s)| a * s),
        )
    }

    /// Scalar feed rate for the single-action fermentation case, clamped
    /// to be nonnegative.
    pub fn feed_rate(&self, t: usize, state: &Array1<f64>) -> f64 {
        self.action(t, state)[0].max(0.0)
    }
}

/// Nonstationary linear reward: `r_t = m[t] + b[t].a_t + c[t].s_t` while the
/// model is valid, `m_c` per epoch otherwise.
///
/// `b` has one entry per state epoch for symmetry with `m` and `c`, but the
/// final epoch has no action, so `b[horizon-1]` is forced to zero on
/// construction and ignored everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub m: Vec<f64>,
    pub b: Vec<Array1<f64>>,
    pub c: Vec<Array1<f64>>,
    pub m_c: f64,
}

impl RewardSpec {
    pub fn new(m: Vec<f64>, mut b: Vec<Array1<f64>>, c: Vec<Array1<f64>>, m_c: f64) -> Self {
        assert!(m_c < 0.0, "invalid-model penalty must be negative");
        assert_eq!(m.len(), c.len());
        assert_eq!(m.len(), b.len());
        if let Some(last) = b.last_mut() {
            last.fill(0.0);
        }
        RewardSpec { m, b, c, m_c }
    }

    pub fn zeroed(n: usize, m_dim: usize, horizon: usize, m_c: f64) -> Self {
        RewardSpec::new(
            vec![0.0; horizon],
            vec![Array1::zeros(m_dim); horizon],
            vec![Array1::zeros(n); horizon],
            m_c,
        )
    }

    pub fn horizon(&self) -> usize {
        self.m.len()
    }

    /// Scale every coefficient (used by linearity tests).
    pub fn scaled(&self, alpha: f64) -> Self {
        RewardSpec {
            m: self.m.iter().map(|x| alpha * x).collect(),
            b: self.b.iter().map(|x| x * alpha).collect(),
            c: self.c.iter().map(|x| x * alpha).collect(),
            m_c: self.m_c,
        }
    }

    /// Realized cumulative reward of one trajectory (valid-model branch).
    pub fn cumulative(&self, traj: &Trajectory) -> f64 {
        let h = traj.states.len();
        let mut total = 0.0;
        for t in 0..h {
            total += self.m[t] + self.c[t].dot(&traj.states[t]);
            if t + 1 < h {
                total += self.b[t].dot(&traj.actions[t]);
            }
        }
        total
    }
}

/// One rollout: `horizon` states and `horizon - 1` actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub replication_id: usize,
    pub states: Vec<Array1<f64>>,
    pub actions: Vec<Array1<f64>>,
}

impl Trajectory {
    pub fn consistent(&self) -> bool {
        self.states.len() == self.actions.len() + 1
    }
}

/// Closed-loop transition factor `A_t = (beta_s[t] + vartheta[t] beta_a[t])^T`.
pub fn closed_loop_factor(w: &ModelParams, policy: &PolicyParams, t: usize) -> Array2<f64> {
    let b = &w.beta_s[t] + &policy.vartheta[t].dot(&w.beta_a[t]);
    b.t().to_owned()
}

/// Pathway product `R_{h,t} = A_t A_{t-1} ... A_h` over transitions `h..=t`.
///
/// The empty product (`h == t + 1`) is the identity. Valid for
/// `h <= t + 1` and `t <= horizon - 2`.
pub fn pathway_product(
    w: &ModelParams,
    policy: &PolicyParams,
    h: usize,
    t_end: usize,
) -> Result<Array2<f64>, ModelError> {
    if h > t_end + 1 {
        return Err(ModelError::IndexOutOfRange {
            what: "pathway start h",
            got: h,
            horizon: w.horizon,
        });
    }
    if h == t_end + 1 {
        return Ok(Array2::eye(w.n));
    }
    if t_end + 1 >= w.horizon {
        return Err(ModelError::IndexOutOfRange {
            what: "pathway end t",
            got: t_end,
            horizon: w.horizon,
        });
    }
    let mut r = closed_loop_factor(w, policy, h);
    for j in (h + 1)..=t_end {
        r = closed_loop_factor(w, policy, j).dot(&r);
    }
    Ok(r)
}

/// Sample one closed-loop trajectory from a fixed initial state.
pub fn sample_trajectory(
    w: &ModelParams,
    policy: &PolicyParams,
    s1: &Array1<f64>,
    stream: &mut Stream,
) -> Trajectory {
    let mut states = Vec::with_capacity(w.horizon);
    let mut actions = Vec::with_capacity(w.transitions());
    let mut s = s1.clone();
    states.push(s.clone());
    for t in 0..w.transitions() {
        let a = policy.action(w, t, &s);
        let dev_s = &s - &w.mu_s[t];
        let dev_a = &a - &w.mu_a[t];
        let mut next = &w.mu_s[t + 1]
            + &w.beta_s[t].t().dot(&dev_s)
            + &w.beta_a[t].t().dot(&dev_a);
        for k in 0..w.n {
            next[k] += rng::normal(stream, 0.0, w.v[t + 1][k]);
        }
        actions.push(a);
        states.push(next.clone());
        s = next;
    }
    Trajectory {
        replication_id: 0,
        states,
        actions,
    }
}

/// Sample a trajectory from the open-loop network: the initial state and all
/// actions are drawn from their marginals rather than set by a policy. This
/// is the generative law the Gibbs sampler inverts.
pub fn sample_open_loop(w: &ModelParams, stream: &mut Stream) -> Trajectory {
    let mut states = Vec::with_capacity(w.horizon);
    let mut actions = Vec::with_capacity(w.transitions());
    let mut s = Array1::zeros(w.n);
    for k in 0..w.n {
        s[k] = rng::normal(stream, w.mu_s[0][k], w.v[0][k]);
    }
    states.push(s.clone());
    for t in 0..w.transitions() {
        let mut a = Array1::zeros(w.m);
        for k in 0..w.m {
            a[k] = rng::normal(stream, w.mu_a[t][k], w.sigma[t][k]);
        }
        let dev_s = &s - &w.mu_s[t];
        let dev_a = &a - &w.mu_a[t];
        let mut next = &w.mu_s[t + 1]
            + &w.beta_s[t].t().dot(&dev_s)
            + &w.beta_a[t].t().dot(&dev_a);
        for k in 0..w.n {
            next[k] += rng::normal(stream, 0.0, w.v[t + 1][k]);
        }
        actions.push(a);
        states.push(next.clone());
        s = next;
    }
    Trajectory {
        replication_id: 0,
        states,
        actions,
    }
}

/// Conditional mean and covariance of the state at epoch `t` given the
/// observed initial state.
///
/// Mean: `mu_s[t] + R_{0,t-1} (s1 - mu_s[0])`. Covariance: the initial state
/// is observed, so only transition noise contributes:
/// `sum_{j=1..t} R_{j,t-1} diag(v[j]^2) R_{j,t-1}^T` (the `j = t` term being
/// `diag(v[t]^2)` itself). `t = 0` returns `(s1, 0)`.
pub fn predict_mean_var(
    w: &ModelParams,
    policy: &PolicyParams,
    s1: &Array1<f64>,
    t: usize,
) -> Result<(Array1<f64>, Array2<f64>), ModelError> {
    if t >= w.horizon {
        return Err(ModelError::IndexOutOfRange {
            what: "prediction epoch",
            got: t,
            horizon: w.horizon,
        });
    }
    if t == 0 {
        return Ok((s1.clone(), Array2::zeros((w.n, w.n))));
    }
    let d0 = s1 - &w.mu_s[0];
    let mean = &w.mu_s[t] + &pathway_product(w, policy, 0, t - 1)?.dot(&d0);
    let mut var = Array2::zeros((w.n, w.n));
    for j in 1..=t {
        let r = pathway_product(w, policy, j, t - 1)?;
        // r * diag(v_j^2) * r^T accumulated entrywise
        for p in 0..w.n {
            for q in 0..w.n {
                let mut acc = 0.0;
                for k in 0..w.n {
                    acc += r[(p, k)] * w.v[j][k] * w.v[j][k] * r[(q, k)];
                }
                var[(p, q)] += acc;
            }
        }
    }
    // enforce exact symmetry against accumulation order effects
    for p in 0..w.n {
        for q in (p + 1)..w.n {
            let s = 0.5 * (var[(p, q)] + var[(q, p)]);
            var[(p, q)] = s;
            var[(q, p)] = s;
        }
    }
    Ok((mean, var))
}

/// Mean states under the policy for every epoch (the `s_bar` sequence).
pub fn mean_states(w: &ModelParams, policy: &PolicyParams, s1: &Array1<f64>) -> Vec<Array1<f64>> {
    let mut out = Vec::with_capacity(w.horizon);
    let mut d = s1 - &w.mu_s[0];
    out.push(s1.clone());
    for t in 0..w.transitions() {
        d = closed_loop_factor(w, policy, t).dot(&d);
        out.push(&w.mu_s[t + 1] + &d);
    }
    out
}

/// Closed-form policy value `J(theta; w)`.
///
/// Valid models: `sum_t m_t + b_t.mu_a[t] + c_t.mu_s[t]
/// + (b_t^T vartheta_t^T + c_t^T) R_{0,t-1} (s1 - mu_s[0])`, the action terms
/// dropped at the final epoch. Invalid models: `horizon * m_c`.
pub fn policy_value(
    w: &ModelParams,
    policy: &PolicyParams,
    reward: &RewardSpec,
    s1: &Array1<f64>,
) -> f64 {
    if !validate_model(w) {
        return w.horizon as f64 * reward.m_c;
    }
    let mut total = 0.0;
    let mut d = s1 - &w.mu_s[0]; // R_{0,t-1} d0, updated incrementally
    for t in 0..w.horizon {
        if t > 0 {
            d = closed_loop_factor(w, policy, t - 1).dot(&d);
        }
        total += reward.m[t] + reward.c[t].dot(&w.mu_s[t]) + reward.c[t].dot(&d);
        if t + 1 < w.horizon {
            total += reward.b[t].dot(&w.mu_a[t]);
            total += reward.b[t].dot(&policy.vartheta[t].t().dot(&d));
        }
    }
    total
}

/// Network parameterization from a mechanistic vector field by first-order
/// Taylor expansion at per-epoch anchor points.
///
/// `anchors` supplies `(mean state, mean action)` for each epoch. Means
/// follow one Euler step of the field; coefficients are
/// `beta_s = (dt J_s + I)^T` and `beta_a = (dt J_a)^T` in this module's
/// storage convention, with Jacobians taken by central differences. Residual
/// scales are not estimated here and are left at 1.
pub fn linearize_ode<F>(
    field: F,
    anchors: &[(Array1<f64>, Array1<f64>)],
    dt: f64,
) -> Result<ModelParams, ModelError>
where
    F: Fn(&Array1<f64>, &Array1<f64>) -> Array1<f64>,
{
    let horizon = anchors.len();
    assert!(horizon >= 1);
    let n = anchors[0].0.len();
    let m = anchors[0].1.len();
    let mut w = ModelParams::zeroed(n, m, horizon);
    w.mu_s[0] = anchors[0].0.clone();
    for t in 0..horizon - 1 {
        let (s_anchor, a_anchor) = &anchors[t];
        let f0 = field(s_anchor, a_anchor);
        w.mu_s[t + 1] = s_anchor + &(f0.mapv(|x| x * dt));
        w.mu_a[t] = a_anchor.clone();

        // central-difference Jacobians at the anchor
        let mut js = Array2::zeros((n, n));
        for j in 0..n {
            let hstep = 1e-6 * s_anchor[j].abs().max(1.0);
            let mut sp = s_anchor.clone();
            let mut sm = s_anchor.clone();
            sp[j] += hstep;
            sm[j] -= hstep;
            let fp = field(&sp, a_anchor);
            let fm = field(&sm, a_anchor);
            for k in 0..n {
                js[(k, j)] = (fp[k] - fm[k]) / (2.0 * hstep);
            }
        }
        let mut ja = Array2::zeros((n, m));
        for j in 0..m {
            let hstep = 1e-6 * a_anchor[j].abs().max(1.0);
            let mut ap = a_anchor.clone();
            let mut am = a_anchor.clone();
            ap[j] += hstep;
            am[j] -= hstep;
            let fp = field(s_anchor, &ap);
            let fm = field(s_anchor, &am);
            for k in 0..n {
                ja[(k, j)] = (fp[k] - fm[k]) / (2.0 * hstep);
            }
        }
        if js.iter().any(|x| !x.is_finite())
            || ja.iter().any(|x| !x.is_finite())
            || w.mu_s[t + 1].iter().any(|x| !x.is_finite())
        {
            return Err(ModelError::LinearizationFailure { step: t });
        }
        // storage convention: beta[(parent, child)], transition applies beta^T
        for j in 0..n {
            for k in 0..n {
                w.beta_s[t][(j, k)] = dt * js[(k, j)] + if j == k { 1.0 } else { 0.0 };
            }
        }
        for j in 0..m {
            for k in 0..n {
                w.beta_a[t][(j, k)] = dt * ja[(k, j)];
            }
        }
    }
    Ok(w)
}
