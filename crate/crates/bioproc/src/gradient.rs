//! Exact policy gradients of the closed-form objective.
//!
//! The expected reward at epoch `t` is `r_bar_t = m_t + c_t.s_bar_t +
//! b_t.(mu_a[t] + vartheta_t^T (s_bar_t - mu_s[t]))`, so with
//! `q_t = c_t + vartheta_t b_t` and `d_t = s_bar_t - mu_s[t]`:
//!
//! ```text
//! d r_bar_t / d vartheta_h = d_t b_t^T                      if h = t
//! d r_bar_t / d vartheta_h = d_h (q_t^T delta_h^t)          if h < t
//! delta_h^t = R_{h+1,t-1} (beta_a[h])^T
//! ```
//!
//! The `h < t` case pairs the deviation at `h` with the reward sensitivity
//! propagated back through the pathway product; the arrangement (deviation
//! indexing rows, propagated sensitivity indexing columns) is the one that
//! agrees with central finite differences of the policy value.
//!
//! The nested sweep reuses `R_{h+1,t-1} -> R_{h,t-1}` with one multiply per
//! step, which is the O(H^2 n^2 m) pass; the brute-force path rebuilds every
//! pathway product from scratch, O(H^3 n^2 m), and exists as an oracle and a
//! scaling baseline.

use ndarray::{Array1, Array2};

use crate::error::ModelError;
use crate::model::{
    closed_loop_factor, mean_states, pathway_product, validate_model, ModelParams, PolicyParams,
    RewardSpec,
};

/// Flatten per-transition gradient matrices in the fixed policy order.
pub fn flatten_gradient(mats: &[Array2<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(mats.iter().map(|m| m.len()).sum());
    for g in mats {
        let (nrow, ncol) = g.dim();
        for q in 0..ncol {
            for p in 0..nrow {
                out.push(g[(p, q)]);
            }
        }
    }
    out
}

/// Reward sensitivity vector `q_t = c_t + vartheta_t b_t`; the final epoch
/// has no action term.
fn reward_sensitivity(
    policy: &PolicyParams,
    reward: &RewardSpec,
    t: usize,
    horizon: usize,
) -> Array1<f64> {
    if t + 1 < horizon {
        &reward.c[t] + &policy.vartheta[t].dot(&reward.b[t])
    } else {
        reward.c[t].clone()
    }
}

/// Cached pathway products, backpropagation kernels and mean states for one
/// `(w, theta, s1)` triple. Holds the full `[h][t]` tables, so it suits
/// inspection and per-term queries; the production gradient path below uses
/// a leaner rolling cache instead.
pub struct GradientTape<'a> {
    pub w: &'a ModelParams,
    pub policy: &'a PolicyParams,
    /// Mean state per epoch (matches `predict_mean_var`).
    pub s_bar: Vec<Array1<f64>>,
    /// `r_store[t][h]` = `R_{h,t}` for transitions `h..=t`, `h <= t + 1`.
    pub r_store: Vec<Vec<Array2<f64>>>,
    /// `delta_store[t][h]` = `delta_h^t` for `h < t`.
    pub delta_store: Vec<Vec<Array2<f64>>>,
}

impl<'a> GradientTape<'a> {
    pub fn build(w: &'a ModelParams, policy: &'a PolicyParams, s1: &Array1<f64>) -> Self {
        let trans = w.transitions();
        let s_bar = mean_states(w, policy, s1);
        let mut r_store: Vec<Vec<Array2<f64>>> = Vec::with_capacity(trans);
        for t in 0..trans {
            // R_{h,t} for h = t+1 down to 0, stored ascending by h
            let mut row = vec![Array2::eye(w.n); t + 2];
            let mut m = Array2::eye(w.n);
            for h in (0..=t).rev() {
                m = m.dot(&closed_loop_factor(w, policy, h));
                row[h] = m.clone();
            }
            r_store.push(row);
        }
        let mut delta_store: Vec<Vec<Array2<f64>>> = Vec::with_capacity(w.horizon);
        for t in 0..w.horizon {
            let mut row = Vec::new();
            if t >= 1 {
                for h in 0..t {
                    // delta_h^t = R_{h+1,t-1} beta_a[h]^T
                    let r = if h + 1 == t {
                        Array2::eye(w.n)
                    } else {
                        r_store[t - 1][h + 1].clone()
                    };
                    row.push(r.dot(&w.beta_a[h].t()));
                }
            }
            delta_store.push(row);
        }
        GradientTape {
            w,
            policy,
            s_bar,
            r_store,
            delta_store,
        }
    }

    pub fn deviation(&self, t: usize) -> Array1<f64> {
        &self.s_bar[t] - &self.w.mu_s[t]
    }
}

/// Single term `d r_bar_t / d vartheta_h` from a prebuilt tape.
pub fn partial_reward_gradient(
    tape: &GradientTape<'_>,
    reward: &RewardSpec,
    t: usize,
    h: usize,
) -> Result<Array2<f64>, ModelError> {
    let w = tape.w;
    if t >= w.horizon || h > t || h >= w.transitions() {
        return Err(ModelError::IndexOutOfRange {
            what: "reward gradient index",
            got: h.max(t),
            horizon: w.horizon,
        });
    }
    let d_h = tape.deviation(h);
    if h == t {
        let mut out = Array2::zeros((w.n, w.m));
        for p in 0..w.n {
            for q in 0..w.m {
                out[(p, q)] = d_h[p] * reward.b[t][q];
            }
        }
        return Ok(out);
    }
    let q_t = reward_sensitivity(tape.policy, reward, t, w.horizon);
    let row = tape.delta_store[t][h].t().dot(&q_t); // (q_t^T delta)^T, length m
    let mut out = Array2::zeros((w.n, w.m));
    for p in 0..w.n {
        for q in 0..w.m {
            out[(p, q)] = d_h[p] * row[q];
        }
    }
    Ok(out)
}

/// Policy gradient of the cumulative objective by the nested sweep.
///
/// For each reward epoch `t`, the pathway product grows one factor at a time
/// while `h` walks backward, so every `delta_h^t` costs one small
/// matrix-matrix product. Per-epoch storage is released when `t` advances.
pub fn nbp_gradient(
    w: &ModelParams,
    policy: &PolicyParams,
    reward: &RewardSpec,
    s1: &Array1<f64>,
) -> Vec<f64> {
    let trans = w.transitions();
    let s_bar = mean_states(w, policy, s1);
    let devs: Vec<Array1<f64>> = (0..w.horizon).map(|t| &s_bar[t] - &w.mu_s[t]).collect();
    // closed-loop factors shared across every t-sweep
    let factors: Vec<Array2<f64>> = (0..trans)
        .map(|t| closed_loop_factor(w, policy, t))
        .collect();
    let mut grads = vec![Array2::<f64>::zeros((w.n, w.m)); trans];

    for t in 0..w.horizon {
        if t < trans {
            for p in 0..w.n {
                for q in 0..w.m {
                    grads[t][(p, q)] += devs[t][p] * reward.b[t][q];
                }
            }
        }
        if t == 0 {
            continue;
        }
        let q_t = reward_sensitivity(policy, reward, t, w.horizon);
        // u^T = q_t^T R_{h+1,t-1}, rolled backward over h
        let mut u = q_t;
        for h in (0..t).rev() {
            let row = w.beta_a[h].dot(&u); // (q^T R (beta_a)^T)^T, length m
            for p in 0..w.n {
                for q in 0..w.m {
                    grads[h][(p, q)] += devs[h][p] * row[q];
                }
            }
            if h > 0 {
                u = factors[h].t().dot(&u); // u^T <- u^T A_h
            }
        }
    }
    flatten_gradient(&grads)
}

/// Same output contract as [`nbp_gradient`], recomputing every pathway
/// product from scratch. O(H) slower by construction.
pub fn brute_force_gradient(
    w: &ModelParams,
    policy: &PolicyParams,
    reward: &RewardSpec,
    s1: &Array1<f64>,
) -> Vec<f64> {
    let trans = w.transitions();
    let s_bar = mean_states(w, policy, s1);
    let devs: Vec<Array1<f64>> = (0..w.horizon).map(|t| &s_bar[t] - &w.mu_s[t]).collect();
    let mut grads = vec![Array2::<f64>::zeros((w.n, w.m)); trans];

    for t in 0..w.horizon {
        if t < trans {
            for p in 0..w.n {
                for q in 0..w.m {
                    grads[t][(p, q)] += devs[t][p] * reward.b[t][q];
                }
            }
        }
        if t == 0 {
            continue;
        }
        let q_t = reward_sensitivity(policy, reward, t, w.horizon);
        for h in (0..t).rev() {
            // R_{h+1,t-1} built fresh for every (t, h) pair
            let r = pathway_product(w, policy, h + 1, t.wrapping_sub(1))
                .expect("indices validated by loop bounds");
            let delta = r.dot(&w.beta_a[h].t());
            let row = delta.t().dot(&q_t);
            for p in 0..w.n {
                for q in 0..w.m {
                    grads[h][(p, q)] += devs[h][p] * row[q];
                }
            }
        }
    }
    flatten_gradient(&grads)
}

/// Sample-average gradient over posterior draws: invalid draws contribute a
/// zero gradient but still count in the average. Reduction order is the draw
/// order, so the result is bit-stable for a fixed draw list.
pub fn saa_gradient(
    policy: &PolicyParams,
    draws: &[ModelParams],
    reward: &RewardSpec,
    s1: &Array1<f64>,
) -> Vec<f64> {
    assert!(!draws.is_empty(), "need at least one draw");
    let len = policy.param_count();
    let mut acc = vec![0.0; len];
    for w in draws {
        if !validate_model(w) {
            continue;
        }
        let g = nbp_gradient(w, policy, reward, s1);
        for (a, x) in acc.iter_mut().zip(&g) {
            *a += x;
        }
    }
    let inv = 1.0 / draws.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    acc
}
