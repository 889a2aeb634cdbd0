//! Closed-form Shapley attribution of time-`h` inputs to the expected state
//! at a later epoch.
//!
//! The conditional mean of the model is linear in the observed deviations:
//! conditioning on one input `o_h^k` and leaving the rest at their means
//! shifts the prediction by a pathway-propagated multiple of that input's
//! deviation, and conditioning on a set is the sum of the single-input
//! shifts. The Shapley value of an additive game is just each player's own
//! marginal, which gives the closed form
//!
//! ```text
//! Sh(s_{t+1} | s_h^k) = R_{h+1,t} (beta_s[h])^T e_k (s_h^k - mu_h^k)
//! Sh(s_{t+1} | a_h^k) = R_{h+1,t} (beta_a[h])^T e_k (a_h^k - lambda_h^k)
//! ```
//!
//! The subset-enumeration oracle evaluates the full factorial-weighted sum
//! and is kept as an independent check.

use ndarray::Array1;

use crate::error::ShapleyError;
use crate::model::{pathway_product, validate_model, ModelParams, PolicyParams};

/// Hard cap for the factorial enumeration in the oracle.
pub const ORACLE_INPUT_LIMIT: usize = 12;

/// Per-input attribution vectors for one `(h, t)` query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionReport {
    /// `n` state inputs then `m` action inputs, in coordinate order.
    pub input_names: Vec<String>,
    /// One n-vector per input: its contribution to `E[s_{t+1}]`.
    pub contributions: Vec<Array1<f64>>,
    /// Unconditioned mean `mu_s[t+1]`.
    pub baseline: Array1<f64>,
    /// `E[s_{t+1} | O_h]`: baseline plus all contributions.
    pub conditioned: Array1<f64>,
    /// Posterior draws skipped as invalid (zero for single-model reports).
    pub skipped_draws: usize,
}

impl AttributionReport {
    /// Scalar contributions toward one output coordinate.
    pub fn scalar_projection(&self, output_coord: usize) -> Vec<f64> {
        self.contributions
            .iter()
            .map(|c| c[output_coord])
            .collect()
    }

    /// Largest elementwise gap in the efficiency identity
    /// `sum_k Sh_k = conditioned - baseline`.
    pub fn efficiency_gap(&self) -> f64 {
        let n = self.baseline.len();
        let mut total = Array1::<f64>::zeros(n);
        for c in &self.contributions {
            total += c;
        }
        let target = &self.conditioned - &self.baseline;
        total
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn default_names(n: usize, m: usize) -> Vec<String> {
    (0..n)
        .map(|k| format!("s{k}"))
        .chain((0..m).map(|k| format!("a{k}")))
        .collect()
}

fn check_indices(w: &ModelParams, h: usize, t: usize) -> Result<(), ShapleyError> {
    if h > t || t + 1 >= w.horizon {
        return Err(ShapleyError::IndexOutOfRange {
            h,
            t,
            horizon: w.horizon,
        });
    }
    Ok(())
}

/// Per-input deviation effects on `s_{t+1}`: the building block shared by
/// the closed form and the oracle. Entry `k` is the shift in `E[s_{t+1}]`
/// caused by observing input `k` alone.
fn single_input_effects(
    w: &ModelParams,
    policy: &PolicyParams,
    observed_state: &Array1<f64>,
    observed_action: &Array1<f64>,
    h: usize,
    t: usize,
) -> Vec<Array1<f64>> {
    let r = pathway_product(w, policy, h + 1, t).expect("indices checked by caller");
    let mut effects = Vec::with_capacity(w.n + w.m);
    for k in 0..w.n {
        let dev = observed_state[k] - w.mu_s[h][k];
        let col: Array1<f64> = w.beta_s[h].row(k).to_owned();
        effects.push(r.dot(&col) * dev);
    }
    for k in 0..w.m {
        let dev = observed_action[k] - w.mu_a[h][k];
        let col: Array1<f64> = w.beta_a[h].row(k).to_owned();
        effects.push(r.dot(&col) * dev);
    }
    effects
}

/// Closed-form Shapley attribution of the inputs at epoch `h` to
/// `E[s_{t+1}]`, conditional on one model.
pub fn shapley_closed_form(
    w: &ModelParams,
    policy: &PolicyParams,
    observed_state: &Array1<f64>,
    observed_action: &Array1<f64>,
    h: usize,
    t: usize,
) -> Result<AttributionReport, ShapleyError> {
    check_indices(w, h, t)?;
    let contributions = single_input_effects(w, policy, observed_state, observed_action, h, t);
    let baseline = w.mu_s[t + 1].clone();
    let mut conditioned = baseline.clone();
    for c in &contributions {
        conditioned += c;
    }
    Ok(AttributionReport {
        input_names: default_names(w.n, w.m),
        contributions,
        baseline,
        conditioned,
        skipped_draws: 0,
    })
}

/// Subset-enumeration oracle: evaluates the factorial-weighted Shapley sum
/// with coalition values `g(U) = E[s_{t+1} | U]`, unobserved deviations set
/// to zero. Limited to `n + m <= 12` players.
pub fn shapley_oracle(
    w: &ModelParams,
    policy: &PolicyParams,
    observed_state: &Array1<f64>,
    observed_action: &Array1<f64>,
    h: usize,
    t: usize,
) -> Result<AttributionReport, ShapleyError> {
    check_indices(w, h, t)?;
    let players = w.n + w.m;
    if players > ORACLE_INPUT_LIMIT {
        return Err(ShapleyError::SizeGuard {
            got: players,
            limit: ORACLE_INPUT_LIMIT,
        });
    }
    let effects = single_input_effects(w, policy, observed_state, observed_action, h, t);
    let factorial: Vec<f64> = {
        let mut f = vec![1.0; players + 1];
        for i in 1..=players {
            f[i] = f[i - 1] * i as f64;
        }
        f
    };
    // g(U) = baseline + sum of member effects (additivity of the
    // linear-Gaussian conditional mean)
    let coalition_value = |mask: u32| -> Array1<f64> {
        let mut v = Array1::zeros(w.n);
        for (k, eff) in effects.iter().enumerate() {
            if mask & (1 << k) != 0 {
                v += eff;
            }
        }
        v
    };
    let mut contributions = Vec::with_capacity(players);
    for k in 0..players {
        let others: Vec<usize> = (0..players).filter(|&j| j != k).collect();
        let mut sh = Array1::<f64>::zeros(w.n);
        for subset_bits in 0u32..(1 << others.len()) {
            let mut mask = 0u32;
            let mut size = 0usize;
            for (pos, &j) in others.iter().enumerate() {
                if subset_bits & (1 << pos) != 0 {
                    mask |= 1 << j;
                    size += 1;
                }
            }
            let weight =
                factorial[players - size - 1] * factorial[size] / factorial[players];
            let with_k = coalition_value(mask | (1 << k));
            let without_k = coalition_value(mask);
            sh = sh + (with_k - without_k) * weight;
        }
        contributions.push(sh);
    }
    let baseline = w.mu_s[t + 1].clone();
    let mut conditioned = baseline.clone();
    for c in &contributions {
        conditioned += c;
    }
    Ok(AttributionReport {
        input_names: default_names(w.n, w.m),
        contributions,
        baseline,
        conditioned,
        skipped_draws: 0,
    })
}

/// Draw-averaged attribution: closed-form reports averaged over posterior
/// draws, invalid draws skipped and counted.
pub fn expected_shapley(
    draws: &[ModelParams],
    policy: &PolicyParams,
    observed_state: &Array1<f64>,
    observed_action: &Array1<f64>,
    h: usize,
    t: usize,
) -> Result<AttributionReport, ShapleyError> {
    assert!(!draws.is_empty(), "need at least one draw");
    let mut accumulated: Option<AttributionReport> = None;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for w in draws {
        if !validate_model(w) {
            skipped += 1;
            continue;
        }
        let report = shapley_closed_form(w, policy, observed_state, observed_action, h, t)?;
        used += 1;
        match &mut accumulated {
            None => accumulated = Some(report),
            Some(acc) => {
                for (a, c) in acc.contributions.iter_mut().zip(&report.contributions) {
                    *a += c;
                }
                acc.baseline += &report.baseline;
                acc.conditioned += &report.conditioned;
            }
        }
    }
    let mut acc = accumulated.ok_or(ShapleyError::EmptyReport(draws.len()))?;
    let inv = 1.0 / used as f64;
    for c in &mut acc.contributions {
        *c *= inv;
    }
    acc.baseline *= inv;
    acc.conditioned *= inv;
    acc.skipped_draws = skipped;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BoxBounds;
    use crate::rng::{self, seeded};
    use ndarray::Array2;

    fn random_instance(
        n: usize,
        m: usize,
        horizon: usize,
        seed: u64,
    ) -> (ModelParams, PolicyParams, Array1<f64>, Array1<f64>) {
        let mut stream = seeded(seed);
        let mut w = ModelParams::zeroed(n, m, horizon);
        for t in 0..horizon {
            w.mu_s[t] = Array1::from_iter((0..n).map(|_| rng::uniform(&mut stream, -1.0, 1.0)));
            w.v[t] = Array1::from_iter((0..n).map(|_| rng::uniform(&mut stream, 0.1, 0.3)));
        }
        for t in 0..horizon - 1 {
            w.mu_a[t] = Array1::from_iter((0..m).map(|_| rng::uniform(&mut stream, -1.0, 1.0)));
            w.sigma[t] = Array1::from_iter((0..m).map(|_| rng::uniform(&mut stream, 0.1, 0.3)));
            w.beta_s[t] = Array2::from_shape_fn((n, n), |_| rng::uniform(&mut stream, -0.8, 0.8));
            w.beta_a[t] = Array2::from_shape_fn((m, n), |_| rng::uniform(&mut stream, -0.8, 0.8));
        }
        let policy = {
            let bounds = BoxBounds::symmetric((horizon - 1) * n * m, 2.0);
            let mut p = PolicyParams::zeroed(n, m, horizon, bounds);
            for t in 0..horizon - 1 {
                p.vartheta[t] =
                    Array2::from_shape_fn((n, m), |_| rng::uniform(&mut stream, -0.4, 0.4));
            }
            p
        };
        let s_obs =
            &w.mu_s[1] + &Array1::from_iter((0..n).map(|_| rng::uniform(&mut stream, -1.0, 1.0)));
        let a_obs =
            &w.mu_a[1] + &Array1::from_iter((0..m).map(|_| rng::uniform(&mut stream, -1.0, 1.0)));
        (w, policy, s_obs, a_obs)
    }

    #[test]
    fn mean_valued_input_contributes_nothing() {
        let (w, policy, _, a_obs) = random_instance(3, 2, 6, 1);
        let s_obs = w.mu_s[1].clone();
        let report = shapley_closed_form(&w, &policy, &s_obs, &a_obs, 1, 3).unwrap();
        for k in 0..3 {
            assert!(report.contributions[k].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identity_pathway_at_h_equals_t_reads_the_deviation_off_coordinate_k() {
        let (mut w, mut policy, s_obs, a_obs) = random_instance(3, 1, 5, 2);
        let h = 2;
        w.beta_s[h] = Array2::eye(3);
        w.beta_a[h].fill(0.0);
        for th in &mut policy.vartheta {
            th.fill(0.0);
        }
        let report = shapley_closed_form(&w, &policy, &s_obs, &a_obs, h, h).unwrap();
        for k in 0..3 {
            let dev = s_obs[k] - w.mu_s[h][k];
            for j in 0..3 {
                let want = if j == k { dev } else { 0.0 };
                assert!((report.contributions[k][j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn closed_form_equals_oracle() {
        for seed in 0..30 {
            let (w, policy, s_obs, a_obs) = random_instance(3, 2, 6, 10 + seed);
            let h = (seed as usize) % 3;
            let t = h + (seed as usize) % (4 - h);
            let a = shapley_closed_form(&w, &policy, &s_obs, &a_obs, h, t).unwrap();
            let b = shapley_oracle(&w, &policy, &s_obs, &a_obs, h, t).unwrap();
            for (ca, cb) in a.contributions.iter().zip(&b.contributions) {
                for (x, y) in ca.iter().zip(cb.iter()) {
                    assert!((x - y).abs() < 1e-10, "seed {seed}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn efficiency_identity_holds_for_both_routes() {
        for seed in 0..10 {
            let (w, policy, s_obs, a_obs) = random_instance(4, 2, 7, 40 + seed);
            let a = shapley_closed_form(&w, &policy, &s_obs, &a_obs, 1, 4).unwrap();
            let b = shapley_oracle(&w, &policy, &s_obs, &a_obs, 1, 4).unwrap();
            assert!(a.efficiency_gap() < 1e-10);
            assert!(b.efficiency_gap() < 1e-10);
        }
    }

    #[test]
    fn single_player_game_is_its_own_marginal() {
        let (w, policy, s_obs, _) = random_instance(1, 0, 4, 3);
        let a_obs = Array1::zeros(0);
        let report = shapley_oracle(&w, &policy, &s_obs, &a_obs, 0, 2).unwrap();
        let closed = shapley_closed_form(&w, &policy, &s_obs, &a_obs, 0, 2).unwrap();
        assert!((report.contributions[0][0] - closed.contributions[0][0]).abs() < 1e-14);
        let grand = &report.conditioned - &report.baseline;
        assert!((report.contributions[0][0] - grand[0]).abs() < 1e-14);
    }

    #[test]
    fn dummy_player_with_masked_row_gets_zero() {
        let (mut w, policy, s_obs, a_obs) = random_instance(3, 1, 5, 4);
        let h = 1;
        for k in 0..3 {
            w.mask_s[h][(0, k)] = false; // s^0 has no outgoing edges at h
        }
        w.apply_masks();
        let report = shapley_closed_form(&w, &policy, &s_obs, &a_obs, h, 3).unwrap();
        assert!(report.contributions[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attribution_is_linear_in_the_deviation() {
        let (w, policy, s_obs, a_obs) = random_instance(3, 1, 5, 5);
        let h = 1;
        let t = 3;
        let base = shapley_closed_form(&w, &policy, &s_obs, &a_obs, h, t).unwrap();
        let mut doubled_obs = s_obs.clone();
        doubled_obs[2] = w.mu_s[h][2] + 2.0 * (s_obs[2] - w.mu_s[h][2]);
        let doubled = shapley_closed_form(&w, &policy, &doubled_obs, &a_obs, h, t).unwrap();
        for j in 0..3 {
            assert!((doubled.contributions[2][j] - 2.0 * base.contributions[2][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn draw_average_and_invalid_handling() {
        let (w, policy, s_obs, a_obs) = random_instance(3, 1, 5, 6);
        let single = expected_shapley(
            std::slice::from_ref(&w),
            &policy,
            &s_obs,
            &a_obs,
            1,
            3,
        )
        .unwrap();
        let closed = shapley_closed_form(&w, &policy, &s_obs, &a_obs, 1, 3).unwrap();
        assert_eq!(single.contributions, closed.contributions);

        let duplicated =
            expected_shapley(&[w.clone(), w.clone()], &policy, &s_obs, &a_obs, 1, 3).unwrap();
        for (a, b) in duplicated.contributions.iter().zip(&closed.contributions) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }

        let mut bad = w.clone();
        bad.v[0][0] = -0.5;
        let mixed =
            expected_shapley(&[w.clone(), bad.clone()], &policy, &s_obs, &a_obs, 1, 3).unwrap();
        assert_eq!(mixed.skipped_draws, 1);
        assert!(matches!(
            expected_shapley(&[bad.clone(), bad], &policy, &s_obs, &a_obs, 1, 3),
            Err(ShapleyError::EmptyReport(2))
        ));
    }

    #[test]
    fn oracle_size_guard() {
        let (w, policy, s_obs, a_obs) = random_instance(8, 5, 4, 7);
        assert!(matches!(
            shapley_oracle(&w, &policy, &s_obs, &a_obs, 0, 2),
            Err(ShapleyError::SizeGuard { got: 13, limit: 12 })
        ));
    }

    #[test]
    fn index_guards() {
        let (w, policy, s_obs, a_obs) = random_instance(2, 1, 4, 8);
        // t + 1 must stay inside the horizon
        assert!(shapley_closed_form(&w, &policy, &s_obs, &a_obs, 0, 3).is_err());
        assert!(shapley_closed_form(&w, &policy, &s_obs, &a_obs, 2, 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn efficiency_holds_for_arbitrary_observations(
            s_dev in proptest::collection::vec(-5.0f64..5.0, 3),
            a_dev in proptest::collection::vec(-5.0f64..5.0, 2),
        ) {
            let (w, policy, _, _) = random_instance(3, 2, 6, 77);
            let s_obs = &w.mu_s[1] + &Array1::from(s_dev);
            let a_obs = &w.mu_a[1] + &Array1::from(a_dev);
            let report = shapley_closed_form(&w, &policy, &s_obs, &a_obs, 1, 3).unwrap();
            proptest::prop_assert!(report.efficiency_gap() < 1e-10);
        }
    }

    #[test]
    fn report_is_independent_of_input_listing_order() {
        // the closed form indexes inputs by coordinate, so permuting the
        // report rows carries the permutation along with the values
        let (w, policy, s_obs, a_obs) = random_instance(3, 2, 5, 9);
        let report = shapley_closed_form(&w, &policy, &s_obs, &a_obs, 1, 3).unwrap();
        // recompute with state coordinates swapped in the observation and
        // swap back: contributions must match the originals
        let mut swapped = s_obs.clone();
        swapped.swap(0, 1);
        let mut w2 = w.clone();
        w2.mu_s[1].swap(0, 1);
        let row0 = w2.beta_s[1].row(0).to_owned();
        let row1 = w2.beta_s[1].row(1).to_owned();
        w2.beta_s[1].row_mut(0).assign(&row1);
        w2.beta_s[1].row_mut(1).assign(&row0);
        let report2 = shapley_closed_form(&w2, &policy, &swapped, &a_obs, 1, 3).unwrap();
        for j in 0..3 {
            assert!((report.contributions[0][j] - report2.contributions[1][j]).abs() < 1e-12);
            assert!((report.contributions[1][j] - report2.contributions[0][j]).abs() < 1e-12);
        }
    }
}
