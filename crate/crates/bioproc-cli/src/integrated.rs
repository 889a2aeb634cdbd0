//! Integrated upstream + downstream control: a 39-epoch concatenated process
//! made of the 36-epoch fermentation, a deterministic centrifugation bridge,
//! and the two precipitation stages in log coordinates.
//!
//! The model side mirrors that structure with two fixed-dimension network
//! segments joined by the bridge. Policy values and gradients compose
//! exactly for the locally linearized bridge: the downstream value is linear
//! in its entry state, so its sensitivity, pushed through the bridge
//! Jacobian at the fermentation's mean harvest state, enters the upstream
//! gradient as an extra terminal state-cost vector.

use std::fs;
use std::path::{Path, PathBuf};

use bioproc::gibbs::{sample_posterior, PriorHyper, TrajectoryData};
use bioproc::io::{fmt_f64, IoError};
use bioproc::kinetics::{
    centrifuge, fractional_solubility, generate_dataset, reference_feed_schedule,
    step_fermentation, step_purification, NoiseSpec, PolicyMode,
    PrecipitationStage, PurificationState, SOLUBILITY_IMPURITY, SOLUBILITY_PRODUCT,
};
use bioproc::model::{
    mean_states, pathway_product, policy_value, validate_model, AnchoredPolicy, BoxBounds,
    ModelParams, PolicyParams, RewardSpec,
};
use bioproc::optim::{optimize_with, OptimizationTrace};
use bioproc::rng::{self, Stream};
use ndarray::{Array1, Array2};

use crate::config::ExperimentConfig;
use crate::pipeline::{
    build_noise, canonical_scales, case_study_box, fermentation_reward, mean, mechanism_prior,
    nominal_s1, standard_error, to_trajectories, ScaleSet, STATE_DIM,
};

/// Downstream state dimension `(log P, log I)` and epochs (after
/// centrifugation, after P1, after P2).
pub const PURIF_DIM: usize = 2;
pub const PURIF_EPOCHS: usize = 3;

/// Nominal saturation setpoints for the two precipitation stages.
pub const ZETA_NOMINAL: [f64; 2] = [45.0, 70.0];

/// Box half-width for the downstream policy coefficients.
pub const PURIF_POLICY_HALF_WIDTH: f64 = 0.3;

pub fn purification_box() -> BoxBounds {
    BoxBounds::symmetric((PURIF_EPOCHS - 1) * PURIF_DIM * 1, PURIF_POLICY_HALF_WIDTH)
}

/// Downstream reward: saturation costs on both stage actions and the ending
/// profit `-15 + 1.3 log P - log I`.
pub fn purification_reward(cfg: &ExperimentConfig) -> RewardSpec {
    let mut reward = RewardSpec::zeroed(PURIF_DIM, 1, PURIF_EPOCHS, cfg.reward.m_c);
    reward.b[0] = Array1::from(vec![cfg.reward.purification_cost]);
    reward.b[1] = Array1::from(vec![cfg.reward.purification_cost]);
    reward.m[2] = cfg.reward.fixed_terminal;
    reward.c[2] = Array1::from(vec![1.3, -1.0]);
    reward
}

/// Log-domain purification noise: one row per downstream epoch, built from
/// the deterministic bridge of the fermentation profiles at the nominal
/// saturations.
pub fn purification_noise(cfg: &ExperimentConfig, ferm_noise: &NoiseSpec) -> NoiseSpec {
    if ferm_noise.is_deterministic() {
        return NoiseSpec::deterministic();
    }
    let last = ferm_noise
        .profiles
        .last()
        .expect("fermentation profiles are nonempty");
    let state = bioproc::kinetics::KineticState {
        x_f: last[0],
        c: last[1],
        l: last[2],
        s: last[3],
        n: last[4],
        v: last[5],
        t: 0.0,
    };
    let mut rows = Vec::with_capacity(PURIF_EPOCHS);
    let mut cur = centrifuge(&state).expect("reference harvest is nondegenerate");
    rows.push(vec![cur.log_p, cur.log_i]);
    let det = NoiseSpec::deterministic();
    let mut stream = rng::seeded(0);
    for (i, stage) in [PrecipitationStage::P1, PrecipitationStage::P2]
        .into_iter()
        .enumerate()
    {
        cur = step_purification(&cur, ZETA_NOMINAL[i].ln(), stage, &det, &mut stream)
            .expect("nominal saturations are valid");
        rows.push(vec![cur.log_p, cur.log_i]);
    }
    NoiseSpec::new(cfg.kappa, 1.0, rows)
}

/// Closed-form downstream model at the nominal saturations: identity
/// carryover on each log state and the analytic saturation sensitivities
/// `d log F / d log zeta = -b (1 - F)` (P1) and `b F` (P2).
pub fn purification_anchor_model(noise: &NoiseSpec) -> ModelParams {
    let mut w = ModelParams::zeroed(PURIF_DIM, 1, PURIF_EPOCHS);
    // anchor means from the deterministic reference path
    let det_rows: Vec<Vec<f64>> = if noise.is_deterministic() || noise.profiles.is_empty() {
        let mut rows = Vec::new();
        let mut cur = PurificationState {
            log_p: 100.0f64.ln(),
            log_i: 10.0f64.ln(),
        };
        rows.push(vec![cur.log_p, cur.log_i]);
        let det = NoiseSpec::deterministic();
        let mut stream = rng::seeded(0);
        for (i, stage) in [PrecipitationStage::P1, PrecipitationStage::P2]
            .into_iter()
            .enumerate()
        {
            cur = step_purification(&cur, ZETA_NOMINAL[i].ln(), stage, &det, &mut stream).unwrap();
            rows.push(vec![cur.log_p, cur.log_i]);
        }
        rows
    } else {
        noise.profiles.clone()
    };
    for t in 0..PURIF_EPOCHS {
        w.mu_s[t] = Array1::from(det_rows[t].clone());
        w.v[t] = Array1::from(vec![0.1, 0.1]);
    }
    for (t, stage) in [PrecipitationStage::P1, PrecipitationStage::P2]
        .into_iter()
        .enumerate()
    {
        w.mu_a[t] = Array1::from(vec![ZETA_NOMINAL[t].ln()]);
        w.sigma[t] = Array1::from(vec![0.1]);
        w.beta_s[t] = Array2::eye(PURIF_DIM);
        // no cross-edges between product and impurity in log space
        w.mask_s[t][(0, 1)] = false;
        w.mask_s[t][(1, 0)] = false;
        let zeta = ZETA_NOMINAL[t];
        let f_p = fractional_solubility(zeta, SOLUBILITY_PRODUCT.0, SOLUBILITY_PRODUCT.1);
        let f_i = fractional_solubility(zeta, SOLUBILITY_IMPURITY.0, SOLUBILITY_IMPURITY.1);
        let (g_p, g_i) = match stage {
            PrecipitationStage::P1 => (
                -SOLUBILITY_PRODUCT.1 * (1.0 - f_p),
                -SOLUBILITY_IMPURITY.1 * (1.0 - f_i),
            ),
            PrecipitationStage::P2 => (
                SOLUBILITY_PRODUCT.1 * f_p,
                SOLUBILITY_IMPURITY.1 * f_i,
            ),
        };
        w.beta_a[t][(0, 0)] = g_p;
        w.beta_a[t][(0, 1)] = g_i;
    }
    w
}

/// Stage-appropriate saturation windows for data generation: the first
/// precipitation explores below the product-solubility cliff and the second
/// above it, mirroring established operating practice. Crossing the cliff
/// would ruin the batch, which no historical operator does.
pub const ZETA_WINDOWS: [(f64, f64); 2] = [(30.0, 56.0), (58.0, 95.0)];

/// Saturation-action rule used when generating downstream data: mostly the
/// nominal setpoint with noise, sometimes a uniform draw over the stage
/// window.
fn epsilon_greedy_zeta(stage_idx: usize, stream: &mut Stream) -> f64 {
    let (lo, hi) = ZETA_WINDOWS[stage_idx];
    let zeta = if rng::uniform(stream, 0.0, 1.0) < bioproc::kinetics::EPSILON_GREEDY_EXPLOIT {
        rng::normal(stream, ZETA_NOMINAL[stage_idx], (hi - lo) / 10.0)
    } else {
        rng::uniform(stream, lo, hi)
    };
    zeta.clamp(lo, hi)
}

/// Simulated integrated dataset: fermentation runs continued through
/// centrifugation and both precipitation stages.
pub struct IntegratedData {
    pub ferm: TrajectoryData,
    pub purif: TrajectoryData,
    /// Replications dropped at the bridge (degenerate harvest).
    pub failed_bridges: usize,
}

pub fn simulate_integrated_dataset(
    cfg: &ExperimentConfig,
    scales: &ScaleSet,
    ferm_noise: &NoiseSpec,
    purif_noise: &NoiseSpec,
) -> Result<IntegratedData, IoError> {
    let params = cfg.kinetics.clone();
    let schedule = reference_feed_schedule(cfg.horizon_steps, 4.0);
    let data = generate_dataset(
        cfg.replications,
        PolicyMode::EpsilonGreedy {
            mean_profile: &schedule,
            max_profile: &schedule,
        },
        cfg.horizon_steps,
        &params,
        ferm_noise,
        &cfg.sim,
        cfg.seed,
    )
    .map_err(|e| IoError::Schema(e.to_string()))?;
    let ferm = TrajectoryData::new(to_trajectories(&data, scales));
    let mut purif_trajs = Vec::new();
    let mut failed = 0usize;
    for run in &data.runs {
        let mut stream = rng::substream(cfg.seed.wrapping_add(0x5eed), run.replication_id as u64);
        let harvest = run.states.last().expect("runs are nonempty");
        let entry = match centrifuge(harvest) {
            Ok(s) => s,
            Err(_) => {
                failed += 1;
                continue;
            }
        };
        let mut states = vec![Array1::from(vec![entry.log_p, entry.log_i])];
        let mut actions = Vec::new();
        let mut cur = entry;
        for (i, stage) in [PrecipitationStage::P1, PrecipitationStage::P2]
            .into_iter()
            .enumerate()
        {
            let zeta = epsilon_greedy_zeta(i, &mut stream);
            cur = step_purification(&cur, zeta.ln(), stage, purif_noise, &mut stream)
                .map_err(|e| IoError::Schema(e.to_string()))?;
            states.push(Array1::from(vec![cur.log_p, cur.log_i]));
            actions.push(Array1::from(vec![zeta.ln()]));
        }
        purif_trajs.push(bioproc::model::Trajectory {
            replication_id: run.replication_id,
            states,
            actions,
        });
    }
    Ok(IntegratedData {
        ferm,
        purif: TrajectoryData::new(purif_trajs),
        failed_bridges: failed,
    })
}

/// The two policy segments of the integrated controller.
#[derive(Debug, Clone)]
pub struct IntegratedPolicy {
    pub ferm: PolicyParams,
    pub purif: PolicyParams,
}

impl IntegratedPolicy {
    pub fn zeroed(cfg: &ExperimentConfig) -> Self {
        IntegratedPolicy {
            ferm: PolicyParams::zeroed(STATE_DIM, 1, cfg.horizon_steps, case_study_box(cfg.horizon_steps)),
            purif: PolicyParams::zeroed(PURIF_DIM, 1, PURIF_EPOCHS, purification_box()),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.ferm.to_flat();
        flat.extend(self.purif.to_flat());
        flat
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let split = self.ferm.param_count();
        IntegratedPolicy {
            ferm: self.ferm.with_flat(&flat[..split]),
            purif: self.purif.with_flat(&flat[split..]),
        }
    }

    pub fn joint_box(&self) -> BoxBounds {
        BoxBounds {
            lower: [
                self.ferm.bounds.lower.as_slice(),
                self.purif.bounds.lower.as_slice(),
            ]
            .concat(),
            upper: [
                self.ferm.bounds.upper.as_slice(),
                self.purif.bounds.upper.as_slice(),
            ]
            .concat(),
        }
    }
}

/// Bridge map from the scaled harvest mean to downstream log coordinates:
/// `(log C, log(xi X_f + S + N))` in physical units, plus the Jacobian with
/// respect to the scaled harvest state. Returns `None` when the mean harvest
/// is degenerate (treated as an invalid draw).
fn bridge_mean_and_jacobian(
    scaled_harvest: &Array1<f64>,
    scales: &ScaleSet,
) -> Option<(Array1<f64>, Array2<f64>)> {
    let x_f = scaled_harvest[0] * scales.state[0];
    let c = scaled_harvest[1] * scales.state[1];
    let s = scaled_harvest[2] * scales.state[2];
    let n = scaled_harvest[3] * scales.state[3];
    let p = c;
    let i = 0.01 * x_f + s + n;
    if p <= 0.0 || i <= 0.0 {
        return None;
    }
    let entry = Array1::from(vec![p.ln(), i.ln()]);
    let mut jac = Array2::zeros((PURIF_DIM, STATE_DIM));
    jac[(0, 1)] = scales.state[1] / p;
    jac[(1, 0)] = 0.01 * scales.state[0] / i;
    jac[(1, 2)] = scales.state[2] / i;
    jac[(1, 3)] = scales.state[3] / i;
    Some((entry, jac))
}

/// Composite value and gradient for one posterior draw pair. Either segment
/// failing validity (or a degenerate bridge) contributes the flat penalty
/// and zero gradient.
pub fn integrated_value_and_gradient(
    policy: &IntegratedPolicy,
    w_ferm: &ModelParams,
    w_purif: &ModelParams,
    reward_ferm: &RewardSpec,
    reward_purif: &RewardSpec,
    s1: &Array1<f64>,
    scales: &ScaleSet,
) -> (f64, Vec<f64>) {
    let total_epochs = (w_ferm.horizon + PURIF_EPOCHS) as f64;
    let zero_len = policy.ferm.param_count() + policy.purif.param_count();
    let penalty = total_epochs * reward_ferm.m_c;
    if !validate_model(w_ferm) || !validate_model(w_purif) {
        return (penalty, vec![0.0; zero_len]);
    }
    let ferm_means = mean_states(w_ferm, &policy.ferm, s1);
    let harvest = &ferm_means[w_ferm.horizon - 1];
    let Some((s1_purif, jac)) = bridge_mean_and_jacobian(harvest, scales) else {
        return (penalty, vec![0.0; zero_len]);
    };

    let j_ferm = policy_value(w_ferm, &policy.ferm, reward_ferm, s1);
    let j_purif = policy_value(w_purif, &policy.purif, reward_purif, &s1_purif);

    // downstream value sensitivity to its entry state:
    // gamma = sum_t R_{0,t-1}^T q_t with q_t = c_t + vartheta_t b_t
    let mut gamma = Array1::<f64>::zeros(PURIF_DIM);
    for t in 0..PURIF_EPOCHS {
        let q_t = if t + 1 < PURIF_EPOCHS {
            &reward_purif.c[t] + &policy.purif.vartheta[t].dot(&reward_purif.b[t])
        } else {
            reward_purif.c[t].clone()
        };
        let r = if t == 0 {
            Array2::eye(PURIF_DIM)
        } else {
            pathway_product(w_purif, &policy.purif, 0, t - 1).expect("epochs in range")
        };
        gamma += &r.t().dot(&q_t);
    }
    // push through the bridge: an extra state cost on the harvest epoch
    let terminal_cost = jac.t().dot(&gamma);
    let mut reward_aug = reward_ferm.clone();
    reward_aug.c[w_ferm.horizon - 1] =
        &reward_aug.c[w_ferm.horizon - 1] + &terminal_cost;

    let grad_ferm =
        bioproc::gradient::nbp_gradient(w_ferm, &policy.ferm, &reward_aug, s1);
    let grad_purif =
        bioproc::gradient::nbp_gradient(w_purif, &policy.purif, reward_purif, &s1_purif);

    let mut grad = grad_ferm;
    grad.extend(grad_purif);
    (j_ferm + j_purif, grad)
}

pub struct IntegratedFit {
    pub ferm_draws: Vec<ModelParams>,
    pub purif_draws: Vec<ModelParams>,
}

pub fn fit_integrated(
    cfg: &ExperimentConfig,
    scales: &ScaleSet,
    data: &IntegratedData,
) -> Result<IntegratedFit, IoError> {
    let ferm_prior = mechanism_prior(cfg, scales)?;
    let ferm_post = sample_posterior(
        &data.ferm,
        &ferm_prior,
        cfg.gibbs.draws,
        cfg.gibbs.burn_in,
        cfg.gibbs.thinning,
        cfg.seed,
    )
    .map_err(|e| IoError::Schema(e.to_string()))?;
    let purif_noise = purification_noise(cfg, &build_noise(cfg)?);
    let purif_prior = PriorHyper::mechanism_informed(purification_anchor_model(&purif_noise));
    let purif_post = sample_posterior(
        &data.purif,
        &purif_prior,
        cfg.gibbs.draws,
        cfg.gibbs.burn_in,
        cfg.gibbs.thinning,
        cfg.seed.wrapping_add(2),
    )
    .map_err(|e| IoError::Schema(e.to_string()))?;
    Ok(IntegratedFit {
        ferm_draws: ferm_post.draws,
        purif_draws: purif_post.draws,
    })
}

/// Optimize both policy segments jointly over fixed draw pairs.
pub fn optimize_integrated(
    cfg: &ExperimentConfig,
    scales: &ScaleSet,
    fit: &IntegratedFit,
) -> Result<(IntegratedPolicy, OptimizationTrace), IoError> {
    let reward_f = {
        // fermentation epochs carry only feed costs in the integrated run;
        // the profit flows through the downstream segment
        let mut r = fermentation_reward(cfg, scales);
        r.m[cfg.horizon_steps - 1] = 0.0;
        r.c[cfg.horizon_steps - 1].fill(0.0);
        r
    };
    let reward_p = purification_reward(cfg);
    let template = IntegratedPolicy::zeroed(cfg);
    let bounds = template.joint_box();
    let s1 = nominal_s1(scales);
    let pairs: Vec<(&ModelParams, &ModelParams)> = fit
        .ferm_draws
        .iter()
        .zip(fit.purif_draws.iter())
        .collect();
    let (flat, trace) = optimize_with(&template.to_flat(), &bounds, &cfg.optimizer, |flat, _k| {
        let policy = template.with_flat(flat);
        let mut j_sum = 0.0;
        let mut grad_sum = vec![0.0; flat.len()];
        for (wf, wp) in &pairs {
            let (j, g) =
                integrated_value_and_gradient(&policy, wf, wp, &reward_f, &reward_p, &s1, scales);
            j_sum += j;
            for (a, b) in grad_sum.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv = 1.0 / pairs.len() as f64;
        for g in &mut grad_sum {
            *g *= inv;
        }
        (j_sum * inv, grad_sum)
    })
    .map_err(|e| IoError::Schema(e.to_string()))?;
    Ok((template.with_flat(&flat), trace))
}

#[derive(Debug, Clone)]
pub struct IntegratedMetrics {
    pub name: String,
    pub rewards: Vec<f64>,
    pub yields: Vec<f64>,
    pub purities: Vec<f64>,
    pub failed_replications: usize,
}

impl IntegratedMetrics {
    pub fn reward_mean(&self) -> f64 {
        mean(&self.rewards)
    }
    pub fn purity_mean(&self) -> f64 {
        mean(&self.purities)
    }
    pub fn yield_mean(&self) -> f64 {
        mean(&self.yields)
    }
}

/// Executable integrated controller: anchored policies for both segments.
#[derive(Debug, Clone)]
pub struct IntegratedController {
    pub ferm: AnchoredPolicy,
    pub purif: AnchoredPolicy,
}

impl IntegratedController {
    pub fn from_fit(policy: &IntegratedPolicy, fit: &IntegratedFit, scales: &ScaleSet) -> Self {
        let (mu_s_f, mu_a_f) = crate::pipeline::posterior_mean_anchors(&fit.ferm_draws);
        let (mu_s_p, mu_a_p) = crate::pipeline::posterior_mean_anchors(&fit.purif_draws);
        IntegratedController {
            ferm: AnchoredPolicy {
                mu_s: mu_s_f[..mu_s_f.len() - 1].to_vec(),
                mu_a: mu_a_f,
                vartheta: policy.ferm.vartheta.clone(),
                state_scale: scales.state.clone(),
                action_scale: scales.action.clone(),
            },
            purif: AnchoredPolicy {
                mu_s: mu_s_p[..mu_s_p.len() - 1].to_vec(),
                mu_a: mu_a_p,
                vartheta: policy.purif.vartheta.clone(),
                state_scale: vec![1.0; PURIF_DIM],
                action_scale: vec![1.0; 1],
            },
        }
    }
}

/// Roll the full 39-epoch process once. Returns reward, yield and purity,
/// or `None` for a degenerate batch at the bridge.
pub fn roll_integrated(
    cfg: &ExperimentConfig,
    controller: &IntegratedController,
    ferm_noise: &NoiseSpec,
    purif_noise: &NoiseSpec,
    stream: &mut Stream,
) -> Result<Option<(f64, f64, f64)>, IoError> {
    let params = cfg.kinetics.clone();
    let mut state = bioproc::kinetics::KineticState::nominal_start();
    if !cfg.kappa.is_infinite() {
        let jitter = 1.0 / (5.0 * cfg.kappa);
        state.x_f *= (jitter * rng::standard_normal(stream)).exp();
        state.s *= (jitter * rng::standard_normal(stream)).exp();
        state.n *= (jitter * rng::standard_normal(stream)).exp();
        state.v *= (jitter * rng::standard_normal(stream)).exp();
    }
    let mut reward = 0.0;
    let mut terminated = false;
    for t in 0..cfg.horizon_steps - 1 {
        let feed = if terminated {
            0.0
        } else {
            controller.ferm.feed_rate(t, &state.cqa_vector())
        };
        reward += cfg.reward.action_cost * feed;
        if !terminated {
            state = step_fermentation(&state, feed, 4.0, &params, ferm_noise, &cfg.sim, stream)
                .map_err(|e| IoError::Schema(e.to_string()))?;
            if state.v >= cfg.sim.capacity_l {
                terminated = true;
            }
        }
    }
    let Ok(entry) = centrifuge(&state) else {
        return Ok(None);
    };
    let mut cur = entry;
    for (i, stage) in [PrecipitationStage::P1, PrecipitationStage::P2]
        .into_iter()
        .enumerate()
    {
        let obs = Array1::from(vec![cur.log_p, cur.log_i]);
        let a = controller.purif.action(i, &obs)[0];
        // keep the saturation inside its physical domain
        let a = a.clamp(1.0f64.ln(), 100.0f64.ln());
        reward += cfg.reward.purification_cost * a;
        cur = step_purification(&cur, a, stage, purif_noise, stream)
            .map_err(|e| IoError::Schema(e.to_string()))?;
    }
    reward += cfg.reward.fixed_terminal + 1.3 * cur.log_p - cur.log_i;
    let p = cur.log_p.exp();
    let i = cur.log_i.exp();
    Ok(Some((reward, p, p / (p + i))))
}

/// Paired evaluation of integrated controllers over macro-replications.
pub fn evaluate_integrated(
    cfg: &ExperimentConfig,
    controllers: &[(String, IntegratedController)],
    eval_seed: u64,
) -> Result<Vec<IntegratedMetrics>, IoError> {
    let ferm_noise = build_noise(cfg)?;
    let purif_noise = purification_noise(cfg, &ferm_noise);
    let mut out = Vec::new();
    for (name, controller) in controllers {
        let mut rewards = Vec::new();
        let mut yields = Vec::new();
        let mut purities = Vec::new();
        let mut failed = 0usize;
        for rep in 0..cfg.macro_reps {
            let mut stream = rng::substream(eval_seed, rep as u64);
            match roll_integrated(cfg, controller, &ferm_noise, &purif_noise, &mut stream)? {
                Some((r, y, p)) => {
                    rewards.push(r);
                    yields.push(y);
                    purities.push(p);
                }
                None => failed += 1,
            }
        }
        out.push(IntegratedMetrics {
            name: name.clone(),
            rewards,
            yields,
            purities,
            failed_replications: failed,
        });
    }
    Ok(out)
}

pub const INTEGRATED_HEADER: &str = "policy,reward_mean,reward_se,yield_mean,yield_se,purity_mean,purity_se,failed_replications";

pub fn write_integrated_csv(path: &Path, metrics: &[IntegratedMetrics]) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(INTEGRATED_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.name,
            fmt_f64(m.reward_mean()),
            fmt_f64(standard_error(&m.rewards)),
            fmt_f64(m.yield_mean()),
            fmt_f64(standard_error(&m.yields)),
            fmt_f64(m.purity_mean()),
            fmt_f64(standard_error(&m.purities)),
            m.failed_replications,
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub struct IntegratedOutput {
    pub report_path: PathBuf,
    pub metrics: Vec<IntegratedMetrics>,
    pub trace: OptimizationTrace,
}

/// End-to-end integrated run: simulate, fit both segments, optimize jointly,
/// then evaluate the optimized controller against its zero-coefficient twin.
pub fn run_integrated(cfg: &ExperimentConfig, out_dir: &Path) -> Result<IntegratedOutput, IoError> {
    fs::create_dir_all(out_dir)?;
    let scales = canonical_scales(cfg)?;
    let ferm_noise = build_noise(cfg)?;
    let purif_noise = purification_noise(cfg, &ferm_noise);
    let data = simulate_integrated_dataset(cfg, &scales, &ferm_noise, &purif_noise)?;
    if data.purif.is_empty() {
        return Err(IoError::Schema(
            "every replication degenerated at the centrifugation bridge".into(),
        ));
    }
    let fit = fit_integrated(cfg, &scales, &data)?;
    let (policy, trace) = optimize_integrated(cfg, &scales, &fit)?;
    let optimized = IntegratedController::from_fit(&policy, &fit, &scales);
    let initial = IntegratedController::from_fit(&IntegratedPolicy::zeroed(cfg), &fit, &scales);
    let metrics = evaluate_integrated(
        cfg,
        &[
            ("initial".into(), initial),
            ("optimized".into(), optimized),
        ],
        cfg.seed,
    )?;
    let report_path = out_dir.join("integrated_evaluation.csv");
    write_integrated_csv(&report_path, &metrics)?;
    bioproc::io::write_trace_csv(&out_dir.join("integrated_trace.csv"), &trace)?;
    Ok(IntegratedOutput {
        report_path,
        metrics,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purification_reward_layout() {
        let cfg = ExperimentConfig::default();
        let r = purification_reward(&cfg);
        assert_eq!(r.b[0][0], -0.05);
        assert_eq!(r.b[1][0], -0.05);
        assert_eq!(r.b[2][0], 0.0);
        assert_eq!(r.m[2], -15.0);
        assert_eq!(r.c[2][0], 1.3);
        assert_eq!(r.c[2][1], -1.0);
    }

    #[test]
    fn anchor_model_sensitivities_have_the_right_signs() {
        let w = purification_anchor_model(&NoiseSpec::deterministic());
        // P1: raising saturation precipitates more impurity (log I falls)
        assert!(w.beta_a[0][(0, 1)] < -1.0);
        // P2: raising saturation keeps more impurity
        assert!(w.beta_a[1][(0, 1)] > 0.5);
        // the product is nearly insensitive away from its cliff
        assert!(w.beta_a[0][(0, 0)].abs() < 0.05);
        assert!(w.beta_a[1][(0, 0)].abs() < 0.05);
        assert!(validate_model(&w));
    }

    #[test]
    fn zero_purification_action_costs_nothing() {
        let cfg = ExperimentConfig::default();
        let r = purification_reward(&cfg);
        // a = 0 means zeta = 1: the cost term vanishes with the action
        assert_eq!(r.b[0][0] * 0.0, 0.0);
    }

    #[test]
    fn bridge_jacobian_matches_finite_differences() {
        // non-unit scales exercise the chain rule through the units change
        let scales = ScaleSet {
            state: vec![40.0, 100.0, 30.0, 5.0, 0.7],
            action: vec![0.014],
        };
        let harvest = Array1::from(vec![1.0, 1.05, 0.1, 0.08, 1.0]);
        let (entry, jac) = bridge_mean_and_jacobian(&harvest, &scales).unwrap();
        assert!((entry[0] - 105.0f64.ln()).abs() < 1e-12);
        for j in 0..STATE_DIM {
            let mut up = harvest.clone();
            let mut dn = harvest.clone();
            let h = 1e-6;
            up[j] += h;
            dn[j] -= h;
            let (e_up, _) = bridge_mean_and_jacobian(&up, &scales).unwrap();
            let (e_dn, _) = bridge_mean_and_jacobian(&dn, &scales).unwrap();
            for k in 0..PURIF_DIM {
                let fd = (e_up[k] - e_dn[k]) / (2.0 * h);
                assert!(
                    (jac[(k, j)] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                    "jac[{k}][{j}] {} vs fd {fd}",
                    jac[(k, j)]
                );
            }
        }
        // degenerate harvests are rejected
        let bad = Array1::from(vec![0.0, 0.0, 0.0, 0.0, 0.5]);
        assert!(bridge_mean_and_jacobian(&bad, &scales).is_none());
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let cfg = ExperimentConfig {
            horizon_steps: 6,
            ..ExperimentConfig::default()
        };
        // small synthetic segment pair
        let mut wf = ModelParams::zeroed(STATE_DIM, 1, 6);
        let mut stream = rng::seeded(3);
        for t in 0..6 {
            wf.mu_s[t] = Array1::from_iter((0..STATE_DIM).map(|k| {
                5.0 + k as f64 + 0.3 * rng::uniform(&mut stream, -1.0, 1.0)
            }));
            wf.v[t].fill(0.2);
        }
        for t in 0..5 {
            wf.mu_a[t] = Array1::from(vec![0.01]);
            wf.sigma[t].fill(0.05);
            wf.beta_s[t] =
                Array2::from_shape_fn((STATE_DIM, STATE_DIM), |_| {
                    rng::uniform(&mut stream, -0.3, 0.3)
                }) + Array2::<f64>::eye(STATE_DIM) * 0.5;
            wf.beta_a[t] =
                Array2::from_shape_fn((1, STATE_DIM), |_| rng::uniform(&mut stream, -0.2, 0.2));
        }
        let wp = purification_anchor_model(&NoiseSpec::deterministic());
        let reward_f = {
            let mut r = fermentation_reward(&cfg, &ScaleSet::identity());
            r.m[5] = 0.0;
            r.c[5].fill(0.0);
            r
        };
        let reward_p = purification_reward(&cfg);
        let mut policy = IntegratedPolicy::zeroed(&cfg);
        for th in policy.ferm.vartheta.iter_mut().chain(policy.purif.vartheta.iter_mut()) {
            *th = Array2::from_shape_fn(th.dim(), |_| rng::uniform(&mut stream, -0.05, 0.05));
        }
        let s1 = &wf.mu_s[0] + &Array1::from(vec![0.3, -0.2, 0.1, 0.05, -0.1]);
        let unit_scales = ScaleSet::identity();

        let (_, grad) =
            integrated_value_and_gradient(&policy, &wf, &wp, &reward_f, &reward_p, &s1, &unit_scales);
        let flat = policy.to_flat();
        for i in (0..flat.len()).step_by(3) {
            let h = 1e-6;
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[i] += h;
            dn[i] -= h;
            let (ju, _) = integrated_value_and_gradient(
                &policy.with_flat(&up),
                &wf,
                &wp,
                &reward_f,
                &reward_p,
                &s1,
                &unit_scales,
            );
            let (jd, _) = integrated_value_and_gradient(
                &policy.with_flat(&dn),
                &wf,
                &wp,
                &reward_f,
                &reward_p,
                &s1,
                &unit_scales,
            );
            let fd = (ju - jd) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() <= 1e-5 + 1e-4 * fd.abs(),
                "entry {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }
}
