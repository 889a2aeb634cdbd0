//! The fermentation experiment pipeline: simulate, fit, optimize, evaluate,
//! attribute, profile.
//!
//! The network is fit in canonically scaled coordinates: each state is
//! divided by the peak of its deterministic reference profile and the feed
//! by the peak reference rate. Per-step regression coefficients then live on
//! a common O(1) scale, which keeps 35-step pathway products conditioned,
//! makes one prior spread meaningful for every edge, and gives the policy
//! box its intended per-row meaning. The reward maps exactly under this
//! units change, and exported policies carry their scales so they execute
//! against raw observations.
//!
//! Every stage writes plain artifacts (CSV or versioned JSON) plus a
//! manifest, and every stage is a deterministic function of its config and
//! seed, so a pipeline can be replayed artifact by artifact.

use std::fs;
use std::path::{Path, PathBuf};

use bioproc::gibbs::{sample_posterior, GibbsChain, PriorHyper, TrajectoryData};
use bioproc::io::{self, fmt_f64, IoError, PolicyDocument};
use bioproc::kinetics::{
    bootstrap_state_profiles, generate_dataset, reference_feed_schedule, step_fermentation,
    KineticParams, KineticState, NoiseSpec, PolicyMode, SimDataset, SimSettings,
};
use bioproc::model::{
    AnchoredPolicy, BoxBounds, ModelParams, PolicyParams, RewardSpec, Trajectory,
};
use bioproc::optim::{dbn_rl_optimize, DrawSource, FixedDraws, OptimizationTrace};
use bioproc::rng::{self, Stream};
use bioproc::shapley::expected_shapley;
use ndarray::Array1;

use crate::config::{DrawMode, ExperimentConfig};

pub const STATE_DIM: usize = 5;
pub const ACTION_DIM: usize = 1;

/// Columns of the six-variable simulator profile that form the recorded
/// attributes `(X_f, C, S, N, V)`.
const CQA_COLUMNS: [usize; STATE_DIM] = [0, 1, 3, 4, 5];

/// Per-row policy bounds for the fermentation coefficients (scaled
/// coordinates), in state order `(X_f, C, S, N, V)`.
pub const POLICY_ROW_BOUNDS: [(f64, f64); STATE_DIM] = [
    (0.0, 0.3),
    (0.0, 0.3),
    (-0.1, 0.1),
    (-0.1, 0.02),
    (-0.7, 0.5),
];

/// Physical units per model unit for states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

impl ScaleSet {
    pub fn identity() -> Self {
        ScaleSet {
            state: vec![1.0; STATE_DIM],
            action: vec![1.0; ACTION_DIM],
        }
    }

    pub fn scale_state(&self, raw: &Array1<f64>) -> Array1<f64> {
        Array1::from_iter(raw.iter().zip(&self.state).map(|(&x, &s)| x / s))
    }
}

/// Canonical scales from the deterministic reference run: the peak of each
/// state profile and the peak feed rate.
pub fn canonical_scales(cfg: &ExperimentConfig) -> Result<ScaleSet, IoError> {
    let params = cfg.kinetics.clone();
    let schedule = reference_feed_schedule(cfg.horizon_steps, 4.0);
    let profiles = bootstrap_state_profiles(&schedule, &params, &cfg.sim, 4.0)
        .map_err(|e| IoError::Schema(e.to_string()))?;
    let mut state = Vec::with_capacity(STATE_DIM);
    for &col in &CQA_COLUMNS {
        let peak = profiles
            .iter()
            .map(|row| row[col].abs())
            .fold(0.0f64, f64::max);
        state.push(peak.max(1e-6));
    }
    let action = vec![schedule.iter().cloned().fold(0.0f64, f64::max).max(1e-9)];
    Ok(ScaleSet { state, action })
}

/// Flattened box for the fermentation policy.
pub fn case_study_box(horizon: usize) -> BoxBounds {
    let mut lower = Vec::with_capacity((horizon - 1) * STATE_DIM);
    let mut upper = Vec::with_capacity((horizon - 1) * STATE_DIM);
    for _t in 0..horizon - 1 {
        for (lo, hi) in POLICY_ROW_BOUNDS {
            lower.push(lo);
            upper.push(hi);
        }
    }
    BoxBounds { lower, upper }
}

/// Fermentation reward in scaled coordinates: the same physical reward,
/// re-expressed per model unit.
pub fn fermentation_reward(cfg: &ExperimentConfig, scales: &ScaleSet) -> RewardSpec {
    let h = cfg.horizon_steps;
    let mut reward = RewardSpec::zeroed(STATE_DIM, ACTION_DIM, h, cfg.reward.m_c);
    for t in 0..h - 1 {
        reward.b[t] = Array1::from(vec![cfg.reward.action_cost * scales.action[0]]);
    }
    reward.m[h - 1] = cfg.reward.fixed_terminal;
    let mut c_h = Array1::zeros(STATE_DIM);
    c_h[1] = cfg.reward.titer_value * scales.state[1];
    reward.c[h - 1] = c_h;
    reward
}

/// Noise spec bootstrapped from one deterministic run under the reference
/// schedule.
pub fn build_noise(cfg: &ExperimentConfig) -> Result<NoiseSpec, IoError> {
    let params = cfg.kinetics.clone();
    let schedule = reference_feed_schedule(cfg.horizon_steps, 4.0);
    let profiles = bootstrap_state_profiles(&schedule, &params, &cfg.sim, 4.0)
        .map_err(|e| IoError::Schema(e.to_string()))?;
    Ok(NoiseSpec::new(cfg.kappa, 4.0, profiles))
}

/// Nominal initial state in scaled model coordinates.
pub fn nominal_s1(scales: &ScaleSet) -> Array1<f64> {
    scales.scale_state(&KineticState::nominal_start().cqa_vector())
}

/// Project the simulator dataset onto scaled model coordinates.
pub fn to_trajectories(data: &SimDataset, scales: &ScaleSet) -> Vec<Trajectory> {
    data.runs
        .iter()
        .map(|run| Trajectory {
            replication_id: run.replication_id,
            states: run.states.iter().map(|s| scales.scale_state(&s.cqa_vector())).collect(),
            actions: run
                .feeds
                .iter()
                .map(|&f| Array1::from(vec![f / scales.action[0]]))
                .collect(),
        })
        .collect()
}

/// Anchor trajectory in scaled coordinates plus the frozen lipid values.
fn scaled_anchors(
    cfg: &ExperimentConfig,
    scales: &ScaleSet,
) -> Result<Vec<(Array1<f64>, Array1<f64>, f64)>, IoError> {
    let params = cfg.kinetics.clone();
    let schedule = reference_feed_schedule(cfg.horizon_steps, 4.0);
    let anchors =
        bioproc::kinetics::anchor_trajectory(&schedule, &params, &cfg.sim, 4.0, cfg.horizon_steps)
            .map_err(|e| IoError::Schema(e.to_string()))?;
    Ok(anchors
        .into_iter()
        .map(|(s, a, lipid)| {
            let s_scaled = scales.scale_state(&s);
            let a_scaled = Array1::from(vec![a[0] / scales.action[0]]);
            (s_scaled, a_scaled, lipid)
        })
        .collect())
}

/// Deterministic one-interval flow map in scaled coordinates, with lipid
/// carried from the anchor.
fn flow_map(
    params: &KineticParams,
    sim: &SimSettings,
    scales: &ScaleSet,
    scaled_state: &Array1<f64>,
    lipid: f64,
    scaled_feed: f64,
    t_start: f64,
) -> Array1<f64> {
    let state = KineticState {
        x_f: (scaled_state[0] * scales.state[0]).max(0.0),
        c: (scaled_state[1] * scales.state[1]).max(0.0),
        l: lipid,
        s: (scaled_state[2] * scales.state[2]).max(0.0),
        n: (scaled_state[3] * scales.state[3]).max(0.0),
        v: (scaled_state[4] * scales.state[4]).max(1e-6),
        t: t_start,
    };
    let mut stream = rng::seeded(0); // unused in the deterministic limit
    let next = step_fermentation(
        &state,
        (scaled_feed * scales.action[0]).max(0.0),
        4.0,
        params,
        &NoiseSpec::deterministic(),
        sim,
        &mut stream,
    )
    .expect("deterministic flow map stays finite near the anchor");
    scales.scale_state(&next.cqa_vector())
}

/// Mechanism-informed prior centered on the linearized reference dynamics.
///
/// Coefficients come from central differences of the deterministic 4 h flow
/// map at the anchor trajectory rather than the one-step Euler form
/// `dt J + I`: the substrate coordinate relaxes much faster than the
/// observation interval once it nears its saturation constant, where the
/// Euler coefficient explodes while the true interval-to-interval
/// sensitivity is nearly zero.
pub fn mechanism_prior(cfg: &ExperimentConfig, scales: &ScaleSet) -> Result<PriorHyper, IoError> {
    let params = cfg.kinetics.clone();
    let anchors = scaled_anchors(cfg, scales)?;
    let mut center = ModelParams::zeroed(STATE_DIM, ACTION_DIM, cfg.horizon_steps);
    for t in 0..cfg.horizon_steps {
        center.mu_s[t] = anchors[t].0.clone();
    }
    for t in 0..cfg.horizon_steps - 1 {
        let (s_anchor, a_anchor, lipid) = &anchors[t];
        let t_start = t as f64 * 4.0;
        center.mu_a[t] = a_anchor.clone();
        for j in 0..STATE_DIM {
            let h = 1e-4 * s_anchor[j].abs().max(1e-3);
            let mut up = s_anchor.clone();
            up[j] += h;
            let mut dn = s_anchor.clone();
            dn[j] = (dn[j] - h).max(0.0); // one-sided at the physical floor
            let spread = up[j] - dn[j];
            let f_up = flow_map(&params, &cfg.sim, scales, &up, *lipid, a_anchor[0], t_start);
            let f_dn = flow_map(&params, &cfg.sim, scales, &dn, *lipid, a_anchor[0], t_start);
            for k in 0..STATE_DIM {
                center.beta_s[t][(j, k)] = (f_up[k] - f_dn[k]) / spread;
            }
        }
        let h = 1e-4 * a_anchor[0].abs().max(1e-3);
        let up = a_anchor[0] + h;
        let dn = (a_anchor[0] - h).max(0.0);
        let f_up = flow_map(&params, &cfg.sim, scales, s_anchor, *lipid, up, t_start);
        let f_dn = flow_map(&params, &cfg.sim, scales, s_anchor, *lipid, dn, t_start);
        for k in 0..STATE_DIM {
            center.beta_a[t][(0, k)] = (f_up[k] - f_dn[k]) / (up - dn);
        }
        if center.beta_s[t].iter().any(|x| !x.is_finite())
            || center.beta_a[t].iter().any(|x| !x.is_finite())
        {
            return Err(IoError::Schema(format!(
                "flow linearization produced a non-finite coefficient at transition {t}"
            )));
        }
    }
    let mut prior = PriorHyper::mechanism_informed(center);
    // spreads sized for the scaled coordinates: coefficients live on an O(1)
    // correlation scale and residuals near the noise floor, so unit-scale
    // spreads would drown a small dataset and let unidentified edges draw
    // coefficients whose 35-step products overflow
    prior.delta_beta = 0.3;
    prior.delta_mu = 2.0;
    prior.delta_lambda = 2.0;
    prior.rho_v = 0.01;
    prior.rho_sigma = 0.01;
    Ok(prior)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub struct SimulateOutput {
    pub dataset_path: PathBuf,
    pub manifest_path: PathBuf,
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SimulateOutput, IoError> {
    fs::create_dir_all(out_dir)?;
    let params = cfg.kinetics.clone();
    let noise = build_noise(cfg)?;
    let schedule = reference_feed_schedule(cfg.horizon_steps, 4.0);
    let data = generate_dataset(
        cfg.replications,
        PolicyMode::EpsilonGreedy {
            mean_profile: &schedule,
            max_profile: &schedule,
        },
        cfg.horizon_steps,
        &params,
        &noise,
        &cfg.sim,
        cfg.seed,
    )
    .map_err(|e| IoError::Schema(e.to_string()))?;
    let dataset_path = out_dir.join("dataset.csv");
    io::write_dataset_csv(&dataset_path, &data)?;
    let manifest_path = out_dir.join("dataset_manifest.json");
    fs::write(&manifest_path, serde_json::to_string(&data.provenance)?)?;
    Ok(SimulateOutput {
        dataset_path,
        manifest_path,
    })
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

pub fn cmd_fit(
    cfg: &ExperimentConfig,
    dataset_path: &Path,
    out_dir: &Path,
) -> Result<PathBuf, IoError> {
    fs::create_dir_all(out_dir)?;
    let data = io::read_dataset_csv(dataset_path)?;
    let scales = canonical_scales(cfg)?;
    let trajectories = TrajectoryData::new(to_trajectories(&data, &scales));
    let priors = mechanism_prior(cfg, &scales)?;
    let posterior = sample_posterior(
        &trajectories,
        &priors,
        cfg.gibbs.draws,
        cfg.gibbs.burn_in,
        cfg.gibbs.thinning,
        cfg.seed,
    )
    .map_err(|e| IoError::Schema(e.to_string()))?;
    let draws_dir = out_dir.join("posterior");
    io::write_posterior(&draws_dir, &posterior)?;
    Ok(draws_dir)
}

// ---------------------------------------------------------------------------
// optimize
// ---------------------------------------------------------------------------

pub struct OptimizeOutput {
    pub policy_path: PathBuf,
    pub trace_path: PathBuf,
    pub trace: OptimizationTrace,
    pub policy: PolicyParams,
}

/// Posterior-mean anchors over a draw set, used to freeze an executable
/// policy.
pub fn posterior_mean_anchors(draws: &[ModelParams]) -> (Vec<Array1<f64>>, Vec<Array1<f64>>) {
    let horizon = draws[0].horizon;
    let inv = 1.0 / draws.len() as f64;
    let mut mu_s = vec![Array1::<f64>::zeros(draws[0].n); horizon];
    let mut mu_a = vec![Array1::<f64>::zeros(draws[0].m); horizon - 1];
    for d in draws {
        for t in 0..horizon {
            mu_s[t] += &d.mu_s[t];
        }
        for t in 0..horizon - 1 {
            mu_a[t] += &d.mu_a[t];
        }
    }
    for x in mu_s.iter_mut().chain(mu_a.iter_mut()) {
        *x *= inv;
    }
    (mu_s, mu_a)
}

pub fn optimize_policy(
    cfg: &ExperimentConfig,
    source: &mut dyn DrawSource,
    reward: &RewardSpec,
    scales: &ScaleSet,
) -> Result<(PolicyParams, OptimizationTrace), IoError> {
    let theta0 = PolicyParams::zeroed(
        STATE_DIM,
        ACTION_DIM,
        cfg.horizon_steps,
        case_study_box(cfg.horizon_steps),
    );
    dbn_rl_optimize(source, reward, &nominal_s1(scales), &theta0, &cfg.optimizer)
        .map_err(|e| IoError::Schema(e.to_string()))
}

/// Freeze an executable policy from optimization output: posterior-mean
/// anchors plus the coordinate scales.
pub fn anchored_from(
    policy: &PolicyParams,
    draws: &[ModelParams],
    scales: &ScaleSet,
    horizon: usize,
) -> AnchoredPolicy {
    let (mu_s, mu_a) = posterior_mean_anchors(draws);
    AnchoredPolicy {
        mu_s: mu_s[..horizon - 1].to_vec(),
        mu_a,
        vartheta: policy.vartheta.clone(),
        state_scale: scales.state.clone(),
        action_scale: scales.action.clone(),
    }
}

pub fn cmd_optimize(
    cfg: &ExperimentConfig,
    draws_dir: &Path,
    dataset_path: Option<&Path>,
    out_dir: &Path,
) -> Result<OptimizeOutput, IoError> {
    fs::create_dir_all(out_dir)?;
    let scales = canonical_scales(cfg)?;
    let reward = fermentation_reward(cfg, &scales);
    let (draws, _manifest) = io::read_posterior(draws_dir)?;
    let (policy, trace) = match cfg.draw_mode {
        DrawMode::Fixed => {
            let mut source = FixedDraws(draws.clone());
            optimize_policy(cfg, &mut source, &reward, &scales)?
        }
        DrawMode::Fresh => {
            let dataset_path = dataset_path.ok_or_else(|| {
                IoError::Schema(
                    "fresh-draw optimization needs the dataset to run a live chain".into(),
                )
            })?;
            let data = io::read_dataset_csv(dataset_path)?;
            let trajectories = TrajectoryData::new(to_trajectories(&data, &scales));
            let priors = mechanism_prior(cfg, &scales)?;
            let mut chain = GibbsChain::start(
                trajectories,
                priors,
                cfg.gibbs.burn_in,
                cfg.gibbs.thinning,
                cfg.optimizer.draws_per_iter,
                cfg.seed.wrapping_add(1),
            )
            .map_err(|e| IoError::Schema(e.to_string()))?;
            optimize_policy(cfg, &mut chain, &reward, &scales)?
        }
    };
    let anchored = anchored_from(&policy, &draws, &scales, cfg.horizon_steps);
    let policy_path = out_dir.join("policy.json");
    io::write_policy(&policy_path, &PolicyDocument::new(&policy, anchored))?;
    let trace_path = out_dir.join("trace.csv");
    io::write_trace_csv(&trace_path, &trace)?;
    Ok(OptimizeOutput {
        policy_path,
        trace_path,
        trace,
        policy,
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// How a policy under evaluation chooses the feed.
pub enum EvalPolicy {
    ReferenceProfile,
    Anchored(AnchoredPolicy),
}

#[derive(Debug, Clone)]
pub struct PolicyMetrics {
    pub name: String,
    pub rewards: Vec<f64>,
    pub titers: Vec<f64>,
}

impl PolicyMetrics {
    pub fn reward_mean(&self) -> f64 {
        mean(&self.rewards)
    }
    pub fn reward_se(&self) -> f64 {
        standard_error(&self.rewards)
    }
    pub fn titer_mean(&self) -> f64 {
        mean(&self.titers)
    }
    pub fn titer_se(&self) -> f64 {
        standard_error(&self.titers)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn standard_error(xs: &[f64]) -> f64 {
    // identical samples (deterministic runs) get an exact zero rather than
    // the rounding residue of the mean subtraction
    if xs.len() < 2 || xs.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// Roll one fermentation replication under a policy; returns cumulative
/// reward, final titer and the harvest state.
pub fn roll_fermentation(
    cfg: &ExperimentConfig,
    policy: &EvalPolicy,
    noise: &NoiseSpec,
    stream: &mut Stream,
) -> Result<(f64, f64, KineticState), IoError> {
    let params = cfg.kinetics.clone();
    let schedule = reference_feed_schedule(cfg.horizon_steps, 4.0);
    let mut state = KineticState::nominal_start();
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
            match policy {
                EvalPolicy::ReferenceProfile => schedule[t],
                EvalPolicy::Anchored(p) => p.feed_rate(t, &state.cqa_vector()),
            }
        };
        reward += cfg.reward.action_cost * feed;
        if !terminated {
            state = step_fermentation(&state, feed, 4.0, &params, noise, &cfg.sim, stream)
                .map_err(|e| IoError::Schema(e.to_string()))?;
            if state.v >= cfg.sim.capacity_l {
                terminated = true;
            }
        }
    }
    reward += cfg.reward.fixed_terminal + cfg.reward.titer_value * state.c;
    Ok((reward, state.c, state))
}

/// Paired evaluation: all policies see the same per-replication stream
/// seeds, so comparisons share common random numbers.
pub fn evaluate_policies(
    cfg: &ExperimentConfig,
    policies: &[(String, EvalPolicy)],
    eval_seed: u64,
) -> Result<Vec<PolicyMetrics>, IoError> {
    let noise = build_noise(cfg)?;
    let mut out = Vec::new();
    for (name, policy) in policies {
        let mut rewards = Vec::with_capacity(cfg.macro_reps);
        let mut titers = Vec::with_capacity(cfg.macro_reps);
        for rep in 0..cfg.macro_reps {
            let mut stream = rng::substream(eval_seed, rep as u64);
            let (r, c, _) = roll_fermentation(cfg, policy, &noise, &mut stream)?;
            rewards.push(r);
            titers.push(c);
        }
        out.push(PolicyMetrics {
            name: name.clone(),
            rewards,
            titers,
        });
    }
    Ok(out)
}

pub const EVALUATION_HEADER: &str = "policy,reward_mean,reward_se,titer_mean,titer_se";

pub fn write_evaluation_csv(path: &Path, metrics: &[PolicyMetrics]) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(EVALUATION_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.name,
            fmt_f64(m.reward_mean()),
            fmt_f64(m.reward_se()),
            fmt_f64(m.titer_mean()),
            fmt_f64(m.titer_se()),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Evaluate the optimized policy alongside the zero-coefficient initial
/// policy and the reference profile.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    policy_paths: &[PathBuf],
    out_dir: &Path,
) -> Result<(PathBuf, Vec<PolicyMetrics>), IoError> {
    fs::create_dir_all(out_dir)?;
    let mut policies: Vec<(String, EvalPolicy)> =
        vec![("reference".into(), EvalPolicy::ReferenceProfile)];
    for (i, path) in policy_paths.iter().enumerate() {
        let doc = io::read_policy(path)?;
        if doc.anchored.vartheta.len() != cfg.horizon_steps - 1
            || doc.anchored.vartheta[0].dim() != (STATE_DIM, ACTION_DIM)
        {
            return Err(IoError::Schema(format!(
                "{}: policy dimensions do not match the configured horizon",
                path.display()
            )));
        }
        let name = if policy_paths.len() == 1 {
            "optimized".to_string()
        } else {
            format!("optimized_{i}")
        };
        // the zero-coefficient twin of each policy: same anchors, theta = 0
        let mut initial = doc.anchored.clone();
        for th in &mut initial.vartheta {
            th.fill(0.0);
        }
        policies.push((format!("initial_{name}"), EvalPolicy::Anchored(initial)));
        policies.push((name, EvalPolicy::Anchored(doc.anchored)));
    }
    let metrics = evaluate_policies(cfg, &policies, cfg.seed)?;
    let path = out_dir.join("evaluation.csv");
    write_evaluation_csv(&path, &metrics)?;
    Ok((path, metrics))
}

// ---------------------------------------------------------------------------
// shapley
// ---------------------------------------------------------------------------

pub const ATTRIBUTION_HEADER: &str =
    "input_name,output_coordinate,contribution,baseline,conditioned_value";

/// Draw-averaged attribution of the epoch-`h` inputs (physical units) to the
/// predicted state at `t + 1`, written as waterfall data for one output
/// coordinate in physical units.
#[allow(clippy::too_many_arguments)]
pub fn cmd_shapley(
    policy_path: &Path,
    draws_dir: &Path,
    observed_state: &Array1<f64>,
    observed_action: &Array1<f64>,
    h: usize,
    t: usize,
    output_coord: usize,
    out_dir: &Path,
) -> Result<PathBuf, IoError> {
    fs::create_dir_all(out_dir)?;
    let doc = io::read_policy(policy_path)?;
    let policy = doc.to_policy();
    let scales = ScaleSet {
        state: doc.anchored.state_scale.clone(),
        action: doc.anchored.action_scale.clone(),
    };
    let (draws, _) = io::read_posterior(draws_dir)?;
    let scaled_state = scales.scale_state(observed_state);
    let scaled_action = Array1::from(vec![observed_action[0] / scales.action[0]]);
    let report = expected_shapley(&draws, &policy, &scaled_state, &scaled_action, h, t)
        .map_err(|e| IoError::Schema(e.to_string()))?;
    let unit = scales.state[output_coord];
    let mut out = String::new();
    out.push_str(ATTRIBUTION_HEADER);
    out.push('\n');
    let names = ["X_f", "C", "S", "N", "V", "feed"];
    for (k, contribution) in report.contributions.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            names.get(k).copied().unwrap_or("input"),
            output_coord,
            fmt_f64(contribution[output_coord] * unit),
            fmt_f64(report.baseline[output_coord] * unit),
            fmt_f64(report.conditioned[output_coord] * unit),
        ));
    }
    let path = out_dir.join("attribution.csv");
    fs::write(&path, out)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// profiles
// ---------------------------------------------------------------------------

pub const PROFILE_HEADER: &str = "step_index,time_h,mean_feed,ci_lower,ci_upper";

/// Mean feeding profile of a policy over macro-replications with a 95%
/// normal confidence band.
pub fn cmd_profiles(
    cfg: &ExperimentConfig,
    policy_path: &Path,
    out_dir: &Path,
) -> Result<PathBuf, IoError> {
    fs::create_dir_all(out_dir)?;
    let doc = io::read_policy(policy_path)?;
    let noise = build_noise(cfg)?;
    let params = cfg.kinetics.clone();
    let steps = cfg.horizon_steps - 1;
    let mut feeds_per_step: Vec<Vec<f64>> = vec![Vec::new(); steps];
    for rep in 0..cfg.macro_reps {
        let mut stream = rng::substream(cfg.seed, rep as u64);
        let mut state = KineticState::nominal_start();
        if !cfg.kappa.is_infinite() {
            let jitter = 1.0 / (5.0 * cfg.kappa);
            state.x_f *= (jitter * rng::standard_normal(&mut stream)).exp();
            state.s *= (jitter * rng::standard_normal(&mut stream)).exp();
            state.n *= (jitter * rng::standard_normal(&mut stream)).exp();
            state.v *= (jitter * rng::standard_normal(&mut stream)).exp();
        }
        for t in 0..steps {
            let feed = doc.anchored.feed_rate(t, &state.cqa_vector());
            feeds_per_step[t].push(feed);
            state = step_fermentation(&state, feed, 4.0, &params, &noise, &cfg.sim, &mut stream)
                .map_err(|e| IoError::Schema(e.to_string()))?;
        }
    }
    let mut out = String::new();
    out.push_str(PROFILE_HEADER);
    out.push('\n');
    for t in 0..cfg.horizon_steps {
        let (m, half) = if t < steps {
            let m = mean(&feeds_per_step[t]);
            (m, 1.96 * standard_error(&feeds_per_step[t]))
        } else {
            (0.0, 0.0)
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t,
            fmt_f64(t as f64 * 4.0),
            fmt_f64(m),
            fmt_f64(m - half),
            fmt_f64(m + half),
        ));
    }
    let path = out_dir.join("profiles.csv");
    fs::write(&path, out)?;
    Ok(path)
}
