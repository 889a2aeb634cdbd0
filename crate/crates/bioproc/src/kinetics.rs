//! Stochastic kinetic simulator for fed-batch fermentation and downstream
//! purification. Serves as ground truth and as the data source for model
//! fitting.
//!
//! The fermentation model tracks lipid-free cell mass `X_f`, citrate `C`,
//! lipid `L`, substrate `S`, nitrogen `N` and working volume `V`. Cell growth
//! follows coupled Monod kinetics with substrate inhibition and cell-density
//! inhibition; citrate and lipid share a carbon flow split by `r_L`; feeding
//! adds substrate and volume, base addition tracks growth and citrate
//! formation, and evaporation removes volume. Dissolved oxygen is held at its
//! setpoint (30% of air saturation) by cascade control, so the oxygen Monod
//! factor is constant. pH and temperature are likewise held at setpoints and
//! do not appear.
//!
//! Noise enters as a Wiener term per state variable with amplitude
//! `sigma(s_t) = profile(t) / kappa`, where the profile is the per-time mean
//! state. The Brownian clock is normalized to the batch, so `profile / kappa`
//! is the scale of the cumulative noise over a full run; `kappa = inf` gives
//! the deterministic limit. Integration is sub-stepped Euler-Maruyama with
//! nonnegativity clamps after every sub-step.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::KineticsError;
use crate::rng::{self, Stream};

/// Dissolved-oxygen setpoint, percent of air saturation.
pub const OXYGEN_SETPOINT: f64 = 30.0;

/// Floor used when volume-normalized rates would divide by zero.
const VOLUME_EPS: f64 = 1e-9;

/// Simulator state. Concentrations in g/L, volume in L, time in hours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticState {
    pub x_f: f64,
    pub c: f64,
    pub l: f64,
    pub s: f64,
    pub n: f64,
    pub v: f64,
    pub t: f64,
}

impl KineticState {
    /// Nominal seed-train state: low inoculum, substrate-rich, 0.6 L.
    pub fn nominal_start() -> Self {
        KineticState {
            x_f: 0.05,
            c: 0.0,
            l: 0.0,
            s: 30.0,
            n: 5.0,
            v: 0.6,
            t: 0.0,
        }
    }

    /// The five recorded quality attributes `(X_f, C, S, N, V)`; lipid stays
    /// internal to the simulator.
    pub fn cqa_vector(&self) -> Array1<f64> {
        Array1::from(vec![self.x_f, self.c, self.s, self.n, self.v])
    }

    fn as_array(&self) -> [f64; 6] {
        [self.x_f, self.c, self.l, self.s, self.n, self.v]
    }

    fn set_from_array(&mut self, a: [f64; 6]) {
        self.x_f = a[0];
        self.c = a[1];
        self.l = a[2];
        self.s = a[3];
        self.n = a[4];
        self.v = a[5];
    }
}

pub const STATE_NAMES: [&str; 6] = ["X_f", "C", "L", "S", "N", "V"];

/// Environmental constants of the fermentation model with their fitted
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    /// Coefficient of lipid production tied to cell growth.
    pub alpha_l: f64,
    /// Maximum citrate concentration cells tolerate (g/L).
    pub c_max: f64,
    /// Nitrogen limitation constant gating lipid/citrate production (g/L).
    pub k_in: f64,
    /// Substrate inhibition constant in growth kinetics (g/L).
    pub k_is: f64,
    /// Cell-density inhibition constant (g/L).
    pub k_ix: f64,
    /// Nitrogen saturation constant for growth (g/L).
    pub k_n: f64,
    /// Dissolved-oxygen saturation constant (% air).
    pub k_o: f64,
    /// Substrate saturation constant (g/L).
    pub k_s: f64,
    /// Lipid consumption coefficient.
    pub k_sl: f64,
    /// Substrate maintenance coefficient (g/g/h).
    pub m_s: f64,
    /// Fraction of lipid-pathway carbon flow going to lipid.
    pub r_l: f64,
    /// Evaporation rate (L/h).
    pub v_evap: f64,
    /// Citrate yield on substrate (g/g).
    pub y_cs: f64,
    /// Lipid yield on substrate (g/g).
    pub y_ls: f64,
    /// Cell yield on nitrogen (g/g).
    pub y_xn: f64,
    /// Cell yield on substrate (g/g).
    pub y_xs: f64,
    /// Maximum lipid-pathway carbon flow (1/h).
    pub beta_lc_max: f64,
    /// Maximum specific growth rate (1/h).
    pub mu_max: f64,
    /// Substrate concentration of the feed (g/L).
    pub s_f: f64,
}

impl Default for KineticParams {
    fn default() -> Self {
        KineticParams {
            alpha_l: 0.1273,
            c_max: 130.90,
            k_in: 0.1229,
            k_is: 612.18,
            k_ix: 59.974,
            k_n: 0.0200,
            k_o: 0.3309,
            k_s: 0.0430,
            k_sl: 0.0217,
            m_s: 0.0225,
            r_l: 0.4792,
            v_evap: 0.0026,
            y_cs: 0.6826,
            y_ls: 0.3574,
            y_xn: 10.0,
            y_xs: 0.2386,
            beta_lc_max: 0.1426,
            mu_max: 0.3845,
            s_f: 917.00,
        }
    }
}

impl KineticParams {
    pub fn all_positive(&self) -> bool {
        [
            self.alpha_l,
            self.c_max,
            self.k_in,
            self.k_is,
            self.k_ix,
            self.k_n,
            self.k_o,
            self.k_s,
            self.k_sl,
            self.m_s,
            self.r_l,
            self.v_evap,
            self.y_cs,
            self.y_ls,
            self.y_xn,
            self.y_xs,
            self.beta_lc_max,
            self.mu_max,
            self.s_f,
        ]
        .iter()
        .all(|&x| x > 0.0 && x.is_finite())
    }
}

/// Noise specification: divisor `kappa` plus per-epoch mean profiles whose
/// values over `kappa` set the noise scale per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Noise divisor; `f64::INFINITY` means deterministic.
    pub kappa: f64,
    /// Epoch spacing of the profiles, hours.
    pub profile_dt: f64,
    /// One row per epoch, one column per state coordinate.
    pub profiles: Vec<Vec<f64>>,
}

impl NoiseSpec {
    pub fn deterministic() -> Self {
        NoiseSpec {
            kappa: f64::INFINITY,
            profile_dt: 4.0,
            profiles: Vec::new(),
        }
    }

    pub fn new(kappa: f64, profile_dt: f64, profiles: Vec<Vec<f64>>) -> Self {
        assert!(kappa > 0.0, "kappa must be positive (or infinite)");
        NoiseSpec {
            kappa,
            profile_dt,
            profiles,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.kappa.is_infinite() || self.profiles.is_empty()
    }

    /// Total batch time spanned by the profiles, in hours.
    fn total_time(&self) -> f64 {
        self.profile_dt * self.profiles.len().max(1) as f64
    }

    /// `sigma(s_t)` for coordinate `k` at absolute time `t`: the profile
    /// value over kappa.
    pub fn sigma(&self, time_h: f64, k: usize) -> f64 {
        if self.is_deterministic() {
            return 0.0;
        }
        let idx = ((time_h / self.profile_dt).floor() as usize).min(self.profiles.len() - 1);
        self.profiles[idx][k].abs() / self.kappa
    }

    /// Diffusion amplitude per sqrt-hour: the Brownian clock is normalized to
    /// the batch so that `sigma` is the cumulative scale over a full run.
    fn hourly_diffusion(&self, time_h: f64, k: usize) -> f64 {
        self.sigma(time_h, k) / self.total_time().sqrt()
    }
}

/// Integrator settings.
///
/// The substrate dynamics develop a fast boundary layer once the substrate
/// approaches its small saturation constant, so the explicit scheme needs a
/// sub-step below that layer's timescale; 0.0025 h sits inside the stable
/// regime and passes the halving convergence check with two orders of
/// magnitude to spare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub substep_h: f64,
    /// Bioreactor capacity; a run terminates early once `V` reaches it.
    pub capacity_l: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            substep_h: 0.0025,
            capacity_l: 3.0,
        }
    }
}

/// Drift of the six state variables at the given state and feed rate.
pub fn derivatives(state: &KineticState, feed_rate: f64, p: &KineticParams) -> [f64; 6] {
    let o_factor = OXYGEN_SETPOINT / (p.k_o + OXYGEN_SETPOINT);
    let v = state.v.max(VOLUME_EPS);
    let s_monod = state.s / (p.k_s + state.s) / (1.0 + state.s / p.k_is);
    let density_inhibition = 1.0 / (1.0 + state.x_f / p.k_ix);

    let mu = p.mu_max * s_monod * (state.n / (p.k_n + state.n)) * o_factor * density_inhibition;
    let beta_lc = (1.0 / (1.0 + state.n / p.k_in))
        * s_monod
        * o_factor
        * density_inhibition
        * (1.0 - state.c / p.c_max)
        * p.beta_lc_max;
    let beta_c = 2.0 * (1.0 - p.r_l) * beta_lc;
    let lipid_fraction = if state.l + state.x_f > 0.0 {
        state.l / (state.l + state.x_f)
    } else {
        0.0
    };
    let beta_l = p.r_l * beta_lc - p.k_sl * lipid_fraction * o_factor;
    let q_l = p.alpha_l * mu + beta_l;
    let q_s = mu / p.y_xs + o_factor * (state.s / (p.k_s + state.s)) * p.m_s + beta_c / p.y_cs
        + beta_l / p.y_ls;

    let f_b = v / 1000.0 * (7.14 / p.y_xn * mu * state.x_f + 1.59 * beta_c * state.x_f);
    let dilution = (f_b + feed_rate - p.v_evap) / v;

    [
        mu * state.x_f - dilution * state.x_f,
        beta_c * state.x_f - dilution * state.c,
        q_l * state.x_f - dilution * state.l,
        -q_s * state.x_f + feed_rate / v * p.s_f - dilution * state.s,
        -mu * state.x_f / p.y_xn - dilution * state.n,
        f_b + feed_rate - p.v_evap,
    ]
}

/// Base-feed rate at the given state (L/h), exposed for volume accounting.
pub fn base_feed_rate(state: &KineticState, p: &KineticParams) -> f64 {
    let o_factor = OXYGEN_SETPOINT / (p.k_o + OXYGEN_SETPOINT);
    let v = state.v.max(VOLUME_EPS);
    let s_monod = state.s / (p.k_s + state.s) / (1.0 + state.s / p.k_is);
    let density_inhibition = 1.0 / (1.0 + state.x_f / p.k_ix);
    let mu = p.mu_max * s_monod * (state.n / (p.k_n + state.n)) * o_factor * density_inhibition;
    let beta_lc = (1.0 / (1.0 + state.n / p.k_in))
        * s_monod
        * o_factor
        * density_inhibition
        * (1.0 - state.c / p.c_max)
        * p.beta_lc_max;
    let beta_c = 2.0 * (1.0 - p.r_l) * beta_lc;
    v / 1000.0 * (7.14 / p.y_xn * mu * state.x_f + 1.59 * beta_c * state.x_f)
}

/// Advance the fermentation by one observation interval using sub-stepped
/// Euler-Maruyama. With `kappa = inf` the map is a pure deterministic
/// function of its inputs.
pub fn step_fermentation(
    state: &KineticState,
    feed_rate: f64,
    dt_obs: f64,
    params: &KineticParams,
    noise: &NoiseSpec,
    settings: &SimSettings,
    stream: &mut Stream,
) -> Result<KineticState, KineticsError> {
    assert!(feed_rate >= 0.0, "feed rate must be nonnegative");
    assert!(dt_obs > 0.0, "observation interval must be positive");
    let n_sub = (dt_obs / settings.substep_h).round().max(1.0) as usize;
    let dt = dt_obs / n_sub as f64;
    let sqrt_dt = dt.sqrt();
    let mut cur = *state;
    for _ in 0..n_sub {
        let d = derivatives(&cur, feed_rate, params);
        let mut vals = cur.as_array();
        let deterministic = noise.is_deterministic();
        for k in 0..6 {
            vals[k] += d[k] * dt;
            if !deterministic {
                let amp = noise.hourly_diffusion(cur.t, k);
                if amp > 0.0 {
                    vals[k] += amp * sqrt_dt * rng::standard_normal(stream);
                }
            }
            if !vals[k].is_finite() {
                return Err(KineticsError::IntegrationFailure {
                    variable: STATE_NAMES[k],
                    time_h: cur.t,
                });
            }
            if vals[k] < 0.0 {
                vals[k] = 0.0;
            }
        }
        if vals[1] > params.c_max {
            vals[1] = params.c_max;
        }
        cur.set_from_array(vals);
        cur.t += dt;
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// Downstream purification
// ---------------------------------------------------------------------------

/// Log-domain purification state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurificationState {
    pub log_p: f64,
    pub log_i: f64,
}

/// Ammonium-sulphate precipitation stages: P1 precipitates impurity (the
/// soluble fraction is kept), P2 precipitates the product (the precipitate is
/// kept).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrecipitationStage {
    P1,
    P2,
}

/// Fractional solubility constants `(a, b)` for the product.
pub const SOLUBILITY_PRODUCT: (f64, f64) = (56.27, 42.00);
/// Fractional solubility constants `(a, b)` for the impurity.
pub const SOLUBILITY_IMPURITY: (f64, f64) = (53.72, 5.23);
/// Cell-debris carryover through centrifugation.
pub const CENTRIFUGE_CARRYOVER: f64 = 0.01;

/// Fractional solubility `F(zeta) = 1 / (1 + (zeta/a)^b)`.
pub fn fractional_solubility(zeta: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + (zeta / a).powf(b))
}

/// `ln F(zeta)`, stable where `F` rounds to 1.
pub fn log_fractional_solubility(zeta: f64, a: f64, b: f64) -> f64 {
    -(zeta / a).powf(b).ln_1p()
}

/// `ln (1 - F(zeta))`, stable where `1 - F` underflows: with
/// `u = (zeta/a)^b`, `1 - F = u / (1 + u)`.
pub fn log_one_minus_fractional_solubility(zeta: f64, a: f64, b: f64) -> f64 {
    b * (zeta / a).ln() - (zeta / a).powf(b).ln_1p()
}

/// Disc-stack centrifugation: aggregate the fermentation output into
/// `(log P, log I)` with `P = C` and `I = carryover * X_f + S + N`.
pub fn centrifuge(state: &KineticState) -> Result<PurificationState, KineticsError> {
    let p = state.c;
    let i = CENTRIFUGE_CARRYOVER * state.x_f + state.s + state.n;
    if p <= 0.0 {
        return Err(KineticsError::DegenerateBatch(format!(
            "no product at harvest (C = {p})"
        )));
    }
    if i <= 0.0 {
        return Err(KineticsError::DegenerateBatch(format!(
            "no measurable impurity (I = {i})"
        )));
    }
    Ok(PurificationState {
        log_p: p.ln(),
        log_i: i.ln(),
    })
}

/// One precipitation stage in log coordinates. The residual standard
/// deviation comes from the noise spec row for the produced epoch
/// (rows: 0 after centrifugation, 1 after P1, 2 after P2).
pub fn step_purification(
    state: &PurificationState,
    log_saturation: f64,
    stage: PrecipitationStage,
    noise: &NoiseSpec,
    stream: &mut Stream,
) -> Result<PurificationState, KineticsError> {
    let zeta = log_saturation.exp();
    if !(zeta > 0.0 && zeta <= 100.0) {
        return Err(KineticsError::SaturationOutOfRange(zeta));
    }
    let (gain_p, gain_i, row) = match stage {
        PrecipitationStage::P1 => (
            log_fractional_solubility(zeta, SOLUBILITY_PRODUCT.0, SOLUBILITY_PRODUCT.1),
            log_fractional_solubility(zeta, SOLUBILITY_IMPURITY.0, SOLUBILITY_IMPURITY.1),
            1usize,
        ),
        PrecipitationStage::P2 => (
            log_one_minus_fractional_solubility(zeta, SOLUBILITY_PRODUCT.0, SOLUBILITY_PRODUCT.1),
            log_one_minus_fractional_solubility(
                zeta,
                SOLUBILITY_IMPURITY.0,
                SOLUBILITY_IMPURITY.1,
            ),
            2usize,
        ),
    };
    let (mut log_p, mut log_i) = (state.log_p + gain_p, state.log_i + gain_i);
    if !noise.is_deterministic() && row < noise.profiles.len() {
        let sd_p = noise.profiles[row][0].abs() / noise.kappa;
        let sd_i = noise.profiles[row][1].abs() / noise.kappa;
        log_p += rng::normal(stream, 0.0, sd_p);
        log_i += rng::normal(stream, 0.0, sd_i);
    }
    if !log_p.is_finite() || !log_i.is_finite() {
        return Err(KineticsError::DegenerateBatch(
            "non-finite purification state".into(),
        ));
    }
    Ok(PurificationState { log_p, log_i })
}

// ---------------------------------------------------------------------------
// Reference profiles and dataset generation
// ---------------------------------------------------------------------------

/// Built-in baseline feed schedule standing in for historical practice:
/// no feed while the inoculum grows on the initial substrate charge, a ramp
/// to peak demand through the exponential growth phase, a sharp cutback as
/// nitrogen runs out, then a taper that lets the culture finish on its
/// reserves. One rate per observation epoch (L/h, held over the following
/// interval).
pub fn reference_feed_schedule(n_epochs: usize, dt_obs: f64) -> Vec<f64> {
    let peak = 0.014;
    (0..n_epochs)
        .map(|i| {
            let t = i as f64 * dt_obs;
            let shape = if t < 6.0 {
                0.0
            } else if t < 20.0 {
                (t - 6.0) / 14.0
            } else if t < 28.0 {
                1.0 - 0.70 * (t - 20.0) / 8.0
            } else if t < 80.0 {
                0.30 * (-(t - 28.0) / 45.0_f64).exp()
            } else {
                0.0
            };
            peak * shape
        })
        .collect()
}

/// Deterministic mean-state profiles under a feed schedule, used to bootstrap
/// the noise spec when no historical data exists. Returns one row of
/// `(X_f, C, L, S, N, V)` per observation epoch.
pub fn bootstrap_state_profiles(
    schedule: &[f64],
    params: &KineticParams,
    settings: &SimSettings,
    dt_obs: f64,
) -> Result<Vec<Vec<f64>>, KineticsError> {
    let noise = NoiseSpec::deterministic();
    let mut stream = rng::seeded(0); // unused in the deterministic limit
    let mut state = KineticState::nominal_start();
    let mut rows = vec![state.as_array().to_vec()];
    for (i, &feed) in schedule.iter().enumerate() {
        if i + 1 == schedule.len() {
            break; // final epoch has no following interval
        }
        state = step_fermentation(&state, feed, dt_obs, params, &noise, settings, &mut stream)?;
        rows.push(state.as_array().to_vec());
    }
    Ok(rows)
}

/// How actions are chosen while generating a dataset.
pub enum PolicyMode<'a> {
    /// A fixed feed per epoch.
    FixedSchedule(&'a [f64]),
    /// Mix of the mean historical profile (with noise) and uniform
    /// exploration.
    EpsilonGreedy {
        mean_profile: &'a [f64],
        max_profile: &'a [f64],
    },
    /// Linear feedback on the recorded quality attributes.
    Anchored(&'a crate::model::AnchoredPolicy),
}

impl PolicyMode<'_> {
    fn name(&self) -> &'static str {
        match self {
            PolicyMode::FixedSchedule(_) => "fixed_schedule",
            PolicyMode::EpsilonGreedy { .. } => "epsilon_greedy",
            PolicyMode::Anchored(_) => "policy",
        }
    }
}

/// Probability of following the historical mean profile in epsilon-greedy
/// data generation; the complement explores uniformly.
pub const EPSILON_GREEDY_EXPLOIT: f64 = 0.7;

/// One simulated replication: states at every observation epoch plus the
/// feed applied over each interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimRun {
    pub replication_id: usize,
    pub states: Vec<KineticState>,
    pub feeds: Vec<f64>,
    pub terminated_early: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub seed: u64,
    pub kappa: f64,
    pub policy_mode: String,
    pub horizon_steps: usize,
    pub uniform_branch_draws: usize,
    pub greedy_branch_draws: usize,
}

/// R replications with provenance metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimDataset {
    pub runs: Vec<SimRun>,
    pub provenance: DatasetProvenance,
}

/// Relative jitter of the initial state, tied to the noise level so the
/// deterministic limit stays exactly reproducible run to run.
fn initial_jitter_sd(kappa: f64) -> f64 {
    if kappa.is_infinite() {
        0.0
    } else {
        1.0 / (5.0 * kappa)
    }
}

/// Simulate `r_count` replications under the given action rule.
///
/// Each replication owns an independent stream derived from the seed, so the
/// dataset is reproducible and replications could be generated concurrently.
pub fn generate_dataset(
    r_count: usize,
    mode: PolicyMode<'_>,
    horizon_steps: usize,
    params: &KineticParams,
    noise: &NoiseSpec,
    settings: &SimSettings,
    seed: u64,
) -> Result<SimDataset, KineticsError> {
    assert!(r_count >= 1, "need at least one replication");
    assert!(horizon_steps >= 2, "need at least two observation epochs");
    if let PolicyMode::EpsilonGreedy {
        mean_profile,
        max_profile,
    } = &mode
    {
        if mean_profile.len() < horizon_steps - 1 || max_profile.len() < horizon_steps - 1 {
            return Err(KineticsError::Config(
                "epsilon-greedy mode needs mean and max feed profiles covering the horizon".into(),
            ));
        }
    }
    let dt_obs = noise.profile_dt;
    let mut uniform_draws = 0usize;
    let mut greedy_draws = 0usize;
    let mut runs = Vec::with_capacity(r_count);
    for rep in 0..r_count {
        let mut stream = rng::substream(seed, rep as u64);
        let mut state = KineticState::nominal_start();
        let jitter = initial_jitter_sd(noise.kappa);
        if jitter > 0.0 {
            state.x_f *= (jitter * rng::standard_normal(&mut stream)).exp();
            state.s *= (jitter * rng::standard_normal(&mut stream)).exp();
            state.n *= (jitter * rng::standard_normal(&mut stream)).exp();
            state.v *= (jitter * rng::standard_normal(&mut stream)).exp();
        }
        let mut states = Vec::with_capacity(horizon_steps);
        let mut feeds = Vec::with_capacity(horizon_steps - 1);
        let mut terminated = false;
        states.push(state);
        for t in 0..horizon_steps - 1 {
            if terminated {
                let mut frozen = state;
                frozen.t = (t + 1) as f64 * dt_obs;
                states.push(frozen);
                feeds.push(0.0);
                continue;
            }
            let feed = match &mode {
                PolicyMode::FixedSchedule(sched) => sched.get(t).copied().unwrap_or(0.0),
                PolicyMode::EpsilonGreedy {
                    mean_profile,
                    max_profile,
                } => {
                    let max_overall = max_profile
                        .iter()
                        .take(horizon_steps - 1)
                        .cloned()
                        .fold(0.0f64, f64::max);
                    if rng::uniform(&mut stream, 0.0, 1.0) < EPSILON_GREEDY_EXPLOIT {
                        greedy_draws += 1;
                        rng::normal(&mut stream, mean_profile[t], max_profile[t] / 10.0)
                    } else {
                        uniform_draws += 1;
                        rng::uniform(&mut stream, 0.0, max_overall)
                    }
                }
                PolicyMode::Anchored(policy) => policy.feed_rate(t, &state.cqa_vector()),
            }
            .max(0.0);
            state = step_fermentation(&state, feed, dt_obs, params, noise, settings, &mut stream)?;
            feeds.push(feed);
            states.push(state);
            if state.v >= settings.capacity_l {
                terminated = true;
            }
        }
        runs.push(SimRun {
            replication_id: rep,
            states,
            feeds,
            terminated_early: terminated,
        });
    }
    Ok(SimDataset {
        runs,
        provenance: DatasetProvenance {
            seed,
            kappa: noise.kappa,
            policy_mode: mode.name().to_string(),
            horizon_steps,
            uniform_branch_draws: uniform_draws,
            greedy_branch_draws: greedy_draws,
        },
    })
}

/// Per-epoch mean and max feed across replications: the inferred reference
/// profile `(a_t^h, a_t^max)`.
pub fn infer_reference_policy(data: &SimDataset) -> (Vec<f64>, Vec<f64>) {
    assert!(!data.runs.is_empty(), "dataset must be nonempty");
    let steps = data.runs[0].feeds.len();
    let mut mean = vec![0.0; steps];
    let mut max = vec![f64::NEG_INFINITY; steps];
    for run in &data.runs {
        for (t, &f) in run.feeds.iter().enumerate() {
            mean[t] += f;
            if f > max[t] {
                max[t] = f;
            }
        }
    }
    for v in &mut mean {
        *v /= data.runs.len() as f64;
    }
    (mean, max)
}

/// Five-variable vector field over the recorded attributes with lipid frozen
/// at a reference value, for Taylor linearization of the dynamics.
pub fn reduced_field(
    params: KineticParams,
    lipid_frozen: f64,
) -> impl Fn(&Array1<f64>, &Array1<f64>) -> Array1<f64> {
    move |s5: &Array1<f64>, a: &Array1<f64>| {
        let state = KineticState {
            x_f: s5[0],
            c: s5[1],
            l: lipid_frozen,
            s: s5[2],
            n: s5[3],
            v: s5[4],
            t: 0.0,
        };
        let d = derivatives(&state, a[0].max(0.0), &params);
        Array1::from(vec![d[0], d[1], d[3], d[4], d[5]])
    }
}

/// Anchor `(state, action)` pairs for linearization from a deterministic run
/// under the reference schedule, plus the frozen lipid value at each epoch.
pub fn anchor_trajectory(
    schedule: &[f64],
    params: &KineticParams,
    settings: &SimSettings,
    dt_obs: f64,
    n_epochs: usize,
) -> Result<Vec<(Array1<f64>, Array1<f64>, f64)>, KineticsError> {
    let profiles = bootstrap_state_profiles(schedule, params, settings, dt_obs)?;
    Ok((0..n_epochs)
        .map(|t| {
            let row = &profiles[t.min(profiles.len() - 1)];
            let s5 = Array1::from(vec![row[0], row[1], row[3], row[4], row[5]]);
            let a = Array1::from(vec![*schedule.get(t).unwrap_or(&0.0)]);
            (s5, a, row[2])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn det() -> (KineticParams, NoiseSpec, SimSettings) {
        (
            KineticParams::default(),
            NoiseSpec::deterministic(),
            SimSettings::default(),
        )
    }

    #[test]
    fn table_defaults_are_positive() {
        assert!(KineticParams::default().all_positive());
        let p = KineticParams::default();
        assert_eq!(p.mu_max, 0.3845);
        assert_eq!(p.c_max, 130.90);
    }

    #[test]
    fn zero_nutrients_leave_growth_and_production_off() {
        let (p, noise, settings) = det();
        let state = KineticState {
            x_f: 10.0,
            c: 5.0,
            l: 1.0,
            s: 0.0,
            n: 0.0,
            v: 1.0,
            t: 0.0,
        };
        let d = derivatives(&state, 0.0, &p);
        // mu = 0 and beta_c = 0, so F_B = 0 and the dilution rate is
        // -V_evap/V: cell mass and citrate move only through that term.
        let dilution = -p.v_evap / state.v;
        assert!((d[0] - (-dilution * state.x_f)).abs() < 1e-12);
        assert!((d[1] - (-dilution * state.c)).abs() < 1e-12);
        let mut stream = seeded(0);
        let next =
            step_fermentation(&state, 0.0, 4.0, &p, &noise, &settings, &mut stream).unwrap();
        assert!(next.x_f > state.x_f); // evaporation concentrates
    }

    #[test]
    fn citrate_production_stops_at_the_tolerance_limit() {
        let (p, _, _) = det();
        let state = KineticState {
            x_f: 20.0,
            c: p.c_max,
            l: 2.0,
            s: 10.0,
            n: 0.01,
            v: 1.0,
            t: 0.0,
        };
        let d = derivatives(&state, 0.0, &p);
        // (1 - C/C_max) = 0 so the citrate production term vanishes; only
        // dilution moves C, and with zero feed dilution is negative.
        let f_b = base_feed_rate(&state, &p);
        let dilution = (f_b - p.v_evap) / state.v;
        assert!((d[1] - (-dilution * state.c)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_step_is_bitwise_reproducible() {
        let (p, noise, settings) = det();
        let state = KineticState::nominal_start();
        let mut s1 = seeded(1);
        let mut s2 = seeded(2);
        let a = step_fermentation(&state, 0.01, 4.0, &p, &noise, &settings, &mut s1).unwrap();
        let b = step_fermentation(&state, 0.01, 4.0, &p, &noise, &settings, &mut s2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn volume_accounting_closes() {
        // dV is exactly F_B + F_S - V_evap, so accumulating those rates over
        // the same sub-steps reproduces the volume change to rounding.
        let (p, noise, settings) = det();
        let dt = settings.substep_h;
        let n_sub = (4.0 / dt).round() as usize;
        let schedule = reference_feed_schedule(36, 4.0);
        let mut state = KineticState::nominal_start();
        let mut stream = seeded(0);
        let mut accumulated = 0.0;
        for t in 0..35 {
            let mut sub = state;
            for _ in 0..n_sub {
                let f_b = base_feed_rate(&sub, &p);
                accumulated += (f_b + schedule[t] - p.v_evap) * dt;
                let d = derivatives(&sub, schedule[t], &p);
                let mut vals = sub.as_array();
                for k in 0..6 {
                    vals[k] = (vals[k] + d[k] * dt).max(0.0);
                }
                if vals[1] > p.c_max {
                    vals[1] = p.c_max;
                }
                sub.set_from_array(vals);
                sub.t += dt;
            }
            let next =
                step_fermentation(&state, schedule[t], 4.0, &p, &noise, &settings, &mut stream)
                    .unwrap();
            // the manual sub-integration must agree with the library step
            assert!((next.v - sub.v).abs() < 1e-12);
            state = next;
        }
        let start_v = KineticState::nominal_start().v;
        assert!(
            (state.v - start_v - accumulated).abs() < 1e-9,
            "volume gap {}",
            (state.v - start_v - accumulated).abs()
        );
    }

    #[test]
    fn fixed_schedule_dataset_is_reproducible() {
        let (p, noise, settings) = det();
        let schedule = vec![0.0; 35];
        let a = generate_dataset(
            1,
            PolicyMode::FixedSchedule(&schedule),
            36,
            &p,
            &noise,
            &settings,
            42,
        )
        .unwrap();
        let b = generate_dataset(
            1,
            PolicyMode::FixedSchedule(&schedule),
            36,
            &p,
            &noise,
            &settings,
            42,
        )
        .unwrap();
        assert_eq!(a.runs[0].states, b.runs[0].states);
    }

    #[test]
    fn epsilon_greedy_dataset_schema() {
        let p = KineticParams::default();
        let settings = SimSettings::default();
        let schedule = reference_feed_schedule(36, 4.0);
        let profiles =
            bootstrap_state_profiles(&schedule, &p, &settings, 4.0).unwrap();
        let noise = NoiseSpec::new(10.0, 4.0, profiles);
        let data = generate_dataset(
            8,
            PolicyMode::EpsilonGreedy {
                mean_profile: &schedule,
                max_profile: &schedule,
            },
            36,
            &p,
            &noise,
            &settings,
            7,
        )
        .unwrap();
        assert_eq!(data.runs.len(), 8);
        for run in &data.runs {
            assert_eq!(run.states.len(), 36);
            assert_eq!(run.feeds.len(), 35);
            assert!(run.feeds.iter().all(|&f| f >= 0.0));
            assert!(run
                .states
                .iter()
                .all(|s| s.as_array().iter().all(|x| x.is_finite() && *x >= 0.0)));
        }
    }

    #[test]
    fn epsilon_greedy_branch_frequency() {
        // 10^4 action draws; uniform fraction within 3 binomial sigma of 0.3.
        let (p, _, settings) = det();
        let schedule = reference_feed_schedule(36, 4.0);
        let profiles = bootstrap_state_profiles(&schedule, &p, &settings, 4.0).unwrap();
        let noise = NoiseSpec::new(25.0, 4.0, profiles);
        let reps = 286; // 286 * 35 = 10_010 draws
        let data = generate_dataset(
            reps,
            PolicyMode::EpsilonGreedy {
                mean_profile: &schedule,
                max_profile: &schedule,
            },
            36,
            &p,
            &noise,
            &settings,
            11,
        )
        .unwrap();
        let total =
            data.provenance.uniform_branch_draws + data.provenance.greedy_branch_draws;
        assert_eq!(total, reps * 35);
        let frac = data.provenance.uniform_branch_draws as f64 / total as f64;
        let se = (0.3f64 * 0.7 / total as f64).sqrt();
        assert!(
            (frac - 0.3).abs() < 3.0 * se,
            "uniform branch fraction {frac}"
        );
    }

    #[test]
    fn reference_policy_mean_and_max() {
        let mut data = SimDataset {
            runs: vec![],
            provenance: DatasetProvenance {
                seed: 0,
                kappa: f64::INFINITY,
                policy_mode: "fixed_schedule".into(),
                horizon_steps: 3,
                uniform_branch_draws: 0,
                greedy_branch_draws: 0,
            },
        };
        let s = KineticState::nominal_start();
        data.runs.push(SimRun {
            replication_id: 0,
            states: vec![s; 3],
            feeds: vec![2.0, 2.0],
            terminated_early: false,
        });
        data.runs.push(SimRun {
            replication_id: 1,
            states: vec![s; 3],
            feeds: vec![4.0, 4.0],
            terminated_early: false,
        });
        let (mean, max) = infer_reference_policy(&data);
        assert_eq!(mean, vec![3.0, 3.0]);
        assert_eq!(max, vec![4.0, 4.0]);
        // single trajectory: the schedule is that trajectory's actions
        data.runs.truncate(1);
        let (mean1, max1) = infer_reference_policy(&data);
        assert_eq!(mean1, vec![2.0, 2.0]);
        assert_eq!(max1, vec![2.0, 2.0]);
    }

    #[test]
    fn centrifuge_cases() {
        let mut s = KineticState::nominal_start();
        s.x_f = 100.0;
        s.c = 10.0;
        s.s = 1.0;
        s.n = 1.0;
        let out = centrifuge(&s).unwrap();
        assert!((out.log_p - 10.0f64.ln()).abs() < 1e-12);
        assert!((out.log_i - 3.0f64.ln()).abs() < 1e-12);

        s.x_f = 19.4;
        s.c = std::f64::consts::E;
        s.s = 3.18;
        s.n = 2.38;
        let out = centrifuge(&s).unwrap();
        assert!((out.log_p - 1.0).abs() < 1e-12);
        assert!((out.log_i - 5.754f64.ln()).abs() < 1e-12);

        s.x_f = 0.0;
        s.c = 1.0;
        s.s = 0.0;
        s.n = 0.0;
        assert!(matches!(
            centrifuge(&s),
            Err(KineticsError::DegenerateBatch(_))
        ));
    }

    #[test]
    fn solubility_anchor_points() {
        let f = fractional_solubility(56.27, SOLUBILITY_PRODUCT.0, SOLUBILITY_PRODUCT.1);
        assert!((f - 0.5).abs() < 1e-12);
        let f = fractional_solubility(53.72, SOLUBILITY_IMPURITY.0, SOLUBILITY_IMPURITY.1);
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn p1_at_half_solubility_halves_the_product() {
        let state = PurificationState {
            log_p: 2.0,
            log_i: 1.0,
        };
        let noise = NoiseSpec::deterministic();
        let mut stream = seeded(0);
        let zeta = SOLUBILITY_PRODUCT.0; // F_P = 1/2 exactly
        let next = step_purification(
            &state,
            zeta.ln(),
            PrecipitationStage::P1,
            &noise,
            &mut stream,
        )
        .unwrap();
        assert!((next.log_p - (2.0 - 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn saturation_domain_is_enforced() {
        let state = PurificationState {
            log_p: 0.0,
            log_i: 0.0,
        };
        let noise = NoiseSpec::deterministic();
        let mut stream = seeded(0);
        let err = step_purification(
            &state,
            (101.0f64).ln(),
            PrecipitationStage::P1,
            &noise,
            &mut stream,
        );
        assert!(matches!(err, Err(KineticsError::SaturationOutOfRange(_))));
    }

}
