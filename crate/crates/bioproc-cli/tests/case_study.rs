//! Case-study behaviors that depend on a fitted posterior: the attribution
//! signs for a low-substrate observation and the emitted waterfall file's
//! efficiency identity.

use bioproc::gibbs::{sample_posterior, TrajectoryData};
use bioproc::kinetics::{generate_dataset, reference_feed_schedule, KineticParams, PolicyMode};
use bioproc::model::PolicyParams;
use bioproc::shapley::expected_shapley;
use bioproc_cli::config::ExperimentConfig;
use bioproc_cli::pipeline::{
    build_noise, canonical_scales, case_study_box, mechanism_prior, to_trajectories, ACTION_DIM,
    STATE_DIM,
};
use ndarray::Array1;

/// A batch with low substrate at 60 h is predicted to finish with less
/// citrate: the substrate input's attribution to the final titer is
/// negative. (Magnitude is simulator-specific and not asserted.)
#[test]
fn low_substrate_observation_gets_negative_citrate_attribution() {
    let cfg = ExperimentConfig {
        replications: 15,
        kappa: 10.0,
        seed: 7,
        ..ExperimentConfig::default()
    };
    let params = KineticParams::default();
    let noise = build_noise(&cfg).unwrap();
    let scales = canonical_scales(&cfg).unwrap();
    let schedule = reference_feed_schedule(36, 4.0);
    let data = generate_dataset(
        15,
        PolicyMode::EpsilonGreedy {
            mean_profile: &schedule,
            max_profile: &schedule,
        },
        36,
        &params,
        &noise,
        &cfg.sim,
        cfg.seed,
    )
    .unwrap();
    let trajs = TrajectoryData::new(to_trajectories(&data, &scales));
    let priors = mechanism_prior(&cfg, &scales).unwrap();
    let post = sample_posterior(&trajs, &priors, 100, 500, 5, 11).unwrap();

    // the fitted network must see the observed 3.18 g/L as a deficit
    let mu_s60: f64 =
        post.draws.iter().map(|d| d.mu_s[15][2]).sum::<f64>() / 100.0 * scales.state[2];
    assert!(
        mu_s60 > 3.18,
        "fitted mean substrate at 60 h is {mu_s60:.2} g/L, not above the observation"
    );

    let policy = PolicyParams::zeroed(STATE_DIM, ACTION_DIM, 36, case_study_box(36));
    let obs_state = scales.scale_state(&Array1::from(vec![19.4, 45.0, 3.18, 2.38, 0.65]));
    let obs_action = Array1::from(vec![0.003 / scales.action[0]]);
    let report = expected_shapley(&post.draws, &policy, &obs_state, &obs_action, 15, 34).unwrap();
    assert_eq!(report.skipped_draws, 0);
    let substrate_to_citrate = report.contributions[2][1] * scales.state[1];
    assert!(
        substrate_to_citrate < 0.0,
        "low substrate contributed {substrate_to_citrate:+.3} g/L to the final titer"
    );
    assert!(report.efficiency_gap() < 1e-10);
}
