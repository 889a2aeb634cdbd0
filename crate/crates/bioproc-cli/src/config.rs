//! Experiment configuration: a flat key=value file with defaults for every
//! field and rejection of unknown keys.

use std::path::Path;

use bioproc::io::{kinetic_params_from_kv, IoError, KvReader};
use bioproc::kinetics::{KineticParams, SimSettings};
use bioproc::optim::OptimizerConfig;

pub use bioproc::io as ioformats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Fermentation,
    Integrated,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::Fermentation => write!(f, "fermentation"),
            Scenario::Integrated => write!(f, "integrated"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GibbsSettings {
    pub draws: usize,
    pub burn_in: usize,
    pub thinning: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawMode {
    /// Fresh posterior draws every iteration from a live chain.
    Fresh,
    /// One fixed pool reused at every iteration.
    Fixed,
}

#[derive(Debug, Clone)]
pub struct RewardSettings {
    /// Per-unit action cost during fermentation (negative).
    pub action_cost: f64,
    /// Terminal payoff per unit of final titer.
    pub titer_value: f64,
    /// Fixed terminal charge.
    pub fixed_terminal: f64,
    /// Invalid-model penalty (negative).
    pub m_c: f64,
    /// Per-unit action cost during purification (negative, integrated only).
    pub purification_cost: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub replications: usize,
    pub kappa: f64,
    pub seed: u64,
    pub horizon_steps: usize,
    pub gibbs: GibbsSettings,
    pub optimizer: OptimizerConfig,
    pub draw_mode: DrawMode,
    pub reward: RewardSettings,
    pub macro_reps: usize,
    pub sim: SimSettings,
    pub kinetics: KineticParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Fermentation,
            replications: 8,
            kappa: 10.0,
            seed: 0,
            horizon_steps: 36,
            gibbs: GibbsSettings {
                draws: 100,
                burn_in: 500,
                thinning: 5,
            },
            optimizer: OptimizerConfig {
                max_iters: 400,
                draws_per_iter: 50,
                eta0: 0.05,
                decay_p: 0.6,
                seed: 0,
                window_fraction: 0.1,
            },
            draw_mode: DrawMode::Fresh,
            reward: RewardSettings {
                action_cost: -534.52,
                titer_value: 1.29,
                fixed_terminal: -15.0,
                m_c: -1000.0,
                purification_cost: -0.05,
            },
            macro_reps: 30,
            sim: SimSettings::default(),
            kinetics: KineticParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, IoError> {
        let reader = KvReader::from_file(path)?;
        let cfg = Self::from_reader(&reader)?;
        reader.reject_unknown()?;
        Ok(cfg)
    }

    pub fn from_reader(reader: &KvReader) -> Result<Self, IoError> {
        let d = ExperimentConfig::default();
        let scenario = match reader.string_or("scenario", "fermentation").as_str() {
            "fermentation" => Scenario::Fermentation,
            "integrated" => Scenario::Integrated,
            other => {
                return Err(IoError::Schema(format!(
                    "scenario must be fermentation or integrated, got {other}"
                )))
            }
        };
        let draw_mode = match reader.string_or("opt_draw_mode", "fresh").as_str() {
            "fresh" => DrawMode::Fresh,
            "fixed" => DrawMode::Fixed,
            other => {
                return Err(IoError::Schema(format!(
                    "opt_draw_mode must be fresh or fixed, got {other}"
                )))
            }
        };
        let kappa = reader.f64_or("kappa", d.kappa)?;
        if !(kappa > 0.0) {
            return Err(IoError::Schema("kappa must be positive or inf".into()));
        }
        let seed = reader.u64_or("seed", d.seed)?;
        let kinetics = match reader.string_or("kinetics_file", "").as_str() {
            "" => KineticParams::default(),
            path => {
                let sub = KvReader::from_file(Path::new(path))?;
                let params = kinetic_params_from_kv(&sub)?;
                sub.reject_unknown()?;
                params
            }
        };
        let cfg = ExperimentConfig {
            scenario,
            replications: reader.usize_or("r", d.replications)?,
            kappa,
            seed,
            horizon_steps: reader.usize_or("horizon_steps", d.horizon_steps)?,
            gibbs: GibbsSettings {
                draws: reader.usize_or("gibbs_draws", d.gibbs.draws)?,
                burn_in: reader.usize_or("gibbs_burn_in", d.gibbs.burn_in)?,
                thinning: reader.usize_or("gibbs_thinning", d.gibbs.thinning)?,
            },
            optimizer: OptimizerConfig {
                max_iters: reader.usize_or("opt_iters", d.optimizer.max_iters)?,
                draws_per_iter: reader.usize_or("opt_draws", d.optimizer.draws_per_iter)?,
                eta0: reader.f64_or("opt_eta0", d.optimizer.eta0)?,
                decay_p: reader.f64_or("opt_decay", d.optimizer.decay_p)?,
                seed,
                window_fraction: reader.f64_or("opt_window", d.optimizer.window_fraction)?,
            },
            draw_mode,
            reward: RewardSettings {
                action_cost: reader.f64_or("reward_action_cost", d.reward.action_cost)?,
                titer_value: reader.f64_or("reward_titer", d.reward.titer_value)?,
                fixed_terminal: reader.f64_or("reward_fixed", d.reward.fixed_terminal)?,
                m_c: reader.f64_or("reward_mc", d.reward.m_c)?,
                purification_cost: reader
                    .f64_or("reward_purification_cost", d.reward.purification_cost)?,
            },
            macro_reps: reader.usize_or("eval_macro_reps", d.macro_reps)?,
            sim: SimSettings {
                substep_h: reader.f64_or("substep_h", d.sim.substep_h)?,
                capacity_l: reader.f64_or("capacity_l", d.sim.capacity_l)?,
            },
            kinetics,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.replications < 1 {
            return Err(IoError::Schema("r must be at least 1".into()));
        }
        if self.horizon_steps < 2 {
            return Err(IoError::Schema("horizon_steps must be at least 2".into()));
        }
        if self.reward.m_c >= 0.0 {
            return Err(IoError::Schema("reward_mc must be negative".into()));
        }
        if self.macro_reps < 1 {
            return Err(IoError::Schema("eval_macro_reps must be at least 1".into()));
        }
        self.optimizer
            .validate()
            .map_err(|e| IoError::Schema(e.to_string()))?;
        Ok(())
    }
}
