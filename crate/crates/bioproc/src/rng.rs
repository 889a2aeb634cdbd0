//! Seeded random streams and the two distributions used throughout.
//!
//! Every stochastic routine in the crate takes `&mut Stream` explicitly, so a
//! run is replayable from its seed alone. Distinct replications get
//! independent streams derived from a base seed.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};

pub type Stream = StdRng;

pub fn seeded(seed: u64) -> Stream {
    StdRng::seed_from_u64(seed)
}

/// Derive an independent stream for a sub-task (replication, chain, ...).
pub fn substream(seed: u64, lane: u64) -> Stream {
    // splitmix-style mix so lanes do not collide with nearby base seeds
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(lane.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    StdRng::seed_from_u64(z ^ (z >> 31))
}

/// N(mean, sd^2) draw; sd = 0 returns the mean exactly.
pub fn normal(rng: &mut Stream, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    let z: f64 = rand_distr::StandardNormal.sample(rng);
    mean + sd * z
}

pub fn standard_normal(rng: &mut Stream) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Inverse-gamma draw with density proportional to x^-(shape+1) exp(-scale/x).
pub fn inv_gamma(rng: &mut Stream, shape: f64, scale: f64) -> f64 {
    assert!(shape > 0.0 && scale > 0.0, "inverse-gamma needs positive parameters");
    // 1/X ~ Inv-Gamma(shape, scale) when X ~ Gamma(shape, rate = scale)
    let g = Gamma::new(shape, 1.0 / scale).expect("valid gamma");
    1.0 / g.sample(rng)
}

pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
