//! Wall-time comparison of the nested gradient sweep against the
//! brute-force recomputation at several horizons.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bioproc::gradient::{brute_force_gradient, nbp_gradient};
use bioproc::io::{fmt_f64, IoError};
use bioproc::model::{BoxBounds, ModelParams, PolicyParams, RewardSpec};
use bioproc::rng::{self, seeded};
use ndarray::{Array1, Array2};

pub const BENCHMARK_HEADER: &str = "H,n,m,method,mean_seconds,stderr_seconds";

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    pub method: &'static str,
    pub mean_seconds: f64,
    pub stderr_seconds: f64,
    /// Median of the timed runs; steadier than the mean under scheduler
    /// noise, used by the scaling checks.
    pub median_seconds: f64,
}

fn bench_instance(
    n: usize,
    m: usize,
    horizon: usize,
    seed: u64,
) -> (ModelParams, PolicyParams, RewardSpec, Array1<f64>) {
    let mut stream = seeded(seed);
    let mut w = ModelParams::zeroed(n, m, horizon);
    let scale = 0.8 / (n as f64).sqrt();
    for t in 0..horizon {
        w.mu_s[t] = Array1::from_iter((0..n).map(|_| rng::uniform(&mut stream, -1.0, 1.0)));
    }
    for t in 0..horizon - 1 {
        w.mu_a[t] = Array1::from_iter((0..m).map(|_| rng::uniform(&mut stream, -1.0, 1.0)));
        w.beta_s[t] = Array2::from_shape_fn((n, n), |_| rng::uniform(&mut stream, -scale, scale));
        w.beta_a[t] = Array2::from_shape_fn((m, n), |_| rng::uniform(&mut stream, -scale, scale));
    }
    let bounds = BoxBounds::symmetric((horizon - 1) * n * m, 2.0);
    let mut policy = PolicyParams::zeroed(n, m, horizon, bounds);
    for t in 0..horizon - 1 {
        policy.vartheta[t] = Array2::from_shape_fn((n, m), |_| rng::uniform(&mut stream, -0.3, 0.3));
    }
    let mut reward = RewardSpec::zeroed(n, m, horizon, -1000.0);
    for t in 0..horizon {
        reward.c[t] = Array1::from_iter((0..n).map(|_| rng::uniform(&mut stream, -1.0, 1.0)));
        if t + 1 < horizon {
            reward.b[t] = Array1::from_iter((0..m).map(|_| rng::uniform(&mut stream, -1.0, 1.0)));
        }
    }
    let s1 = &w.mu_s[0] + &Array1::from_iter((0..n).map(|_| rng::uniform(&mut stream, -0.5, 0.5)));
    (w, policy, reward, s1)
}

fn time_reps<F: FnMut()>(reps: usize, mut f: F) -> (f64, f64, f64) {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f();
        times.push(start.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = times
        .iter()
        .map(|t| (t - mean) * (t - mean))
        .sum::<f64>()
        / (reps.max(2) - 1) as f64;
    let mut sorted = times.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (mean, (var / reps as f64).sqrt(), sorted[reps / 2])
}

/// Benchmark both gradient routes at the given horizons; `reps` timed runs
/// each after one warmup.
pub fn run_benchmark(horizons: &[usize], n: usize, m: usize, reps: usize) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for &h in horizons {
        let (w, policy, reward, s1) = bench_instance(n, m, h, 7);
        // agreement check before timing anything
        let a = nbp_gradient(&w, &policy, &reward, &s1);
        let b = brute_force_gradient(&w, &policy, &reward, &s1);
        let scale = b.iter().fold(1e-30f64, |acc, x| acc.max(x.abs()));
        assert!(
            a.iter()
                .zip(&b)
                .all(|(x, y)| (x - y).abs() <= 1e-10 * scale.max(1.0)),
            "gradient routes disagree at H = {h}"
        );
        let (mean_nbp, se_nbp, med_nbp) = time_reps(reps, || {
            std::hint::black_box(nbp_gradient(&w, &policy, &reward, &s1));
        });
        rows.push(BenchRow {
            horizon: h,
            n,
            m,
            method: "nbp",
            mean_seconds: mean_nbp,
            stderr_seconds: se_nbp,
            median_seconds: med_nbp,
        });
        let (mean_bf, se_bf, med_bf) = time_reps(reps, || {
            std::hint::black_box(brute_force_gradient(&w, &policy, &reward, &s1));
        });
        rows.push(BenchRow {
            horizon: h,
            n,
            m,
            method: "brute_force",
            mean_seconds: mean_bf,
            stderr_seconds: se_bf,
            median_seconds: med_bf,
        });
    }
    rows
}

pub fn write_benchmark_csv(path: &Path, rows: &[BenchRow]) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(BENCHMARK_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.horizon,
            r.n,
            r.m,
            r.method,
            fmt_f64(r.mean_seconds),
            fmt_f64(r.stderr_seconds),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn cmd_benchmark(out_dir: &Path, reps: usize) -> Result<(PathBuf, Vec<BenchRow>), IoError> {
    fs::create_dir_all(out_dir)?;
    let rows = run_benchmark(&[8, 15, 36], 5, 1, reps);
    let path = out_dir.join("benchmark.csv");
    write_benchmark_csv(&path, &rows)?;
    Ok((path, rows))
}
