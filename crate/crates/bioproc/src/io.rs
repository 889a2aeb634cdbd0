//! File formats: dataset CSV, key=value configs, and versioned model /
//! policy / posterior documents.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! CSV and JSON artifact reloads to bit-identical values and identical runs
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::error::IoError;
use crate::kinetics::{DatasetProvenance, KineticParams, KineticState, SimDataset, SimRun};
use crate::model::{AnchoredPolicy, BoxBounds, ModelParams, PolicyParams};
use crate::optim::OptimizationTrace;

pub const MODEL_SCHEMA: &str = "bioproc/model/v1";
pub const POLICY_SCHEMA: &str = "bioproc/policy/v1";
pub const POSTERIOR_MANIFEST_SCHEMA: &str = "bioproc/posterior-manifest/v1";

pub const DATASET_HEADER: &str =
    "replication_id,step_index,time_h,X_f,C,L,S,N,V,feed_rate";

/// Format a float with the shortest representation that parses back exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

// ---------------------------------------------------------------------------
// Dataset CSV
// ---------------------------------------------------------------------------

/// One row per `(replication, epoch)`: the six simulator variables plus the
/// feed applied over the following interval (zero on the final row).
pub fn write_dataset_csv(path: &Path, data: &SimDataset) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(DATASET_HEADER);
    out.push('\n');
    for run in &data.runs {
        for (idx, state) in run.states.iter().enumerate() {
            let feed = run.feeds.get(idx).copied().unwrap_or(0.0);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                run.replication_id,
                idx,
                fmt_f64(state.t),
                fmt_f64(state.x_f),
                fmt_f64(state.c),
                fmt_f64(state.l),
                fmt_f64(state.s),
                fmt_f64(state.n),
                fmt_f64(state.v),
                fmt_f64(feed),
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<SimDataset, IoError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == DATASET_HEADER => {}
        _ => {
            return Err(IoError::Schema(format!(
                "{} is missing the dataset header",
                path.display()
            )))
        }
    }
    let mut runs: Vec<SimRun> = Vec::new();
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(IoError::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                detail: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, IoError> {
            s.parse::<f64>().map_err(|e| IoError::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                detail: e.to_string(),
            })
        };
        let rep: usize = fields[0].parse().map_err(|_| IoError::Parse {
            path: path.display().to_string(),
            line: line_no + 1,
            detail: "bad replication id".into(),
        })?;
        let state = KineticState {
            t: parse(fields[2])?,
            x_f: parse(fields[3])?,
            c: parse(fields[4])?,
            l: parse(fields[5])?,
            s: parse(fields[6])?,
            n: parse(fields[7])?,
            v: parse(fields[8])?,
        };
        let feed = parse(fields[9])?;
        if runs.last().map(|r| r.replication_id) != Some(rep) {
            runs.push(SimRun {
                replication_id: rep,
                states: Vec::new(),
                feeds: Vec::new(),
                terminated_early: false,
            });
        }
        let run = runs.last_mut().expect("pushed above");
        run.states.push(state);
        run.feeds.push(feed);
    }
    for run in &mut runs {
        run.feeds.pop(); // final row carries no following interval
    }
    Ok(SimDataset {
        runs,
        provenance: DatasetProvenance {
            seed: 0,
            kappa: f64::NAN,
            policy_mode: "loaded".into(),
            horizon_steps: 0,
            uniform_branch_draws: 0,
            greedy_branch_draws: 0,
        },
    })
}

// ---------------------------------------------------------------------------
// Flat key=value configs
// ---------------------------------------------------------------------------

/// Parse `key=value` lines; `#` starts a comment. Keys must be unique.
pub fn parse_kv(path_label: &str, text: &str) -> Result<BTreeMap<String, String>, IoError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| IoError::Parse {
            path: path_label.to_string(),
            line: i + 1,
            detail: "expected key=value".into(),
        })?;
        let key = key.trim().to_string();
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(IoError::Parse {
                path: path_label.to_string(),
                line: i + 1,
                detail: format!("duplicate key {key}"),
            });
        }
    }
    Ok(out)
}

/// Typed accessor over a parsed key=value map that records which keys were
/// consumed, so unknown keys can be rejected.
pub struct KvReader {
    label: String,
    map: BTreeMap<String, String>,
    consumed: std::cell::RefCell<Vec<String>>,
}

impl KvReader {
    pub fn new(label: &str, map: BTreeMap<String, String>) -> Self {
        KvReader {
            label: label.to_string(),
            map,
            consumed: std::cell::RefCell::new(Vec::new()),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path)?;
        let label = path.display().to_string();
        Ok(KvReader::new(&label, parse_kv(&label, &text)?))
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().push(key.to_string());
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some("inf") | Some("infinity") => Ok(f64::INFINITY),
            Some(v) => v.parse().map_err(|e: std::num::ParseFloatError| {
                IoError::Schema(format!("{}: key {key}: {e}", self.label))
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: std::num::ParseIntError| {
                IoError::Schema(format!("{}: key {key}: {e}", self.label))
            }),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: std::num::ParseIntError| {
                IoError::Schema(format!("{}: key {key}: {e}", self.label))
            }),
        }
    }

    pub fn string_or(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    /// Fails if the file held keys nothing asked for.
    pub fn reject_unknown(&self) -> Result<(), IoError> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !consumed.iter().any(|c| c == *k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(IoError::Schema(format!(
                "{}: unknown keys: {}",
                self.label,
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

/// Kinetic parameters from a flat key=value file with the conventional constant
/// names; missing keys keep their defaults, unknown keys are rejected.
pub fn kinetic_params_from_kv(reader: &KvReader) -> Result<KineticParams, IoError> {
    let d = KineticParams::default();
    let p = KineticParams {
        alpha_l: reader.f64_or("alpha_L", d.alpha_l)?,
        c_max: reader.f64_or("C_max", d.c_max)?,
        k_in: reader.f64_or("K_iN", d.k_in)?,
        k_is: reader.f64_or("K_iS", d.k_is)?,
        k_ix: reader.f64_or("K_iX", d.k_ix)?,
        k_n: reader.f64_or("K_N", d.k_n)?,
        k_o: reader.f64_or("K_O", d.k_o)?,
        k_s: reader.f64_or("K_S", d.k_s)?,
        k_sl: reader.f64_or("K_SL", d.k_sl)?,
        m_s: reader.f64_or("m_s", d.m_s)?,
        r_l: reader.f64_or("r_L", d.r_l)?,
        v_evap: reader.f64_or("V_evap", d.v_evap)?,
        y_cs: reader.f64_or("Y_cs", d.y_cs)?,
        y_ls: reader.f64_or("Y_ls", d.y_ls)?,
        y_xn: reader.f64_or("Y_xn", d.y_xn)?,
        y_xs: reader.f64_or("Y_xs", d.y_xs)?,
        beta_lc_max: reader.f64_or("beta_LCmax", d.beta_lc_max)?,
        mu_max: reader.f64_or("mu_max", d.mu_max)?,
        s_f: reader.f64_or("S_F", d.s_f)?,
    };
    if !p.all_positive() {
        return Err(IoError::Schema(
            "kinetic constants must all be strictly positive".into(),
        ));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Versioned documents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub schema: String,
    pub model: ModelParams,
}

pub fn write_model(path: &Path, model: &ModelParams) -> Result<(), IoError> {
    let doc = ModelDocument {
        schema: MODEL_SCHEMA.to_string(),
        model: model.clone(),
    };
    fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelParams, IoError> {
    let doc: ModelDocument = serde_json::from_str(&fs::read_to_string(path)?)?;
    if doc.schema != MODEL_SCHEMA {
        return Err(IoError::Schema(format!(
            "{}: expected schema {MODEL_SCHEMA}, found {}",
            path.display(),
            doc.schema
        )));
    }
    Ok(doc.model)
}

/// A policy file carries the coefficients, the box, and the anchor profiles
/// needed to execute it against observations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub schema: String,
    pub bounds: BoxBounds,
    pub anchored: AnchoredPolicy,
}

impl PolicyDocument {
    pub fn new(policy: &PolicyParams, anchored: AnchoredPolicy) -> Self {
        PolicyDocument {
            schema: POLICY_SCHEMA.to_string(),
            bounds: policy.bounds.clone(),
            anchored,
        }
    }

    pub fn to_policy(&self) -> PolicyParams {
        PolicyParams {
            vartheta: self.anchored.vartheta.clone(),
            bounds: self.bounds.clone(),
        }
    }
}

pub fn write_policy(path: &Path, doc: &PolicyDocument) -> Result<(), IoError> {
    fs::write(path, serde_json::to_string(doc)?)?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<PolicyDocument, IoError> {
    let doc: PolicyDocument = serde_json::from_str(&fs::read_to_string(path)?)?;
    if doc.schema != POLICY_SCHEMA {
        return Err(IoError::Schema(format!(
            "{}: expected schema {POLICY_SCHEMA}, found {}",
            path.display(),
            doc.schema
        )));
    }
    Ok(doc)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorManifest {
    pub schema: String,
    pub seed: u64,
    pub burn_in: usize,
    pub thinning: usize,
    pub draw_count: usize,
    pub invalid_draw_indices: Vec<usize>,
}

/// Posterior draws as one model document per draw plus a manifest, inside
/// `dir`.
pub fn write_posterior(
    dir: &Path,
    draws: &crate::gibbs::PosteriorDraws,
) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    for (i, w) in draws.draws.iter().enumerate() {
        write_model(&dir.join(format!("draw_{i:04}.json")), w)?;
    }
    let manifest = PosteriorManifest {
        schema: POSTERIOR_MANIFEST_SCHEMA.to_string(),
        seed: draws.seed,
        burn_in: draws.burn_in,
        thinning: draws.thinning,
        draw_count: draws.draws.len(),
        invalid_draw_indices: draws.invalid_draw_indices.clone(),
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string(&manifest)?.as_bytes())?;
    Ok(())
}

pub fn read_posterior(dir: &Path) -> Result<(Vec<ModelParams>, PosteriorManifest), IoError> {
    let manifest: PosteriorManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.schema != POSTERIOR_MANIFEST_SCHEMA {
        return Err(IoError::Schema(format!(
            "{}: unexpected posterior manifest schema {}",
            dir.display(),
            manifest.schema
        )));
    }
    let mut draws = Vec::with_capacity(manifest.draw_count);
    for i in 0..manifest.draw_count {
        draws.push(read_model(&dir.join(format!("draw_{i:04}.json")))?);
    }
    Ok((draws, manifest))
}

// ---------------------------------------------------------------------------
// Trace CSV
// ---------------------------------------------------------------------------

pub const TRACE_HEADER: &str = "iteration,J_hat,grad_norm_sq,projected,eta,seconds";

pub fn write_trace_csv(path: &Path, trace: &OptimizationTrace) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for row in &trace.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.iteration,
            fmt_f64(row.j_hat),
            fmt_f64(row.grad_norm_sq),
            row.projection_active as u8,
            fmt_f64(row.eta),
            fmt_f64(row.seconds),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
