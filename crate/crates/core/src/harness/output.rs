//! CSV artifacts and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluate::{CostEstimate, Criterion};
use crate::persist::CSV_MAGIC;

pub const RESULT_HEADER: [&str; 11] = [
    "experiment_id",
    "criterion",
    "h",
    "M",
    "n_u",
    "factor",
    "mean",
    "std_error",
    "n_replicas",
    "horizon",
    "seed",
];

/// One evaluated policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub criterion: Criterion,
    pub h: f64,
    /// Interior bin count.
    pub m_bins: usize,
    pub n_u: usize,
    /// Per-interval discount factor the policy was learned with, if any.
    pub factor: Option<f64>,
    pub mean: f64,
    pub std_error: f64,
    pub n_replicas: usize,
    pub horizon: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn from_estimate(
        experiment_id: &str,
        h: f64,
        m_bins: usize,
        n_u: usize,
        factor: Option<f64>,
        est: &CostEstimate,
        seed: u64,
    ) -> Self {
        Self {
            experiment_id: experiment_id.to_string(),
            criterion: est.criterion,
            h,
            m_bins,
            n_u,
            factor,
            mean: est.mean,
            std_error: est.std_error,
            n_replicas: est.n_replicas,
            horizon: est.horizon,
            seed,
        }
    }

    pub fn estimate(&self) -> CostEstimate {
        CostEstimate {
            mean: self.mean,
            std_error: self.std_error,
            n_replicas: self.n_replicas,
            horizon: self.horizon,
            criterion: self.criterion,
            truncation_bias_bound: None,
        }
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.experiment_id.clone(),
            self.criterion.label().to_string(),
            num(self.h),
            self.m_bins.to_string(),
            self.n_u.to_string(),
            self.factor.map(num).unwrap_or_default(),
            num(self.mean),
            num(self.std_error),
            self.n_replicas.to_string(),
            num(self.horizon),
            self.seed.to_string(),
        ]
    }
}

/// Shortest round-trip float text.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// CSV text: version line naming `kind`, header, rows.
pub fn csv_text(kind: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = format!("{CSV_MAGIC} {kind}\n{}\n", header.join(","));
    for r in rows {
        debug_assert_eq!(r.len(), header.len());
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let body: Vec<Vec<String>> = rows.iter().map(ResultRow::fields).collect();
    csv_text("results", &RESULT_HEADER, &body)
}

/// Parses a results CSV back into rows.
pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.starts_with(CSV_MAGIC) => {}
        _ => return Err(Error::format("results CSV lacks the version line")),
    }
    if lines.next() != Some(RESULT_HEADER.join(",").as_str()) {
        return Err(Error::format("unexpected results CSV header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != RESULT_HEADER.len() {
                return Err(Error::format(format!("results row {}: {} fields", i + 1, f.len())));
            }
            let bad = |what: &str| Error::format(format!("results row {}: bad {what}", i + 1));
            let pf = |s: &str, w: &str| s.parse::<f64>().map_err(|_| bad(w));
            Ok(ResultRow {
                experiment_id: f[0].to_string(),
                criterion: match f[1] {
                    "discounted" => Criterion::Discounted,
                    "average" => Criterion::Average,
                    _ => return Err(bad("criterion")),
                },
                h: pf(f[2], "h")?,
                m_bins: f[3].parse().map_err(|_| bad("M"))?,
                n_u: f[4].parse().map_err(|_| bad("n_u"))?,
                factor: if f[5].is_empty() { None } else { Some(pf(f[5], "factor")?) },
                mean: pf(f[6], "mean")?,
                std_error: pf(f[7], "std_error")?,
                n_replicas: f[8].parse().map_err(|_| bad("n_replicas"))?,
                horizon: pf(f[9], "horizon")?,
                seed: f[10].parse().map_err(|_| bad("seed"))?,
            })
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub ok: bool,
    pub message: Option<String>,
    pub seconds: f64,
}

/// A qualitative expectation checked on the emitted numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Tool version plus a digest of every output file.
    pub artifact_version: String,
    pub experiment_id: String,
    pub config_hash: String,
    /// Echo of every configuration field.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageRecord>,
    pub files: Vec<FileRecord>,
    pub trends: Vec<TrendCheck>,
    /// Where preset constants come from.
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(experiment_id: &str, config: serde_json::Value) -> Self {
        let canonical = serde_json::to_vec(&config).unwrap_or_default();
        Self {
            tool: "qdiff".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifact_version: String::new(),
            experiment_id: experiment_id.to_string(),
            config_hash: sha256_hex(&canonical),
            config,
            seeds: BTreeMap::new(),
            wall_clock_seconds: 0.0,
            stages: Vec::new(),
            files: Vec::new(),
            trends: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.stages.iter().all(|s| s.ok)
    }

    pub fn trends_hold(&self) -> bool {
        self.trends.iter().all(|t| t.passed)
    }

    fn seal(&mut self) {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let mut h = Sha256::new();
        for f in &self.files {
            h.update(f.path.as_bytes());
            h.update(f.sha256.as_bytes());
        }
        let digest: String = h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect();
        self.artifact_version = format!("{}-{digest}", self.version);
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        self.seal();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

/// Writes `bytes` under `dir` and records the file.
pub fn emit(dir: &Path, rel: &str, bytes: &[u8], files: &mut Vec<FileRecord>) -> Result<PathBuf> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    files.push(FileRecord {
        path: rel.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    });
    Ok(path)
}
