//! Run reports: one serializable record per experiment, with emitters for
//! JSON, CSV and markdown tables. Reports are deterministic functions of
//! (config, seed); wall-clock is the only field excluded from identity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use navlab_core::metrics::SimilarityReport;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// One labelled result row: a variant evaluated on a domain under a seed,
/// with named values. Maps keep key order stable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub domain: String,
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// What produced this report, e.g. "train-source" or "ablate:position".
    pub kind: String,
    pub config_hash: String,
    /// Full canonical configuration, so the report is self-describing.
    pub config: BTreeMap<String, String>,
    /// Every seed that contributed a number.
    pub seeds: Vec<u64>,
    pub shots: usize,
    /// Loss curve per training phase, keyed "label/seed".
    pub phase_losses: BTreeMap<String, Vec<f64>>,
    pub similarity: SimilarityReport,
    pub rows: Vec<ReportRow>,
    /// Total wall-clock seconds; excluded from determinism comparisons.
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn new(kind: &str, cfg: &ExperimentConfig) -> Self {
        RunReport {
            kind: kind.to_string(),
            config_hash: cfg.hash(),
            config: cfg.canonical(),
            seeds: cfg.seeds.clone(),
            shots: cfg.shots,
            phase_losses: BTreeMap::new(),
            similarity: SimilarityReport::default(),
            rows: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn push_row(&mut self, label: &str, domain: &str, seed: u64, values: &[(&str, f64)]) {
        self.rows.push(ReportRow {
            label: label.to_string(),
            domain: domain.to_string(),
            seed,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
    }

    /// Copy with timing zeroed: the comparison form for determinism checks.
    pub fn normalized(&self) -> Self {
        RunReport { wall_clock_s: 0.0, ..self.clone() }
    }

    /// All values recorded under `(label, key)`, ordered by (domain, seed).
    pub fn values(&self, label: &str, key: &str) -> Vec<f64> {
        let mut picked: Vec<(&str, u64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.label == label)
            .filter_map(|r| r.values.get(key).map(|v| (r.domain.as_str(), r.seed, *v)))
            .collect();
        picked.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        picked.into_iter().map(|(_, _, v)| v).collect()
    }

    /// Same, restricted to one domain.
    pub fn values_in(&self, label: &str, domain: &str, key: &str) -> Vec<f64> {
        let mut picked: Vec<(u64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.label == label && r.domain == domain)
            .filter_map(|r| r.values.get(key).map(|v| (r.seed, *v)))
            .collect();
        picked.sort_by_key(|(s, _)| *s);
        picked.into_iter().map(|(_, v)| v).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Long-form CSV: one line per (row, value key).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,domain,seed,key,value\n");
        for r in &self.rows {
            for (k, v) in &r.values {
                let _ = writeln!(out, "{},{},{},{},{}", r.label, r.domain, r.seed, k, v);
            }
        }
        out
    }

    /// Markdown: one table per domain, variants as rows, median over seeds
    /// per value key as columns.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("# {} ({})\n", self.kind, self.config_hash);
        let mut domains: Vec<&str> = self.rows.iter().map(|r| r.domain.as_str()).collect();
        domains.sort_unstable();
        domains.dedup();
        for domain in domains {
            let in_domain: Vec<&ReportRow> =
                self.rows.iter().filter(|r| r.domain == domain).collect();
            let mut labels: Vec<&str> = in_domain.iter().map(|r| r.label.as_str()).collect();
            labels.dedup();
            let mut keys: Vec<&str> = in_domain
                .iter()
                .flat_map(|r| r.values.keys().map(String::as_str))
                .collect();
            keys.sort_unstable();
            keys.dedup();
            let _ = write!(out, "\n## {domain}\n\n| variant |");
            for k in &keys {
                let _ = write!(out, " {k} |");
            }
            let _ = write!(out, "\n|---|");
            for _ in &keys {
                let _ = write!(out, "---|");
            }
            out.push('\n');
            for label in labels {
                let _ = write!(out, "| {label} |");
                for k in &keys {
                    let mut vs: Vec<f64> = in_domain
                        .iter()
                        .filter(|r| r.label == label)
                        .filter_map(|r| r.values.get(*k))
                        .copied()
                        .collect();
                    if vs.is_empty() {
                        let _ = write!(out, " - |");
                    } else {
                        vs.sort_by(f64::total_cmp);
                        let _ = write!(out, " {:.4} |", median_sorted(&vs));
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// Writes `{stem}.json`, `{stem}.csv` and `{stem}.md` under `dir`.
    pub fn emit(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        let md = dir.join(format!("{stem}.md"));
        self.save_json(&json)?;
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&md, self.to_markdown())?;
        Ok(vec![json, csv, md])
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median of an unsorted slice.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}
