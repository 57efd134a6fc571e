//! Flat key=value experiment configuration. Every field has a default and
//! every default is overridable from a config file or a CLI flag; a run is
//! fully determined by (config, seed), and the canonical serialization of
//! the config is hashed into every report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use navlab_core::fnv1a64;
use navlab_core::nn::{AdapterDesign, AdapterSpec, Connection, InitScheme, Placement};
use navlab_core::optim::SamVariant;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Seed list for multi-seed experiments.
    pub seeds: Vec<u64>,
    /// Support shots per episode (1 or 5).
    pub shots: usize,

    /// Backbone pretext pretraining schedule.
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_eval: usize,

    /// Source-phase episodic training schedule.
    pub source_epochs: usize,
    pub source_episodes_per_epoch: usize,
    pub source_batch: usize,
    pub source_lr: f64,

    /// Sharpness-aware update variant for source training, and its radius.
    pub sam: SamVariant,
    pub rho: f64,

    /// Adapter attached for source training (absent = plain baseline).
    pub adapter: Option<AdapterSpec>,
    /// Rank used whenever the adapter design is factored.
    pub lora_rank: usize,

    /// Target-phase finetuning schedule; learning rates are per-domain.
    pub finetune_iters: usize,
    pub finetune_lr_target_a: f64,
    pub finetune_lr_target_b: f64,

    /// Held-out evaluation episodes per target domain.
    pub eval_episodes: usize,

    /// Similarity-probe population size per domain.
    pub probe_samples: usize,
    /// Permutations for two-sample distance nulls.
    pub probe_permutations: usize,
    /// Episodes for the gradient-direction probe.
    pub probe_gradient_episodes: usize,

    /// Noise-fluctuation probe: trials, relative noise scale, eval set size.
    pub fluc_trials: usize,
    pub fluc_sigma: f64,
    pub fluc_eval_episodes: usize,

    /// Re-initialization trials for outcome-spread probes.
    pub reinit_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            shots: 1,
            pretrain_steps: 240,
            pretrain_batch: 32,
            pretrain_lr: 3e-3,
            pretrain_eval: 200,
            source_epochs: 30,
            source_episodes_per_epoch: 200,
            source_batch: 1,
            source_lr: 1e-3,
            sam: SamVariant::Plain,
            rho: 0.5,
            adapter: Some(AdapterSpec::full()),
            lora_rank: 4,
            finetune_iters: 50,
            finetune_lr_target_a: 1e-3,
            finetune_lr_target_b: 5e-3,
            eval_episodes: 10,
            probe_samples: 256,
            probe_permutations: 200,
            probe_gradient_episodes: 24,
            fluc_trials: 5,
            fluc_sigma: 0.1,
            fluc_eval_episodes: 16,
            reinit_trials: 3,
        }
    }
}

/// One `key = value` template line per key, with its meaning. Printed by
/// `navlab config` and kept as the authoritative key list.
pub const DOCUMENTED_KEYS: &[(&str, &str)] = &[
    ("seeds", "comma-separated seed list, e.g. 0,1,2,3,4"),
    ("shots", "support shots per episode: 1 or 5"),
    ("pretrain_steps", "backbone pretext training steps"),
    ("pretrain_batch", "backbone pretext batch size"),
    ("pretrain_lr", "backbone pretext learning rate"),
    ("pretrain_eval", "held-out samples for pretext accuracy"),
    ("source_epochs", "episodic source-training epochs"),
    ("source_episodes_per_epoch", "episodes per source epoch"),
    ("source_batch", "episodes per source update"),
    ("source_lr", "source-phase learning rate"),
    ("sam", "perturbation variant: none | full-model | full-adapter | spectrum"),
    ("rho", "perturbation radius"),
    ("adapter", "off, or design,connection,placement,init e.g. conventional,residual,all-taps,gaussian"),
    ("lora_rank", "rank for the low-rank adapter design"),
    ("finetune_iters", "target finetune iterations"),
    ("finetune_lr_target_a", "finetune learning rate on target-a"),
    ("finetune_lr_target_b", "finetune learning rate on target-b"),
    ("eval_episodes", "held-out eval episodes per target domain"),
    ("probe_samples", "similarity-probe population size per domain"),
    ("probe_permutations", "permutations for distance-test nulls"),
    ("probe_gradient_episodes", "episodes for the gradient-direction probe"),
    ("fluc_trials", "noise-fluctuation probe trials"),
    ("fluc_sigma", "noise scale relative to parameter rms"),
    ("fluc_eval_episodes", "eval episodes per fluctuation trial"),
    ("reinit_trials", "re-initialization trials for spread probes"),
];

fn parse_list(v: &str) -> Result<Vec<u64>> {
    v.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| anyhow!("bad seed {s:?}: {e}")))
        .collect()
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| anyhow!("bad value for {key}: {e}"))
}

pub fn parse_adapter(v: &str, lora_rank: usize) -> Result<Option<AdapterSpec>> {
    if v.trim() == "off" {
        return Ok(None);
    }
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        bail!("adapter needs off or design,connection,placement,init, got {v:?}");
    }
    let design = if parts[0] == "low-rank" {
        AdapterDesign::LowRank { rank: lora_rank }
    } else {
        parts[0].parse::<AdapterDesign>().map_err(|e| anyhow!("{e}"))?
    };
    Ok(Some(AdapterSpec {
        design,
        connection: parts[1].parse::<Connection>().map_err(|e| anyhow!("{e}"))?,
        placement: parts[2].parse::<Placement>().map_err(|e| anyhow!("{e}"))?,
        init: parts[3].parse::<InitScheme>().map_err(|e| anyhow!("{e}"))?,
    }))
}

fn adapter_token(a: Option<AdapterSpec>) -> String {
    match a {
        None => "off".into(),
        Some(s) => format!("{},{},{},{}", s.design, s.connection, s.placement, s.init),
    }
}

impl ExperimentConfig {
    /// Applies one key=value override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seeds" => self.seeds = parse_list(value)?,
            "shots" => {
                self.shots = parse_num(key, value)?;
                if self.shots != 1 && self.shots != 5 {
                    bail!("shots must be 1 or 5, got {}", self.shots);
                }
            }
            "pretrain_steps" => self.pretrain_steps = parse_num(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse_num(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, value)?,
            "pretrain_eval" => self.pretrain_eval = parse_num(key, value)?,
            "source_epochs" => self.source_epochs = parse_num(key, value)?,
            "source_episodes_per_epoch" => self.source_episodes_per_epoch = parse_num(key, value)?,
            "source_batch" => self.source_batch = parse_num(key, value)?,
            "source_lr" => self.source_lr = parse_num(key, value)?,
            "sam" => {
                self.sam = SamVariant::parse(value.trim())
                    .ok_or_else(|| anyhow!("unknown sam variant {value:?}"))?;
            }
            "rho" => self.rho = parse_num(key, value)?,
            "adapter" => self.adapter = parse_adapter(value, self.lora_rank)?,
            "lora_rank" => {
                self.lora_rank = parse_num(key, value)?;
                if let Some(spec) = &mut self.adapter {
                    if let AdapterDesign::LowRank { rank } = &mut spec.design {
                        *rank = self.lora_rank;
                    }
                }
            }
            "finetune_iters" => self.finetune_iters = parse_num(key, value)?,
            "finetune_lr_target_a" => self.finetune_lr_target_a = parse_num(key, value)?,
            "finetune_lr_target_b" => self.finetune_lr_target_b = parse_num(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, value)?,
            "probe_samples" => self.probe_samples = parse_num(key, value)?,
            "probe_permutations" => self.probe_permutations = parse_num(key, value)?,
            "probe_gradient_episodes" => self.probe_gradient_episodes = parse_num(key, value)?,
            "fluc_trials" => self.fluc_trials = parse_num(key, value)?,
            "fluc_sigma" => self.fluc_sigma = parse_num(key, value)?,
            "fluc_eval_episodes" => self.fluc_eval_episodes = parse_num(key, value)?,
            "reinit_trials" => self.reinit_trials = parse_num(key, value)?,
            _ => {
                let known: Vec<&str> = DOCUMENTED_KEYS.iter().map(|(k, _)| *k).collect();
                bail!("unknown config key {key:?}; known keys: {}", known.join(", "));
            }
        }
        Ok(())
    }

    /// Loads defaults, then applies the file's overrides. Lines are
    /// `key = value`; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), lineno + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(cfg)
    }

    /// Every field as sorted `key = value` lines; the hashed serialization.
    pub fn canonical(&self) -> BTreeMap<String, String> {
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| m.insert(k.to_string(), v);
        put("seeds", seeds);
        put("shots", self.shots.to_string());
        put("pretrain_steps", self.pretrain_steps.to_string());
        put("pretrain_batch", self.pretrain_batch.to_string());
        put("pretrain_lr", format!("{:e}", self.pretrain_lr));
        put("pretrain_eval", self.pretrain_eval.to_string());
        put("source_epochs", self.source_epochs.to_string());
        put("source_episodes_per_epoch", self.source_episodes_per_epoch.to_string());
        put("source_batch", self.source_batch.to_string());
        put("source_lr", format!("{:e}", self.source_lr));
        put("sam", self.sam.token().to_string());
        put("rho", format!("{:e}", self.rho));
        put("adapter", adapter_token(self.adapter));
        put("lora_rank", self.lora_rank.to_string());
        put("finetune_iters", self.finetune_iters.to_string());
        put("finetune_lr_target_a", format!("{:e}", self.finetune_lr_target_a));
        put("finetune_lr_target_b", format!("{:e}", self.finetune_lr_target_b));
        put("eval_episodes", self.eval_episodes.to_string());
        put("probe_samples", self.probe_samples.to_string());
        put("probe_permutations", self.probe_permutations.to_string());
        put("probe_gradient_episodes", self.probe_gradient_episodes.to_string());
        put("fluc_trials", self.fluc_trials.to_string());
        put("fluc_sigma", format!("{:e}", self.fluc_sigma));
        put("fluc_eval_episodes", self.fluc_eval_episodes.to_string());
        put("reinit_trials", self.reinit_trials.to_string());
        m
    }

    pub fn hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.canonical() {
            let _ = writeln!(text, "{k} = {v}");
        }
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    /// Finetune learning rate preset for a target domain.
    pub fn finetune_lr(&self, domain: &str) -> Result<f64> {
        match domain {
            "target-a" => Ok(self.finetune_lr_target_a),
            "target-b" => Ok(self.finetune_lr_target_b),
            other => bail!("no finetune preset for domain {other:?}"),
        }
    }

    /// Commented template with current values, suitable as a config file.
    pub fn template(&self) -> String {
        let values = self.canonical();
        let mut out = String::new();
        for (key, doc) in DOCUMENTED_KEYS {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{key} = {}\n", values[*key]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        let mut c = ExperimentConfig::default();
        c.set("rho", "0.25").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn template_roundtrips_through_load() {
        let cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, cfg.template()).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected()  {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("episodes", "3").is_err());
        assert!(cfg.set("shots", "2").is_err());
        assert!(cfg.set("sam", "sharpest").is_err());
        assert!(cfg.set("adapter", "conventional,residual").is_err());
    }

    #[test]
    fn adapter_tokens_cover_grid_corners() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("adapter", "off").unwrap();
        assert!(cfg.adapter.is_none());
        cfg.set("adapter", "low-rank,residual,backbone-deep,kaiming").unwrap();
        let spec = cfg.adapter.unwrap();
        assert_eq!(spec.design, AdapterDesign::LowRank { rank: cfg.lora_rank });
        cfg.set("lora_rank", "2").unwrap();
        assert_eq!(
            cfg.adapter.unwrap().design,
            AdapterDesign::LowRank { rank: 2 }
        );
    }
}
