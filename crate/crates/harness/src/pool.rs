//! Memoization of trained artifacts. Experiments share pretrained backbones
//! and source-trained models per (config, seed); a pool with a cache
//! directory also persists them, so repeated invocations skip training.
//! Cached artifacts are the bitwise products of training, so pooled and
//! fresh runs report identical numbers.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use navlab_core::nn::{pretrain_backbone, AdapterSpec, BackboneState, Model, PretrainConfig};
use navlab_core::Tensor;

use crate::config::ExperimentConfig;
use crate::train::{run_source_training, SourceRun};

pub struct TrainedPool {
    cache_dir: Option<PathBuf>,
    backbones: HashMap<String, (BackboneState, f64)>,
    models: HashMap<String, (Model, Vec<f64>)>,
}

fn pretrain_key(cfg: &ExperimentConfig, seed: u64) -> String {
    format!(
        "s{seed}-t{}-b{}-lr{:e}-e{}",
        cfg.pretrain_steps, cfg.pretrain_batch, cfg.pretrain_lr, cfg.pretrain_eval
    )
}

fn source_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let adapter = match cfg.adapter {
        None => "off".to_string(),
        Some(a) => format!("{}+{}@{}~{}", a.design, a.connection, a.placement, a.init),
    };
    format!(
        "{}-s{seed}-e{}x{}-b{}-lr{:e}-sam.{}-rho{:e}-k{}-{adapter}",
        pretrain_key(cfg, seed),
        cfg.source_epochs,
        cfg.source_episodes_per_epoch,
        cfg.source_batch,
        cfg.source_lr,
        cfg.sam.token(),
        cfg.rho,
        cfg.shots,
    )
}

impl TrainedPool {
    pub fn new(cache_dir: Option<PathBuf>) -> Result<Self> {
        if let Some(dir) = &cache_dir {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating cache dir {}", dir.display()))?;
        }
        Ok(TrainedPool { cache_dir, backbones: HashMap::new(), models: HashMap::new() })
    }

    pub fn in_memory() -> Self {
        TrainedPool { cache_dir: None, backbones: HashMap::new(), models: HashMap::new() }
    }

    /// Pretrained frozen backbone and its held-out pretext accuracy.
    pub fn backbone(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<(BackboneState, f64)> {
        let key = pretrain_key(cfg, seed);
        if let Some((state, acc)) = self.backbones.get(&key) {
            return Ok((state.clone(), *acc));
        }
        let paths = self.cache_dir.as_ref().map(|d| {
            (d.join(format!("backbone-{key}.fdmp")), d.join(format!("backbone-{key}.acc")))
        });
        if let Some((state_path, acc_path)) = &paths {
            if state_path.exists() && acc_path.exists() {
                let state = BackboneState::load(state_path)?;
                let acc: f64 = std::fs::read_to_string(acc_path)?.trim().parse()?;
                self.backbones.insert(key, (state.clone(), acc));
                return Ok((state, acc));
            }
        }
        let pcfg = PretrainConfig {
            steps: cfg.pretrain_steps,
            batch: cfg.pretrain_batch,
            lr: cfg.pretrain_lr,
            eval_samples: cfg.pretrain_eval,
        };
        let (state, report) = pretrain_backbone(&pcfg, seed)?;
        if let Some((state_path, acc_path)) = &paths {
            state.save(state_path)?;
            std::fs::write(acc_path, format!("{:e}\n", report.accuracy))?;
        }
        self.backbones.insert(key, (state.clone(), report.accuracy));
        Ok((state, report.accuracy))
    }

    /// Source-trained model for the config's adapter and optimizer settings,
    /// with its per-epoch loss curve.
    pub fn source_model(&mut self, cfg: &ExperimentConfig, seed: u64) -> Result<(Model, Vec<f64>)> {
        let key = source_key(cfg, seed);
        if let Some((model, losses)) = self.models.get(&key) {
            return Ok((model.clone(), losses.clone()));
        }
        let paths = self.cache_dir.as_ref().map(|d| {
            (d.join(format!("model-{key}.fdmp")), d.join(format!("model-{key}.losses.fdmp")))
        });
        if let Some((model_path, losses_path)) = &paths {
            if model_path.exists() && losses_path.exists() {
                let model = Model::load(model_path)?;
                let losses = navlab_core::tensor::fdmp::load_tensor(losses_path)?;
                let curve = losses.data().to_vec();
                self.models.insert(key, (model.clone(), curve.clone()));
                return Ok((model, curve));
            }
        }
        let (backbone, _) = self.backbone(cfg, seed)?;
        let SourceRun { model, epoch_losses } =
            run_source_training(cfg, seed, backbone, cfg.adapter)?;
        if let Some((model_path, losses_path)) = &paths {
            model.save(model_path)?;
            let t = Tensor::from_vec(&[epoch_losses.len()], epoch_losses.clone())?;
            navlab_core::tensor::fdmp::save_tensor(losses_path, &t)?;
        }
        self.models.insert(key, (model.clone(), epoch_losses.clone()));
        Ok((model, epoch_losses))
    }

    /// Convenience: the config with a different adapter, trained and pooled.
    pub fn source_model_with(
        &mut self,
        cfg: &ExperimentConfig,
        seed: u64,
        adapter: Option<AdapterSpec>,
    ) -> Result<(Model, Vec<f64>)> {
        let mut variant = cfg.clone();
        variant.adapter = adapter;
        self.source_model(&variant, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.pretrain_steps = 10;
        cfg.pretrain_batch = 8;
        cfg.pretrain_eval = 10;
        cfg.source_epochs = 1;
        cfg.source_episodes_per_epoch = 4;
        cfg.adapter = Some(AdapterSpec::deep_residual());
        cfg
    }

    #[test]
    fn disk_cache_reproduces_fresh_training() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();

        let mut fresh = TrainedPool::in_memory();
        let (m1, c1) = fresh.source_model(&cfg, 0).unwrap();

        let mut writer = TrainedPool::new(Some(dir.path().to_path_buf())).unwrap();
        let (m2, c2) = writer.source_model(&cfg, 0).unwrap();
        drop(writer);

        let mut reader = TrainedPool::new(Some(dir.path().to_path_buf())).unwrap();
        let (m3, c3) = reader.source_model(&cfg, 0).unwrap();

        assert_eq!(c1, c2);
        assert_eq!(c2, c3);
        for ((a, b), c) in m1.params().iter().zip(m2.params()).zip(m3.params()) {
            assert_eq!(a.data(), b.data());
            assert_eq!(b.data(), c.data());
        }
        assert_eq!(m3.adapter, cfg.adapter);
    }

    #[test]
    fn distinct_settings_get_distinct_keys() {
        let cfg = tiny_cfg();
        let mut other = cfg.clone();
        other.rho = 0.25;
        assert_ne!(source_key(&cfg, 0), source_key(&other, 0));
        assert_ne!(source_key(&cfg, 0), source_key(&cfg, 1));
        let mut bare = cfg.clone();
        bare.adapter = None;
        assert_ne!(source_key(&cfg, 0), source_key(&bare, 0));
    }
}
