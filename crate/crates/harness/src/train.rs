//! Training phases: episodic source training of encoder, decoder and
//! navigators over a frozen backbone; navigator-only target finetuning with
//! a zero-tolerance audit on everything else; and the target-phase usage
//! modes built on those two.

use anyhow::{bail, ensure, Context, Result};
use navlab_core::nn::{AdapterSpec, BackboneState, InitScheme, Model, ParamRole};
use navlab_core::optim::{Optimizer, SamVariant};
use navlab_core::seeded::subseed;
use navlab_core::synthbench::{domain_by_name, sample_episode};
use navlab_core::Tensor;

use crate::config::ExperimentConfig;

/// Epochs of mean loss above the divergence bar before aborting.
const DIVERGENCE_PATIENCE: usize = 3;
/// Divergence bar as a multiple of the first epoch's mean loss.
const DIVERGENCE_FACTOR: f64 = 10.0;

pub struct SourceRun {
    pub model: Model,
    /// Mean episode loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub struct FinetuneRun {
    pub model: Model,
    pub iter_losses: Vec<f64>,
    /// Per-episode mask quality on the held-out evaluation set.
    pub mious: Vec<f64>,
}

fn optimizer_for(cfg: &ExperimentConfig) -> Optimizer {
    match cfg.sam {
        SamVariant::Plain => Optimizer::adam_only(cfg.source_lr),
        v => Optimizer::sharpness_aware(cfg.source_lr, cfg.rho, v),
    }
}

/// Trains encoder, decoder and navigators on source-domain episodes with
/// the configured optimizer. Aborts when the mean epoch loss exceeds ten
/// times the initial loss for three consecutive epochs.
pub fn run_source_training(
    cfg: &ExperimentConfig,
    seed: u64,
    backbone: BackboneState,
    adapter: Option<AdapterSpec>,
) -> Result<SourceRun> {
    let domain = domain_by_name("source")?;
    let mut model = Model::new(backbone, adapter, seed)?;
    let mut opt = optimizer_for(cfg);
    let all = |_: ParamRole| true;

    let mut epoch_losses = Vec::with_capacity(cfg.source_epochs);
    let mut high_streak = 0usize;
    let mut index = 0u64;
    // pre-update loss of the very first step; the divergence yardstick
    let mut initial = f64::INFINITY;
    for epoch in 0..cfg.source_epochs {
        let mut epoch_sum = 0.0;
        let mut steps = 0usize;
        let mut remaining = cfg.source_episodes_per_epoch;
        while remaining > 0 {
            let batch_n = cfg.source_batch.max(1).min(remaining);
            let mut batch = Vec::with_capacity(batch_n);
            for _ in 0..batch_n {
                let ep_seed = subseed(seed, &format!("source-ep-{index}"));
                index += 1;
                let ep = sample_episode(&domain, cfg.shots, ep_seed)?;
                batch.push(model.prepare(&ep)?);
            }
            remaining -= batch_n;
            let report = opt
                .step_batch(&mut model, &batch, &all)
                .with_context(|| format!("source epoch {epoch}"))?;
            if initial.is_infinite() {
                initial = report.loss;
            }
            epoch_sum += report.loss;
            steps += 1;
        }
        let mean = epoch_sum / steps as f64;
        epoch_losses.push(mean);
        if !mean.is_finite() || mean > DIVERGENCE_FACTOR * initial {
            high_streak += 1;
            if high_streak >= DIVERGENCE_PATIENCE {
                bail!(
                    "source training diverged: epoch {epoch} mean loss {mean:.4} vs initial \
                     {initial:.4} ({high_streak} epochs above {DIVERGENCE_FACTOR}x)"
                );
            }
        } else {
            high_streak = 0;
        }
    }
    model.backbone().verify_frozen()?;
    Ok(SourceRun { model, epoch_losses })
}

/// Per-episode mask quality of `model` on a domain's held-out eval stream.
pub fn eval_mious(
    cfg: &ExperimentConfig,
    model: &Model,
    domain: &str,
    seed: u64,
) -> Result<Vec<f64>> {
    let spec = domain_by_name(domain)?;
    let mut out = Vec::with_capacity(cfg.eval_episodes);
    for i in 0..cfg.eval_episodes {
        let ep_seed = subseed(seed, &format!("{domain}-eval-{i}"));
        let ep = sample_episode(&spec, cfg.shots, ep_seed)?;
        let prepared = model.prepare(&ep)?;
        out.push(model.eval_episode(&prepared)?.miou);
    }
    Ok(out)
}

/// Finetunes ONLY the navigators on target episodes, then audits that every
/// non-navigator parameter is bitwise unchanged and evaluates held-out
/// episodes.
pub fn run_target_finetune(
    cfg: &ExperimentConfig,
    seed: u64,
    source_model: &Model,
    domain: &str,
) -> Result<FinetuneRun> {
    ensure!(
        source_model.adapter.is_some(),
        "finetune requires a model with navigators"
    );
    let spec = domain_by_name(domain)?;
    let lr = cfg.finetune_lr(domain)?;
    let mut model = source_model.clone();
    let frozen_before: Vec<Tensor> = non_navigator_params(&model);

    let mut opt = Optimizer::adam_only(lr);
    let navigators = |r: ParamRole| r == ParamRole::Navigator;
    let mut iter_losses = Vec::with_capacity(cfg.finetune_iters);
    for it in 0..cfg.finetune_iters {
        let ep_seed = subseed(seed, &format!("{domain}-finetune-{it}"));
        let ep = sample_episode(&spec, cfg.shots, ep_seed)?;
        let prepared = model.prepare(&ep)?;
        let report = opt
            .step_batch(&mut model, &[prepared], &navigators)
            .with_context(|| format!("finetune iteration {it}"))?;
        iter_losses.push(report.loss);
    }

    let frozen_after = non_navigator_params(&model);
    for (i, (before, after)) in frozen_before.iter().zip(&frozen_after).enumerate() {
        let drifted = before
            .data()
            .iter()
            .zip(after.data())
            .any(|(a, b)| a.to_bits() != b.to_bits());
        if drifted {
            bail!("finetune touched a non-navigator parameter (frozen slot {i})");
        }
    }
    model.backbone().verify_frozen()?;

    let mious = eval_mious(cfg, &model, domain, seed)?;
    Ok(FinetuneRun { model, iter_losses, mious })
}

fn non_navigator_params(model: &Model) -> Vec<Tensor> {
    model
        .params()
        .into_iter()
        .zip(model.param_roles())
        .filter(|(_, r)| *r != ParamRole::Navigator)
        .map(|(p, _)| p.clone())
        .collect()
}

/// Replaces every navigator tensor with a fresh draw of `scheme` from
/// `seed`'s stream, leaving the rest of the model untouched.
pub fn reinit_navigators(model: &mut Model, scheme: InitScheme, seed: u64) -> Result<()> {
    let Some(spec) = model.adapter else {
        bail!("model has no navigators to re-initialise");
    };
    let donor_spec = AdapterSpec { init: scheme, ..spec };
    let donor = Model::new(model.backbone().clone(), Some(donor_spec), seed)?;
    let roles = model.param_roles();
    let fresh: Vec<Tensor> = donor
        .params()
        .into_iter()
        .zip(donor.param_roles())
        .filter(|(_, r)| *r == ParamRole::Navigator)
        .map(|(p, _)| p.clone())
        .collect();
    let mut it = fresh.into_iter();
    for (p, r) in model.params_mut().into_iter().zip(roles) {
        if r == ParamRole::Navigator {
            *p = it.next().expect("aligned navigator counts");
        }
    }
    Ok(())
}

/// Forces every navigator weight to zero; under residual wiring this is
/// exactly the adapter-free model.
pub fn zero_navigators(model: &mut Model) {
    let roles = model.param_roles();
    for (p, r) in model.params_mut().into_iter().zip(roles) {
        if r == ParamRole::Navigator {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
    }
}

/// Target-phase usage manner for a source-trained, navigator-equipped model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UsageMode {
    /// Drop the navigators for the target domain: zero them, no finetune.
    RemoveInTarget,
    /// Re-initialise the navigators and finetune them from scratch.
    ScratchReinit(InitScheme),
    /// Finetune the navigators starting from their source-trained weights.
    FinetuneFromSource,
}

impl UsageMode {
    pub fn label(self) -> String {
        match self {
            UsageMode::RemoveInTarget => "remove-in-target".into(),
            UsageMode::ScratchReinit(s) => format!("scratch-reinit:{s}"),
            UsageMode::FinetuneFromSource => "finetune-from-source".into(),
        }
    }
}

/// Runs one usage mode on one target domain; returns held-out per-episode
/// mask quality.
pub fn run_usage(
    cfg: &ExperimentConfig,
    seed: u64,
    source_model: &Model,
    domain: &str,
    mode: UsageMode,
) -> Result<Vec<f64>> {
    match mode {
        UsageMode::RemoveInTarget => {
            let mut model = source_model.clone();
            zero_navigators(&mut model);
            eval_mious(cfg, &model, domain, seed)
        }
        UsageMode::ScratchReinit(scheme) => {
            let mut model = source_model.clone();
            let tag = format!("reinit-{domain}-{scheme}");
            reinit_navigators(&mut model, scheme, subseed(seed, &tag))?;
            Ok(run_target_finetune(cfg, seed, &model, domain)?.mious)
        }
        UsageMode::FinetuneFromSource => {
            Ok(run_target_finetune(cfg, seed, source_model, domain)?.mious)
        }
    }
}

/// Outcome spread across navigator re-initialisation trials: each trial
/// re-draws the navigators from a fresh stream, finetunes them on the
/// target domain and reports median held-out quality; the spread is the
/// best-minus-worst gap over trials.
pub fn reinit_spread(
    cfg: &ExperimentConfig,
    seed: u64,
    source_model: &Model,
    domain: &str,
) -> Result<f64> {
    ensure!(cfg.reinit_trials >= 3, "need at least 3 re-init trials");
    let mut outcomes = Vec::with_capacity(cfg.reinit_trials);
    for trial in 0..cfg.reinit_trials {
        let mut model = source_model.clone();
        let tag = format!("reinit-spread-{domain}-{trial}");
        reinit_navigators(&mut model, InitScheme::Gaussian, subseed(seed, &tag))?;
        let run = run_target_finetune(cfg, seed, &model, domain)?;
        outcomes.push(crate::report::median(&run.mious));
    }
    Ok(navlab_core::metrics::outcome_spread(&outcomes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.source_epochs = 2;
        cfg.source_episodes_per_epoch = 6;
        cfg.finetune_iters = 4;
        cfg.eval_episodes = 3;
        cfg.reinit_trials = 3;
        cfg.adapter = Some(AdapterSpec::deep_residual());
        cfg
    }

    fn frozen_backbone(seed: u64) -> BackboneState {
        let mut b = BackboneState::init(seed);
        b.freeze();
        b
    }

    #[test]
    fn source_training_runs_and_records_losses() {
        let cfg = tiny_cfg();
        let run = run_source_training(&cfg, 0, frozen_backbone(0), cfg.adapter).unwrap();
        assert_eq!(run.epoch_losses.len(), 2);
        assert!(run.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn divergent_training_aborts_with_diagnostic() {
        let mut cfg = tiny_cfg();
        cfg.source_lr = 400.0; // drives the loss far above its start for good
        cfg.source_epochs = 8;
        let err = run_source_training(&cfg, 0, frozen_backbone(0), cfg.adapter)
            .err()
            .expect("divergence must abort");
        assert!(err.to_string().contains("diverged"), "{err}");
    }

    #[test]
    fn finetune_touches_only_navigators() {
        let cfg = tiny_cfg();
        let src = run_source_training(&cfg, 1, frozen_backbone(1), cfg.adapter).unwrap();
        let ft = run_target_finetune(&cfg, 1, &src.model, "target-a").unwrap();
        assert_eq!(ft.iter_losses.len(), cfg.finetune_iters);
        assert_eq!(ft.mious.len(), cfg.eval_episodes);
        // navigators did move
        let before: Vec<Tensor> = src
            .model
            .params()
            .into_iter()
            .zip(src.model.param_roles())
            .filter(|(_, r)| *r == ParamRole::Navigator)
            .map(|(p, _)| p.clone())
            .collect();
        let after: Vec<Tensor> = ft
            .model
            .params()
            .into_iter()
            .zip(ft.model.param_roles())
            .filter(|(_, r)| *r == ParamRole::Navigator)
            .map(|(p, _)| p.clone())
            .collect();
        let moved = before
            .iter()
            .zip(&after)
            .any(|(a, b)| a.data() != b.data());
        assert!(moved, "finetune left navigators untouched");
    }

    #[test]
    fn remove_in_target_matches_adapter_free_model() {
        let cfg = tiny_cfg();
        let src = run_source_training(&cfg, 2, frozen_backbone(2), cfg.adapter).unwrap();
        let removed = run_usage(&cfg, 2, &src.model, "target-a", UsageMode::RemoveInTarget).unwrap();
        let mut rebuilt = src.model.clone();
        zero_navigators(&mut rebuilt);
        let from_rebuilt = eval_mious(&cfg, &rebuilt, "target-a", 2).unwrap();
        assert_eq!(removed, from_rebuilt);
    }

    #[test]
    fn reinit_draws_differ_across_seeds_and_schemes() {
        let cfg = tiny_cfg();
        let backbone = frozen_backbone(3);
        let mut m1 = Model::new(backbone.clone(), cfg.adapter, 3).unwrap();
        let mut m2 = m1.clone();
        reinit_navigators(&mut m1, InitScheme::Kaiming, 10).unwrap();
        reinit_navigators(&mut m2, InitScheme::Kaiming, 11).unwrap();
        let nav = |m: &Model| -> Vec<f64> {
            m.params()
                .into_iter()
                .zip(m.param_roles())
                .filter(|(_, r)| *r == ParamRole::Navigator)
                .flat_map(|(p, _)| p.data().to_vec())
                .collect()
        };
        assert_ne!(nav(&m1), nav(&m2));
        let mut m3 = m1.clone();
        reinit_navigators(&mut m3, InitScheme::Zero, 10).unwrap();
        assert!(nav(&m3).iter().all(|&v| v == 0.0));
    }
}
