//! Ablation grids: each kind trains a row of model variants across the
//! configured seeds and measures what its originating comparison reports —
//! alignment signatures, target quality, or landscape fluctuation.

use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use navlab_core::metrics::SimilarityEntry;
use navlab_core::nn::{AdapterDesign, AdapterSpec, Connection, InitScheme, Placement};
use navlab_core::optim::SamVariant;

use crate::config::ExperimentConfig;
use crate::pool::TrainedPool;
use crate::probes::{decouple_probe, noise_fluctuation};
use crate::report::{median, RunReport};
use crate::train::{run_target_finetune, run_usage, UsageMode};

pub const TARGETS: [&str; 2] = ["target-a", "target-b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Position,
    Structure,
    SamTarget,
    Usage,
    FlucByAdapter,
}

impl AblationKind {
    pub fn token(self) -> &'static str {
        match self {
            AblationKind::Position => "position",
            AblationKind::Structure => "structure",
            AblationKind::SamTarget => "sam-target",
            AblationKind::Usage => "usage",
            AblationKind::FlucByAdapter => "fluc-by-adapter",
        }
    }
}

impl FromStr for AblationKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "position" => AblationKind::Position,
            "structure" => AblationKind::Structure,
            "sam-target" => AblationKind::SamTarget,
            "usage" => AblationKind::Usage,
            "fluc-by-adapter" => AblationKind::FlucByAdapter,
            other => bail!(
                "unknown ablation kind {other:?}; kinds: position, structure, sam-target, \
                 usage, fluc-by-adapter"
            ),
        })
    }
}

fn single_tap(placement: Placement) -> AdapterSpec {
    AdapterSpec {
        design: AdapterDesign::Conventional,
        connection: Connection::Residual,
        placement,
        init: InitScheme::Gaussian,
    }
}

/// Position grid: where one residual channel mixer sits.
fn position_grid() -> Vec<(String, Option<AdapterSpec>)> {
    vec![
        ("baseline".into(), None),
        ("backbone-shallow".into(), Some(single_tap(Placement::BackboneShallow))),
        ("backbone-deep".into(), Some(single_tap(Placement::BackboneDeep))),
        ("between-enc-dec".into(), Some(single_tap(Placement::BetweenEncDec))),
    ]
}

/// Structure grid: mixer design and wiring at the deep tap.
fn structure_grid(lora_rank: usize) -> Vec<(String, Option<AdapterSpec>)> {
    let deep = single_tap(Placement::BackboneDeep);
    vec![
        ("baseline".into(), None),
        ("conventional+residual".into(), Some(deep)),
        (
            "low-rank+residual".into(),
            Some(AdapterSpec { design: AdapterDesign::LowRank { rank: lora_rank }, ..deep }),
        ),
        (
            "conventional+serial".into(),
            Some(AdapterSpec { connection: Connection::Serial, ..deep }),
        ),
    ]
}

/// Trains one variant per seed and records its cross-domain alignment
/// signature at both taps.
fn alignment_rows(
    cfg: &ExperimentConfig,
    pool: &mut TrainedPool,
    report: &mut RunReport,
    grid: &[(String, Option<AdapterSpec>)],
) -> Result<()> {
    for (label, adapter) in grid {
        for &seed in &cfg.seeds {
            let mut variant = cfg.clone();
            variant.adapter = *adapter;
            let (model, curve) = pool.source_model(&variant, seed)?;
            let final_loss = *curve.last().expect("nonempty curve");
            report.phase_losses.insert(format!("{label}/{seed}"), curve);
            let probes = decouple_probe(cfg, seed, &model, &TARGETS)?;
            for (domain, o) in probes {
                report.push_row(
                    label,
                    &domain,
                    seed,
                    &[
                        ("backbone_cka", o.backbone_cka),
                        ("encoder_cka", o.encoder_cka),
                        ("backbone_relative", o.backbone_relative),
                        ("encoder_relative", o.encoder_relative),
                        ("final_source_loss", final_loss),
                    ],
                );
                for (tap, value) in [("backbone", o.backbone_cka), ("encoder", o.encoder_cka)] {
                    report.similarity.push(SimilarityEntry {
                        tap: format!("{label}/{tap}"),
                        metric: "cka".into(),
                        value,
                        domains: ("source".into(), domain.clone()),
                        seed,
                    })?;
                }
            }
        }
    }
    Ok(())
}

fn sam_target_rows(
    cfg: &ExperimentConfig,
    pool: &mut TrainedPool,
    report: &mut RunReport,
) -> Result<()> {
    let variants = [
        SamVariant::Plain,
        SamVariant::FullModel,
        SamVariant::FullNavigators,
        SamVariant::SpectrumNavigators,
    ];
    for sam in variants {
        let label = format!("sam:{}", sam.token());
        for &seed in &cfg.seeds {
            let mut variant = cfg.clone();
            variant.sam = sam;
            variant.adapter = Some(single_tap(Placement::BackboneDeep));
            let (model, curve) = pool.source_model(&variant, seed)?;
            let final_loss = *curve.last().expect("nonempty curve");
            report.phase_losses.insert(format!("{label}/{seed}"), curve);
            for domain in TARGETS {
                let ft = run_target_finetune(cfg, seed, &model, domain)?;
                report.push_row(
                    &label,
                    domain,
                    seed,
                    &[("median_miou", median(&ft.mious)), ("final_source_loss", final_loss)],
                );
            }
        }
    }
    Ok(())
}

fn usage_rows(
    cfg: &ExperimentConfig,
    pool: &mut TrainedPool,
    report: &mut RunReport,
) -> Result<()> {
    ensure!(cfg.adapter.is_some(), "usage ablation requires an adapter in the config");
    let modes = [
        UsageMode::RemoveInTarget,
        UsageMode::ScratchReinit(InitScheme::Kaiming),
        UsageMode::ScratchReinit(InitScheme::Xavier),
        UsageMode::ScratchReinit(InitScheme::Gaussian),
        UsageMode::FinetuneFromSource,
    ];
    for &seed in &cfg.seeds {
        let (model, curve) = pool.source_model(cfg, seed)?;
        report.phase_losses.insert(format!("source/{seed}"), curve);
        for mode in modes {
            let label = mode.label();
            for domain in TARGETS {
                let mious = run_usage(cfg, seed, &model, domain, mode)?;
                let mut values: Vec<(String, f64)> =
                    vec![("median_miou".into(), median(&mious))];
                for (i, m) in mious.iter().enumerate() {
                    values.push((format!("miou.{i:02}"), *m));
                }
                let refs: Vec<(&str, f64)> =
                    values.iter().map(|(k, v)| (k.as_str(), *v)).collect();
                report.push_row(&label, domain, seed, &refs);
            }
        }
    }
    Ok(())
}

fn fluc_rows(
    cfg: &ExperimentConfig,
    pool: &mut TrainedPool,
    report: &mut RunReport,
) -> Result<()> {
    let deep = single_tap(Placement::BackboneDeep);
    let grid: Vec<(String, Option<AdapterSpec>)> = vec![
        ("baseline".into(), None),
        ("pos:backbone-shallow".into(), Some(single_tap(Placement::BackboneShallow))),
        ("pos:backbone-deep".into(), Some(deep)),
        ("pos:between-enc-dec".into(), Some(single_tap(Placement::BetweenEncDec))),
        (
            "struct:low-rank+residual".into(),
            Some(AdapterSpec {
                design: AdapterDesign::LowRank { rank: cfg.lora_rank },
                ..deep
            }),
        ),
        (
            "struct:conventional+serial".into(),
            Some(AdapterSpec { connection: Connection::Serial, ..deep }),
        ),
    ];
    for (label, adapter) in grid {
        for &seed in &cfg.seeds {
            let mut variant = cfg.clone();
            variant.adapter = adapter;
            let (model, curve) = pool.source_model(&variant, seed)?;
            let final_loss = *curve.last().expect("nonempty curve");
            report.phase_losses.insert(format!("{label}/{seed}"), curve);
            let fluc = noise_fluctuation(cfg, seed, &model, "source")?;
            report.push_row(
                &label,
                "source",
                seed,
                &[("fluctuation", fluc), ("final_source_loss", final_loss)],
            );
        }
    }
    Ok(())
}

/// Runs one ablation grid over the configured seeds.
pub fn run_ablation(
    kind: AblationKind,
    cfg: &ExperimentConfig,
    pool: &mut TrainedPool,
) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = RunReport::new(&format!("ablate:{}", kind.token()), cfg);
    match kind {
        AblationKind::Position => alignment_rows(cfg, pool, &mut report, &position_grid())?,
        AblationKind::Structure => {
            alignment_rows(cfg, pool, &mut report, &structure_grid(cfg.lora_rank))?
        }
        AblationKind::SamTarget => sam_target_rows(cfg, pool, &mut report)?,
        AblationKind::Usage => usage_rows(cfg, pool, &mut report)?,
        AblationKind::FlucByAdapter => fluc_rows(cfg, pool, &mut report)?,
    }
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_tokens_roundtrip() {
        for kind in [
            AblationKind::Position,
            AblationKind::Structure,
            AblationKind::SamTarget,
            AblationKind::Usage,
            AblationKind::FlucByAdapter,
        ] {
            assert_eq!(kind.token().parse::<AblationKind>().unwrap(), kind);
        }
        assert!("rho".parse::<AblationKind>().is_err());
    }

    #[test]
    fn grids_cover_the_required_variants() {
        let labels: Vec<String> = position_grid().into_iter().map(|(l, _)| l).collect();
        assert_eq!(
            labels,
            ["baseline", "backbone-shallow", "backbone-deep", "between-enc-dec"]
        );
        let labels: Vec<String> = structure_grid(4).into_iter().map(|(l, _)| l).collect();
        assert_eq!(
            labels,
            ["baseline", "conventional+residual", "low-rank+residual", "conventional+serial"]
        );
    }

    #[test]
    fn usage_ablation_produces_one_row_per_mode_domain_seed() {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds = vec![0];
        cfg.pretrain_steps = 10;
        cfg.pretrain_batch = 8;
        cfg.pretrain_eval = 10;
        cfg.source_epochs = 1;
        cfg.source_episodes_per_epoch = 4;
        cfg.finetune_iters = 2;
        cfg.eval_episodes = 3;
        cfg.adapter = Some(single_tap(Placement::BackboneDeep));
        let mut pool = TrainedPool::in_memory();
        let report = run_ablation(AblationKind::Usage, &cfg, &mut pool).unwrap();
        assert_eq!(report.rows.len(), 5 * TARGETS.len());
        let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
        assert!(labels.contains(&"remove-in-target"));
        assert!(labels.contains(&"scratch-reinit:kaiming"));
        assert!(labels.contains(&"scratch-reinit:xavier"));
        assert!(labels.contains(&"scratch-reinit:gaussian"));
        assert!(labels.contains(&"finetune-from-source"));
    }
}
