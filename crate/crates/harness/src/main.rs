//! Command-line front end: training phases, probes, ablation grids, metric
//! evaluation on feature dumps, benchmark export and report conversion.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use navlab_core::metrics::{cka, mmd_rbf, FeaturePopulation, SimilarityEntry};
use navlab_core::synthbench::{domain_by_name, render_sample};
use navlab_core::tensor::fdmp;

use navlab_harness::ablate::{run_ablation, AblationKind, TARGETS};
use navlab_harness::config::ExperimentConfig;
use navlab_harness::pool::TrainedPool;
use navlab_harness::probes::decouple_probe;
use navlab_harness::report::{median, RunReport};
use navlab_harness::train::{eval_mious, run_target_finetune};

#[derive(Parser)]
#[command(name = "navlab", about = "Adapter decoupling experiments on a synthetic few-shot segmentation benchmark", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Single seed override; without it the config's seed list is used.
    #[arg(long)]
    seed: Option<u64>,
    /// key=value config file applied over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for reports, checkpoints and the artifact cache.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Perturbation radius override.
    #[arg(long)]
    rho: Option<f64>,
    /// Support shots per episode (1 or 5).
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the frozen backbone and report pretext accuracy.
    Pretrain(Common),
    /// Source-domain episodic training of the configured model.
    TrainSource(Common),
    /// Navigator-only finetuning of a source checkpoint on a target domain.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Source-trained model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Target domain: target-a or target-b.
        #[arg(long)]
        domain: String,
    },
    /// Cross-domain alignment of baseline vs adapter-equipped models.
    DecoupleProbe(Common),
    /// Run one ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// position | structure | sam-target | usage | fluc-by-adapter
        #[arg(long)]
        kind: String,
    },
    /// Evaluate a similarity metric on two feature dumps.
    Measure {
        /// Two FDMP files, each an n x d feature matrix.
        #[arg(long = "from-dumps", num_args = 2, value_names = ["A", "B"])]
        dumps: Vec<PathBuf>,
        /// cka | mmd
        #[arg(long)]
        metric: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Benchmark data tooling.
    Synthbench {
        #[command(subcommand)]
        cmd: SynthCmd,
    },
    /// Re-emit a stored JSON report as CSV and markdown.
    Report {
        /// Stored RunReport JSON file.
        #[arg(long)]
        from: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Print a commented config template with every key and its default.
    Config,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Render styled samples to FDMP image/mask pairs with a manifest.
    Export {
        /// source | target-a | target-b (src/tgt-a/tgt-b accepted).
        #[arg(long)]
        domain: String,
        /// Number of samples.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value = "runs/export")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(rho) = common.rho {
        cfg.rho = rho;
    }
    if let Some(shots) = common.shots {
        ensure!(shots == 1 || shots == 5, "shots must be 1 or 5");
        cfg.shots = shots;
    }
    Ok(cfg)
}

fn pool_at(out: &PathBuf) -> Result<TrainedPool> {
    TrainedPool::new(Some(out.join("cache")))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Pretrain(common) => {
            let cfg = resolve(&common)?;
            let mut pool = pool_at(&common.out)?;
            for &seed in &cfg.seeds {
                let (_, accuracy) = pool.backbone(&cfg, seed)?;
                println!("seed {seed}: pretext accuracy {accuracy:.4}");
            }
        }
        Cmd::TrainSource(common) => {
            let cfg = resolve(&common)?;
            let mut pool = pool_at(&common.out)?;
            let start = Instant::now();
            let mut report = RunReport::new("train-source", &cfg);
            for &seed in &cfg.seeds {
                let (model, curve) = pool.source_model(&cfg, seed)?;
                let checkpoint = common.out.join(format!("source-{seed}.fdmp"));
                model.save(&checkpoint)?;
                let final_loss = *curve.last().context("empty loss curve")?;
                report.phase_losses.insert(format!("source/{seed}"), curve);
                let mious = eval_mious(&cfg, &model, "source", seed)?;
                report.push_row(
                    "source",
                    "source",
                    seed,
                    &[("final_loss", final_loss), ("median_miou", median(&mious))],
                );
                println!(
                    "seed {seed}: final loss {final_loss:.4}, source median mIoU {:.4}, saved {}",
                    median(&mious),
                    checkpoint.display()
                );
            }
            report.wall_clock_s = start.elapsed().as_secs_f64();
            for path in report.emit(&common.out, "train-source")? {
                println!("wrote {}", path.display());
            }
        }
        Cmd::Finetune { common, model, domain } => {
            let cfg = resolve(&common)?;
            let source = navlab_core::nn::Model::load(&model)?;
            let start = Instant::now();
            let mut report = RunReport::new("finetune", &cfg);
            for &seed in &cfg.seeds {
                let run = run_target_finetune(&cfg, seed, &source, &domain)?;
                report
                    .phase_losses
                    .insert(format!("finetune-{domain}/{seed}"), run.iter_losses);
                report.push_row(
                    "finetune",
                    &domain,
                    seed,
                    &[("median_miou", median(&run.mious))],
                );
                println!("seed {seed}: {domain} median mIoU {:.4}", median(&run.mious));
            }
            report.wall_clock_s = start.elapsed().as_secs_f64();
            for path in report.emit(&common.out, &format!("finetune-{domain}"))? {
                println!("wrote {}", path.display());
            }
        }
        Cmd::DecoupleProbe(common) => {
            let cfg = resolve(&common)?;
            ensure!(cfg.adapter.is_some(), "decouple probe needs an adapter (adapter = ...)");
            let mut pool = pool_at(&common.out)?;
            let start = Instant::now();
            let mut report = RunReport::new("decouple-probe", &cfg);
            for &seed in &cfg.seeds {
                for (label, adapter) in [("baseline", None), ("adapter", cfg.adapter)] {
                    let (model, _) = pool.source_model_with(&cfg, seed, adapter)?;
                    for (domain, o) in decouple_probe(&cfg, seed, &model, &TARGETS)? {
                        report.push_row(
                            label,
                            &domain,
                            seed,
                            &[
                                ("backbone_cka", o.backbone_cka),
                                ("encoder_cka", o.encoder_cka),
                                ("backbone_relative", o.backbone_relative),
                                ("encoder_relative", o.encoder_relative),
                            ],
                        );
                        for (tap, value) in
                            [("backbone", o.backbone_cka), ("encoder", o.encoder_cka)]
                        {
                            report.similarity.push(SimilarityEntry {
                                tap: format!("{label}/{tap}"),
                                metric: "cka".into(),
                                value,
                                domains: ("source".into(), domain.clone()),
                                seed,
                            })?;
                        }
                        println!(
                            "seed {seed} {label} vs {domain}: backbone {:.4}, encoder {:.4}",
                            o.backbone_cka, o.encoder_cka
                        );
                    }
                }
            }
            report.wall_clock_s = start.elapsed().as_secs_f64();
            for path in report.emit(&common.out, "decouple-probe")? {
                println!("wrote {}", path.display());
            }
        }
        Cmd::Ablate { common, kind } => {
            let cfg = resolve(&common)?;
            let kind: AblationKind = kind.parse()?;
            let mut pool = pool_at(&common.out)?;
            let report = run_ablation(kind, &cfg, &mut pool)?;
            println!("{}", report.to_markdown());
            for path in report.emit(&common.out, &format!("ablate-{}", kind.token()))? {
                println!("wrote {}", path.display());
            }
        }
        Cmd::Measure { dumps, metric, seed } => {
            ensure!(dumps.len() == 2, "need exactly two dumps");
            let load = |p: &PathBuf| -> Result<FeaturePopulation> {
                let t = fdmp::load_tensor(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                Ok(FeaturePopulation::new(t)?)
            };
            let a = load(&dumps[0])?;
            let b = load(&dumps[1])?;
            let value = match metric.as_str() {
                "cka" => cka(&a, &b)?,
                "mmd" => mmd_rbf(&a, &b)?,
                other => bail!("unknown metric {other:?}; use cka or mmd"),
            };
            println!(
                "{}",
                serde_json::json!({ "metric": metric, "value": value, "n": a.n(), "seed": seed })
            );
        }
        Cmd::Synthbench { cmd: SynthCmd::Export { domain, n, out, seed } } => {
            let name = match domain.as_str() {
                "src" => "source",
                "tgt-a" => "target-a",
                "tgt-b" => "target-b",
                other => other,
            };
            let spec = domain_by_name(name)?;
            std::fs::create_dir_all(&out)?;
            let mut entries = Vec::with_capacity(n);
            for i in 0..n {
                let class = spec.classes[i % spec.classes.len()];
                let sample_seed = navlab_core::seeded::subseed(seed, &format!("export-{i}"));
                let sample = render_sample(&spec, class, sample_seed)?;
                let file = format!("sample-{i:04}.fdmp");
                fdmp::save_sections(
                    out.join(&file),
                    [("image", &sample.image), ("mask", &sample.mask)],
                )?;
                entries.push(serde_json::json!({
                    "file": file,
                    "class_id": class as u8,
                    "class": class.name(),
                    "seed": sample_seed,
                }));
            }
            let manifest = serde_json::json!({ "domain": name, "count": n, "samples": entries });
            let path = out.join("manifest.json");
            std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
            println!("wrote {n} samples and {}", path.display());
        }
        Cmd::Report { from, out } => {
            let report = RunReport::load_json(&from)?;
            let stem = from
                .file_stem()
                .and_then(|s| s.to_str())
                .context("report path has no stem")?
                .to_string();
            for path in report.emit(&out, &stem)? {
                println!("wrote {}", path.display());
            }
        }
        Cmd::Config => {
            print!("{}", ExperimentConfig::default().template());
        }
    }
    Ok(())
}
