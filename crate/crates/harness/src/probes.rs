//! Measurement probes over trained models: cross-domain representation
//! alignment at the backbone and encoder taps, the style-driven share of
//! encoder gradients, landscape noise fluctuation, and a linear
//! domain-separability check on frozen features.

use anyhow::{ensure, Context, Result};
use navlab_core::metrics::{cka, gaussian_loss_fluctuation, FeaturePopulation};
use navlab_core::nn::{BackboneState, Model, ParamRole};
use navlab_core::seeded::subseed;
use navlab_core::synthbench::{
    domain_by_name, render_sample_stripped, sample_episode, DomainSpec, Episode,
};
use navlab_core::{Graph, Tensor};

use crate::config::ExperimentConfig;

/// Alignment between source and one target domain, measured at both taps.
/// Relative values divide by the source-vs-source split alignment at the
/// same tap, giving a within-domain yardstick.
#[derive(Debug, Clone, Copy)]
pub struct DecoupleOutcome {
    pub backbone_cka: f64,
    pub encoder_cka: f64,
    pub backbone_relative: f64,
    pub encoder_relative: f64,
}

struct TapRows {
    backbone: Vec<Vec<f64>>,
    encoder: Vec<Vec<f64>>,
}

fn capture_population(
    cfg: &ExperimentConfig,
    model: &Model,
    spec: &DomainSpec,
    tag: &str,
    seed: u64,
) -> Result<TapRows> {
    ensure!(cfg.probe_samples >= 2, "probe population undersized: {}", cfg.probe_samples);
    let mut backbone = Vec::with_capacity(cfg.probe_samples);
    let mut encoder = Vec::with_capacity(cfg.probe_samples);
    for i in 0..cfg.probe_samples {
        let ep_seed = subseed(seed, &format!("probe-{tag}-{i}"));
        let ep = sample_episode(spec, cfg.shots, ep_seed)?;
        let prepared = model.prepare(&ep)?;
        let capture = model.capture_episode(&prepared)?;
        backbone.push(capture.backbone);
        encoder.push(capture.encoder);
    }
    Ok(TapRows { backbone, encoder })
}

/// Cross-domain alignment of one model against every listed target domain.
/// The source populations are captured once and shared.
pub fn decouple_probe(
    cfg: &ExperimentConfig,
    seed: u64,
    model: &Model,
    targets: &[&str],
) -> Result<Vec<(String, DecoupleOutcome)>> {
    let source = domain_by_name("source")?;
    let src_a = capture_population(cfg, model, &source, "src-a", seed)?;
    let src_b = capture_population(cfg, model, &source, "src-b", seed)?;
    let pop = |rows: &[Vec<f64>]| FeaturePopulation::from_rows(rows);
    let bb_a = pop(&src_a.backbone)?;
    let bb_b = pop(&src_b.backbone)?;
    let enc_a = pop(&src_a.encoder)?;
    let enc_b = pop(&src_b.encoder)?;
    let bb_within = cka(&bb_a, &bb_b).context("backbone within-domain alignment")?;
    let enc_within = cka(&enc_a, &enc_b).context("encoder within-domain alignment")?;

    let mut out = Vec::with_capacity(targets.len());
    for name in targets {
        let spec = domain_by_name(name)?;
        let tgt = capture_population(cfg, model, &spec, name, seed)?;
        let backbone_cka = cka(&bb_a, &pop(&tgt.backbone)?)?;
        let encoder_cka = cka(&enc_a, &pop(&tgt.encoder)?)?;
        out.push((
            name.to_string(),
            DecoupleOutcome {
                backbone_cka,
                encoder_cka,
                backbone_relative: backbone_cka / bb_within,
                encoder_relative: encoder_cka / enc_within,
            },
        ));
    }
    Ok(out)
}

fn stripped_twin(spec: &DomainSpec, ep: &Episode) -> Result<Episode> {
    let mut support = Vec::with_capacity(ep.support.len());
    for s in &ep.support {
        support.push(render_sample_stripped(spec, s.class, s.seed)?);
    }
    Ok(Episode {
        domain: ep.domain.clone(),
        class: ep.class,
        support,
        query: render_sample_stripped(spec, ep.query.class, ep.query.seed)?,
    })
}

fn encoder_gradient(model: &Model, ep: &Episode) -> Result<Vec<f64>> {
    let prepared = model.prepare(ep)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &|r| r == ParamRole::Encoder);
    let wiring = model.episode_loss(&mut g, &bound, &prepared, false)?;
    g.backward(wiring.loss)?;
    let mut flat = Vec::new();
    for (var, on) in bound.all.iter().zip(&bound.mask) {
        if *on {
            match g.grad(*var) {
                Some(values) => flat.extend_from_slice(values),
                None => flat.extend(std::iter::repeat(0.0).take(g.dims(*var).iter().product())),
            }
        }
    }
    Ok(flat)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-15 || nb < 1e-15 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// How much of the encoder's loss gradient points along the style-driven
/// direction: mean cosine between the full encoder gradient and the
/// difference of gradients on a styled episode and its style-stripped twin.
/// Lower means the encoder learns predominantly from style-independent
/// structure.
pub fn gradient_style_share(
    cfg: &ExperimentConfig,
    seed: u64,
    model: &Model,
    domain: &str,
) -> Result<f64> {
    ensure!(cfg.probe_gradient_episodes > 0, "gradient probe needs episodes");
    let spec = domain_by_name(domain)?;
    let mut total = 0.0;
    for i in 0..cfg.probe_gradient_episodes {
        let ep_seed = subseed(seed, &format!("gradsep-{domain}-{i}"));
        let styled = sample_episode(&spec, cfg.shots, ep_seed)?;
        let stripped = stripped_twin(&spec, &styled)?;
        let g_styled = encoder_gradient(model, &styled)?;
        let g_stripped = encoder_gradient(model, &stripped)?;
        let style_part: Vec<f64> =
            g_styled.iter().zip(&g_stripped).map(|(a, b)| a - b).collect();
        total += cosine(&g_styled, &style_part);
    }
    Ok(total / cfg.probe_gradient_episodes as f64)
}

/// Eval-loss standard deviation under parameter noise, on a fixed episode
/// stream from `domain`.
pub fn noise_fluctuation(
    cfg: &ExperimentConfig,
    seed: u64,
    model: &Model,
    domain: &str,
) -> Result<f64> {
    let spec = domain_by_name(domain)?;
    let mut eval = Vec::with_capacity(cfg.fluc_eval_episodes);
    for i in 0..cfg.fluc_eval_episodes {
        let ep_seed = subseed(seed, &format!("fluc-eval-{domain}-{i}"));
        let ep = sample_episode(&spec, cfg.shots, ep_seed)?;
        eval.push(model.prepare(&ep)?);
    }
    Ok(gaussian_loss_fluctuation(
        model,
        &eval,
        cfg.fluc_trials,
        cfg.fluc_sigma,
        subseed(seed, "fluc"),
    )?)
}

fn pooled_deep_features(backbone: &BackboneState, image: &Tensor) -> Result<Vec<f64>> {
    let taps = backbone.features(image)?;
    let t = &taps[2];
    let c = t.dims()[0];
    let area: usize = t.dims()[1..].iter().product();
    Ok((0..c)
        .map(|ch| t.data()[ch * area..(ch + 1) * area].iter().sum::<f64>() / area as f64)
        .collect())
}

/// Accuracy of a logistic probe separating source from target samples on
/// pooled deep backbone features; a held-out check that the benchmark's
/// domain gap is visible to the frozen feature extractor.
pub fn domain_probe_accuracy(
    backbone: &BackboneState,
    target: &str,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<f64> {
    let src = domain_by_name("source")?;
    let tgt = domain_by_name(target)?;
    let render = |spec: &DomainSpec, tag: &str, i: usize| -> Result<Vec<f64>> {
        let s = subseed(seed, &format!("domain-probe-{tag}-{i}"));
        let class = spec.classes[i % spec.classes.len()];
        let sample = navlab_core::synthbench::render_sample(spec, class, s)?;
        pooled_deep_features(backbone, &sample.image)
    };
    let mut train: Vec<(Vec<f64>, f64)> = Vec::with_capacity(2 * n_train);
    for i in 0..n_train {
        train.push((render(&src, "train-src", i)?, 0.0));
        train.push((render(&tgt, "train-tgt", i)?, 1.0));
    }
    let d = train[0].0.len();

    // feature standardization keeps the probe's conditioning seed-stable
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for (x, _) in &train {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= train.len() as f64;
    }
    for (x, _) in &train {
        for ((s, m), v) in var.iter_mut().zip(&mean).zip(x) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut var {
        *s = (*s / train.len() as f64).sqrt().max(1e-9);
    }
    let norm = |x: &[f64]| -> Vec<f64> {
        x.iter().zip(&mean).zip(&var).map(|((v, m), s)| (v - m) / s).collect()
    };

    let mut w = vec![0.0; d + 1];
    for _ in 0..300 {
        let mut grad = vec![0.0; d + 1];
        for (x, y) in &train {
            let xn = norm(x);
            let z: f64 = w[d] + xn.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let g = p - y;
            for (gi, xi) in grad[..d].iter_mut().zip(&xn) {
                *gi += g * xi;
            }
            grad[d] += g;
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * gi / train.len() as f64;
        }
    }

    let mut correct = 0usize;
    for i in 0..n_eval {
        for (spec, tag, label) in [(&src, "eval-src", 0.0), (&tgt, "eval-tgt", 1.0)] {
            let x = norm(&render(spec, tag, i)?);
            let z: f64 = w[d] + x.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>();
            if (z >= 0.0) == (label > 0.5) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (2 * n_eval) as f64)
}
