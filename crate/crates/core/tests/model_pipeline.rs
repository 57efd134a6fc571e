//! End-to-end flows across modules: pretraining, episodic training with and
//! without sharpness-aware updates, checkpointing, and style separation of
//! frozen features.

use navlab_core::metrics::{mean_eval_loss, mmd_permutation_test, FeaturePopulation};
use navlab_core::nn::{
    pretrain_backbone, AdapterSpec, Model, ParamRole, PretrainConfig,
};
use navlab_core::optim::{Optimizer, SamVariant};
use navlab_core::synthbench::{render_sample, sample_episode, source_domain, target_b_domain};
use navlab_core::Tensor;

fn spatial_mean(t: &Tensor) -> Vec<f64> {
    let c = t.dims()[0];
    let area: usize = t.dims()[1..].iter().product();
    (0..c)
        .map(|ch| t.data()[ch * area..(ch + 1) * area].iter().sum::<f64>() / area as f64)
        .collect()
}

#[test]
fn pretrained_features_train_a_segmenter() {
    let (backbone, report) = pretrain_backbone(&PretrainConfig::default(), 0).unwrap();
    assert!(
        report.accuracy > 0.533,
        "pretext accuracy {} under bar",
        report.accuracy
    );

    let mut model = Model::new(backbone, Some(AdapterSpec::deep_residual()), 0).unwrap();
    let eval: Vec<_> = (0..12)
        .map(|i| {
            let ep = sample_episode(&source_domain(), 1, 9000 + i).unwrap();
            model.prepare(&ep).unwrap()
        })
        .collect();
    let before = mean_eval_loss(&model, &eval).unwrap();

    let mut opt = Optimizer::adam_only(1e-3);
    let all = |_: ParamRole| true;
    for step in 0..40 {
        let batch: Vec<_> = (0..4)
            .map(|b| {
                let ep = sample_episode(&source_domain(), 1, 100 + step * 4 + b).unwrap();
                model.prepare(&ep).unwrap()
            })
            .collect();
        let r = opt.step_batch(&mut model, &batch, &all).unwrap();
        assert!(r.loss.is_finite());
    }
    let after = mean_eval_loss(&model, &eval).unwrap();
    assert!(
        after < 0.8 * before,
        "eval loss {before:.4} -> {after:.4}: no learning"
    );

    // a reloaded checkpoint evaluates identically
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fdmp");
    model.save(&path).unwrap();
    let reloaded = Model::load(&path).unwrap();
    let again = mean_eval_loss(&reloaded, &eval).unwrap();
    assert_eq!(after.to_bits(), again.to_bits());
}

#[test]
fn spectrum_updates_stay_stable_in_training() {
    let (backbone, _) = pretrain_backbone(
        &PretrainConfig { steps: 60, batch: 16, lr: 3e-3, eval_samples: 20 },
        1,
    )
    .unwrap();
    let mut model = Model::new(backbone, Some(AdapterSpec::deep_residual()), 1).unwrap();
    let mut opt = Optimizer::sharpness_aware(1e-3, 0.5, SamVariant::SpectrumNavigators);
    let all = |_: ParamRole| true;
    let mut perturbed = 0;
    for step in 0..10 {
        let batch: Vec<_> = (0..2)
            .map(|b| {
                let ep = sample_episode(&source_domain(), 1, 500 + step * 2 + b).unwrap();
                model.prepare(&ep).unwrap()
            })
            .collect();
        let r = opt.step_batch(&mut model, &batch, &all).unwrap();
        assert!(r.loss.is_finite(), "step {step} diverged");
        perturbed += usize::from(r.perturbed);
    }
    assert!(perturbed >= 9, "spectrum probe mostly skipped: {perturbed}/10");
}

#[test]
fn frozen_features_separate_rendering_styles() {
    let mut backbone = navlab_core::nn::BackboneState::init(7);
    backbone.freeze();
    let pool = |spec: &navlab_core::synthbench::DomainSpec, base: u64| -> FeaturePopulation {
        let rows: Vec<Vec<f64>> = (0..16)
            .map(|i| {
                let class = spec.classes[i as usize % spec.classes.len()];
                let s = render_sample(spec, class, base + i).unwrap();
                let feats = backbone.features(&s.image).unwrap();
                spatial_mean(&feats[2])
            })
            .collect();
        FeaturePopulation::from_rows(&rows).unwrap()
    };

    let src_a = pool(&source_domain(), 10_000);
    let src_b = pool(&source_domain(), 20_000);
    let tgt = pool(&target_b_domain(), 30_000);

    let within = mmd_permutation_test(&src_a, &src_b, 200, 0).unwrap();
    let cross = mmd_permutation_test(&src_a, &tgt, 200, 0).unwrap();
    assert!(
        within.p_value > 0.05,
        "same-style split flagged: p={}",
        within.p_value
    );
    assert!(
        cross.p_value <= 0.02,
        "style shift missed: p={}",
        cross.p_value
    );
}
