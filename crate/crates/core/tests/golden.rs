//! Frozen reference outputs of the toy stack.
//!
//! Values live in `tests/golden/<name>.json`. Set `HAIRPROXY_BLESS=1` to
//! rewrite them after an intended behaviour change; otherwise a missing or
//! differing file fails the test.

use std::path::PathBuf;

use hairproxy_core::generator::{truncation_init, GeneratorBackend, ToyGenerator};
use hairproxy_core::inversion::{
    embed_fs, fs_defaults, invert_wplus, mse, synthesize_fs, wplus_defaults,
};
use hairproxy_core::losses::{clip_loss, AugmentationSet, LossWeights};
use hairproxy_core::metrics::{run_benchmark, toy_benchmark_items};
use hairproxy_core::perceptual::{toy_text_similarity, Backends};
use hairproxy_core::pipeline::{blend_global_style, synth_style_only, Budgets};
use hairproxy_core::proxies::{make_sketch_proxy, style_hair_region};
use hairproxy_core::sketch::{generate_toy_dataset, train_sketch_inverter, SketchTrainConfig};
use hairproxy_core::{
    identity_similarity, ColorCondition, EditRequest, Engine, FeatureMap, HairstyleCondition,
    Image, LatentWPlus, NoProgress, StageId,
};

const TOL: f64 = 1e-9;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.json"))
}

fn check(name: &str, values: &[f64]) {
    let path = golden_path(name);
    if std::env::var_os("HAIRPROXY_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string(values).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; bless to create it", path.display()));
    let want: Vec<f64> = serde_json::from_str(&text).unwrap();
    assert_eq!(values.len(), want.len(), "{name}: length");
    for (i, (g, w)) in values.iter().zip(&want).enumerate() {
        assert!(
            (g - w).abs() <= TOL * (1.0 + w.abs()),
            "{name}[{i}]: got {g}, frozen {w}"
        );
    }
}

fn toy_w(gen: &ToyGenerator, seed: u64) -> LatentWPlus {
    truncation_init(gen.mean_latent(), &gen.sample_random_latent(seed), 0.6).unwrap()
}

fn fixture(gen: &ToyGenerator) -> Image {
    gen.synthesize(&toy_w(gen, 7)).unwrap()
}

fn small_engine() -> Engine {
    Engine {
        budgets: Budgets {
            invert_steps: 60,
            fs_steps: 30,
            text_steps: 40,
            reference_steps: 20,
            color_steps: 30,
            final_steps: 30,
            ..Budgets::default()
        },
        ..Engine::toy()
    }
}

#[test]
fn mean_latent_style_features() {
    let gen = ToyGenerator::default();
    let f = gen
        .synth_to_stage(&LatentWPlus::broadcast(gen.mean_latent()), StageId::Style)
        .unwrap();
    check("mean_style_features", f.data());
}

#[test]
fn zero_style_injection() {
    let gen = ToyGenerator::default();
    let (h, w, c) = gen.stage(StageId::Style).shape;
    let zeros = FeatureMap::zeros(StageId::Style, h, w, c);
    let mean = LatentWPlus::broadcast(gen.mean_latent());
    let img = gen
        .synth_from_stage(&zeros, &mean.slice(8, 18), StageId::Output)
        .unwrap()
        .into_image()
        .unwrap();
    check("zero_injection_output", img.data());
}

#[test]
fn random_latent_seed_zero() {
    let gen = ToyGenerator::default();
    check(
        "random_latent_seed0",
        gen.sample_random_latent(0).as_slice(),
    );
}

#[test]
fn toy_similarity_and_clip_loss() {
    let gen = ToyGenerator::default();
    let img = fixture(&gen);
    let b = Backends::toy();
    let augs = AugmentationSet::sample(4, 0).unwrap();
    check(
        "toy_text_scalars",
        &[
            toy_text_similarity("long wavy red hair", &img),
            clip_loss(&img, "long wavy red hair", &augs, b.similarity.as_ref()).unwrap(),
        ],
    );
}

#[test]
fn identity_on_fixture_pair() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    let other = gen.synthesize(&toy_w(&gen, 8)).unwrap();
    check(
        "identity_pair",
        &[identity_similarity(
            &fixture(&gen),
            &other,
            b.identity.as_ref(),
        )],
    );
}

#[test]
fn inversion_start_and_fs_error() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    let img = fixture(&gen);
    let pd = b.patch.as_ref();
    let wp = invert_wplus(&img, &gen, pd, &wplus_defaults(0), &NoProgress).unwrap();
    // The first logged loss is the loss of the mean latent.
    let at_mean = gen
        .synthesize(&LatentWPlus::broadcast(gen.mean_latent()))
        .unwrap();
    let direct = mse(&at_mean, &img) + pd.distance(&at_mean, &img);
    assert!((wp.initial_loss - direct).abs() <= 1e-12 * (1.0 + direct));
    let fs = embed_fs(&img, &wp.w, &gen, pd, &fs_defaults(0), &NoProgress).unwrap();
    let fs_err = mse(&synthesize_fs(&fs.fs, &gen).unwrap(), &img);
    let wp_err = mse(&gen.synthesize(&wp.w).unwrap(), &img);
    assert!(fs_err <= wp_err);
    check("inversion_scalars", &[wp.initial_loss, wp.loss, fs_err]);
}

#[test]
fn sketch_latent_from_fixed_inverter() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    let pairs = generate_toy_dataset(&gen, b.parsing.as_ref(), 10, 0).unwrap();
    let tr = train_sketch_inverter(
        &pairs,
        &gen,
        b.parsing.as_ref(),
        b.patch.as_ref(),
        &LossWeights::default(),
        &SketchTrainConfig::new(100, 0),
        &NoProgress,
    )
    .unwrap();
    let proxy = make_sketch_proxy(&pairs[0].sketch, &tr.inverter, &gen).unwrap();
    let w = proxy.w.unwrap();
    // Every 37th entry keeps the file small while touching all layers.
    let sampled: Vec<f64> = w.as_slice().iter().step_by(37).copied().collect();
    check("sketch_latent", &sampled);
}

#[test]
fn style_only_image() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    let w_src = toy_w(&gen, 7);
    let w_other = toy_w(&gen, 9);
    let region = style_hair_region(&gen.synthesize(&w_other).unwrap(), &gen, &b).unwrap();
    let f = blend_global_style(
        &gen.synth_to_stage(&w_other, StageId::Style).unwrap(),
        &gen.synth_to_stage(&w_src, StageId::Style).unwrap(),
        &region,
    )
    .unwrap();
    check(
        "style_only_image",
        synth_style_only(&f, &w_src, &gen).unwrap().data(),
    );
}

fn report_values(out: &hairproxy_core::pipeline::EditOutcome) -> Vec<f64> {
    let mut v = out.image.data().to_vec();
    for s in &out.report.stages {
        v.extend([s.steps as f64, s.initial_loss, s.final_loss]);
    }
    for m in &out.report.masks {
        v.push(m.count as f64);
    }
    v
}

#[test]
fn color_only_edit() {
    let e = small_engine();
    let img = fixture(&ToyGenerator::default());
    let req = EditRequest {
        color: Some(ColorCondition::Rgb([0.6, 0.25, 0.15])),
        seed: 1,
        ..Default::default()
    };
    check(
        "color_only_edit",
        &report_values(&e.run_edit(&img, &req, &NoProgress).unwrap()),
    );
}

#[test]
fn joint_edit() {
    let e = small_engine();
    let img = fixture(&ToyGenerator::default());
    let req = EditRequest {
        hairstyle: Some(HairstyleCondition::Text("short curly hair".into())),
        color: Some(ColorCondition::Text("blonde".into())),
        seed: 2,
        ..Default::default()
    };
    check(
        "joint_edit",
        &report_values(&e.run_edit(&img, &req, &NoProgress).unwrap()),
    );
}

#[test]
fn toy_benchmark_report() {
    let e = small_engine();
    let items = toy_benchmark_items(&ToyGenerator::default(), 10, 0).unwrap();
    let r = run_benchmark(&items, &e, Vec::new()).without_timings();
    assert!(r.skipped.is_empty());
    let mut v = Vec::new();
    for item in &r.items {
        v.extend([item.result.ids, item.result.psnr_db, item.result.ssim]);
    }
    v.extend([r.aggregate.ids, r.aggregate.psnr_db, r.aggregate.ssim]);
    check("toy_benchmark", &v);
}
