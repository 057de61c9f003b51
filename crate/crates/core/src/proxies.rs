//! The bald, text, reference and sketch proxies.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::generator::{truncation_init, GeneratorBackend, ToyGenerator};
use crate::inversion::{invert_wplus, InversionConfig};
use crate::losses::{
    clip_loss_var, pose_loss_var, reference_grams, reg_loss_var, shape_loss_var, step_seed,
    style_loss_var, AugmentationSet, LossWeights,
};
use crate::optim::{minimize, OptimConfig, OptimOutcome, Progress};
use crate::perceptual::{Backends, ImageVar};
use crate::sketch::{SketchInput, SketchInverter};
use crate::tensor::{
    blend_features, dilate_mask, downsample_mask, BinaryMask, FeatureMap, Image, LatentWPlus,
    StageId, LATENT_DIM,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyKind {
    Bald,
    Text,
    Reference,
    Sketch,
    Color,
}

/// How an optimization-based proxy converged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub flagged: bool,
    #[serde(skip)]
    pub trajectory: Vec<f64>,
}

impl OptimSummary {
    fn from_outcome(out: &OptimOutcome, steps: usize) -> Self {
        OptimSummary {
            steps,
            initial_loss: out.initial_loss,
            final_loss: out.loss,
            flagged: out.flagged,
            trajectory: out.trajectory.clone(),
        }
    }
}

/// A latent code, its style-stage features and the region it edits.
///
/// For hairstyle proxies `f_style` is exactly the style-stage synthesis of
/// `w`. The bald proxy instead carries the already blended `F_bald`.
#[derive(Clone, Debug)]
pub struct Proxy {
    pub kind: ProxyKind,
    pub w: Option<LatentWPlus>,
    pub f_style: Option<FeatureMap>,
    /// Style-stage resolution.
    pub region: BinaryMask,
    pub optim: Option<OptimSummary>,
}

/// Shared read-only inputs of proxy construction.
#[derive(Clone, Copy)]
pub struct ProxyEnv<'a> {
    pub gen: &'a dyn GeneratorBackend,
    pub backends: &'a Backends,
    pub weights: &'a LossWeights,
    pub progress: &'a dyn Progress,
}

pub trait BaldingMapper: Send + Sync {
    fn name(&self) -> &str;

    fn apply(&self, w: &LatentWPlus) -> LatentWPlus;
}

/// Removes a fixed hair direction from layers 1–7.
#[derive(Clone, Debug)]
pub struct ToyBaldingMapper {
    direction: Vec<f64>,
    strength: f64,
}

impl ToyBaldingMapper {
    pub const DEFAULT_STRENGTH: f64 = 6.0;

    pub fn new(gen: &ToyGenerator) -> Self {
        Self::with_strength(gen, Self::DEFAULT_STRENGTH)
    }

    pub fn with_strength(gen: &ToyGenerator, strength: f64) -> Self {
        ToyBaldingMapper {
            direction: gen.hair_direction().to_vec(),
            strength,
        }
    }
}

impl BaldingMapper for ToyBaldingMapper {
    fn name(&self) -> &str {
        "toy"
    }

    fn apply(&self, w: &LatentWPlus) -> LatentWPlus {
        let mut out = w.clone();
        for layer in 0..7 {
            out.layer_mut(layer)
                .iter_mut()
                .zip(&self.direction)
                .for_each(|(v, d)| *v -= self.strength * d);
        }
        out
    }
}

/// Which halves of the balding step run. Only `Full` is used by the
/// pipeline; the others exist for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BaldVariant {
    #[default]
    Full,
    /// `F_bald = F_src`.
    SkipBalding,
    /// `F_bald = G(w_bald)` with no blending.
    SkipBlending,
}

/// `F_bald = G(w_bald)·M_bald + F_src·(1 − M_bald)` with `w_bald = B(w_src)`.
pub fn make_bald_proxy(
    w_src: &LatentWPlus,
    f_src: &FeatureMap,
    m_bald: &BinaryMask,
    mapper: &dyn BaldingMapper,
    gen: &dyn GeneratorBackend,
) -> Result<Proxy> {
    make_bald_proxy_variant(w_src, f_src, m_bald, mapper, gen, BaldVariant::Full)
}

pub fn make_bald_proxy_variant(
    w_src: &LatentWPlus,
    f_src: &FeatureMap,
    m_bald: &BinaryMask,
    mapper: &dyn BaldingMapper,
    gen: &dyn GeneratorBackend,
    variant: BaldVariant,
) -> Result<Proxy> {
    if f_src.stage() != StageId::Style || f_src.shape() != gen.stage(StageId::Style).shape {
        return Err(Error::shape("source features must be at the style stage"));
    }
    let w_bald = mapper.apply(w_src);
    let f_bald_raw = gen.synth_to_stage(&w_bald, StageId::Style)?;
    let f_bald = match variant {
        BaldVariant::Full => blend_features(&f_bald_raw, f_src, m_bald)?,
        BaldVariant::SkipBalding => f_src.clone(),
        BaldVariant::SkipBlending => f_bald_raw,
    };
    Ok(Proxy {
        kind: ProxyKind::Bald,
        w: Some(w_bald),
        f_style: Some(f_bald),
        region: m_bald.clone(),
        optim: None,
    })
}

/// Parsed hair of `img`, downsampled to the style stage.
pub fn style_hair_region(
    img: &Image,
    gen: &dyn GeneratorBackend,
    backends: &Backends,
) -> Result<BinaryMask> {
    let (h, w, _) = gen.stage(StageId::Style).shape;
    downsample_mask(&backends.parsing.hair_mask(img), h, w)
}

/// Parsed hair and ears of `img`, downsampled to the style stage.
pub fn style_bald_region(
    img: &Image,
    gen: &dyn GeneratorBackend,
    backends: &Backends,
) -> Result<BinaryMask> {
    let (h, w, _) = gen.stage(StageId::Style).shape;
    downsample_mask(&backends.parsing.hair_and_ear_mask(img), h, w)
}

fn hairstyle_proxy(
    kind: ProxyKind,
    w: LatentWPlus,
    env: &ProxyEnv<'_>,
    optim: Option<OptimSummary>,
) -> Result<Proxy> {
    let f_style = env.gen.synth_to_stage(&w, StageId::Style)?;
    let img = env.gen.synthesize(&w)?;
    let region = style_hair_region(&img, env.gen, env.backends)?;
    Ok(Proxy {
        kind,
        w: Some(w),
        f_style: Some(f_style),
        region,
        optim,
    })
}

fn check_image(img: &Image, gen: &dyn GeneratorBackend, what: &str) -> Result<()> {
    let (h, w) = gen.output_size();
    if (img.height(), img.width()) != (h, w) {
        return Err(Error::shape(format!(
            "{what} is {}x{}, expected {h}x{w}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

fn check_target_mask(m: Option<&BinaryMask>, gen: &dyn GeneratorBackend) -> Result<()> {
    if let Some(m) = m {
        let (h, w) = gen.output_size();
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::shape(format!("shape mask must be {h}x{w}")));
        }
    }
    Ok(())
}

/// Text proxy options beyond the shared optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextProxyOptions {
    pub psi: f64,
    pub augmentations: usize,
}

impl Default for TextProxyOptions {
    fn default() -> Self {
        TextProxyOptions {
            psi: 0.3,
            augmentations: AugmentationSet::DEFAULT_COUNT,
        }
    }
}

/// Optimizes `λ_clip·L_clip + λ_pose·L_pose (+ λ_shape·L_shape)` from the
/// truncated random start `w_mean + ψ·(w_random(seed) − w_mean)`.
pub fn make_text_proxy(
    text: &str,
    i_src: &Image,
    env: &ProxyEnv<'_>,
    opt: &OptimConfig,
    target_mask: Option<&BinaryMask>,
    options: &TextProxyOptions,
) -> Result<Proxy> {
    let random = env.gen.sample_random_latent(opt.seed);
    let init = truncation_init(env.gen.mean_latent(), &random, options.psi)?;
    optimize_text_proxy(
        init,
        text,
        i_src,
        env,
        opt,
        target_mask,
        options.augmentations,
    )
}

/// The text-proxy objective from an explicit starting code.
pub fn optimize_text_proxy(
    init: LatentWPlus,
    text: &str,
    i_src: &Image,
    env: &ProxyEnv<'_>,
    opt: &OptimConfig,
    target_mask: Option<&BinaryMask>,
    augmentations: usize,
) -> Result<Proxy> {
    opt.validate(true)?;
    env.weights.validate()?;
    check_image(i_src, env.gen, "source image")?;
    check_target_mask(target_mask, env.gen)?;
    if text.trim().is_empty() {
        return Err(Error::InvalidRequest("hairstyle text is empty".into()));
    }
    AugmentationSet::sample(augmentations, 0)?;
    let b = env.backends;
    let (h, w) = env.gen.output_size();
    let text_emb = Rc::new(b.similarity.embed_text(text));
    let src_points: Vec<f64> = b.keypoints.extract(i_src).into_iter().flatten().collect();
    let out = minimize(
        init.into_vec(),
        opt,
        "text_proxy",
        env.progress,
        |p, step| {
            let g = Graph::new();
            let wv = g.input(p.to_vec());
            let img = ImageVar::new(env.gen.synth_var(&g, wv, StageId::Output), h, w);
            let augs = AugmentationSet::sample(augmentations, step_seed(opt.seed, step))
                .expect("count checked");
            let mut loss = clip_loss_var(&g, img, &text_emb, &augs, b.similarity.as_ref())
                .mul_const(env.weights.clip)
                .add(
                    pose_loss_var(&g, &src_points, img, b.keypoints.as_ref())
                        .mul_const(env.weights.pose),
                );
            if let Some(m) = target_mask {
                let soft = b.parsing.soft_hair_var(&g, img);
                loss = loss.add(shape_loss_var(&g, soft, m).mul_const(env.weights.shape));
            }
            (loss.item(), g.backward(loss).wrt(wv))
        },
    );
    if out.flagged {
        log::warn!("text proxy for {text:?} did not improve on its starting loss");
    }
    let summary = OptimSummary::from_outcome(&out, opt.steps);
    hairstyle_proxy(
        ProxyKind::Text,
        LatentWPlus::from_flat(out.params)?,
        env,
        Some(summary),
    )
}

/// Reference proxy starting from the W+ inversion of `i_ref`.
pub fn make_reference_proxy(
    i_ref: &Image,
    i_src: &Image,
    env: &ProxyEnv<'_>,
    opt: &OptimConfig,
    invert_cfg: &InversionConfig,
    target_mask: Option<&BinaryMask>,
) -> Result<Proxy> {
    check_image(i_ref, env.gen, "reference image")?;
    let start = invert_wplus(
        i_ref,
        env.gen,
        env.backends.patch.as_ref(),
        invert_cfg,
        env.progress,
    )?;
    optimize_reference_proxy(start.w, i_ref, i_src, env, opt, target_mask)
}

/// `λ_style·L_style + λ_pose·L_pose + λ_reg·L_reg (+ λ_shape·L_shape)`.
///
/// The generated-hair mask is the parser's soft hair probability of the
/// current synthesis, so it follows the image and stays differentiable. A
/// hard re-parse each step makes the loss jump whenever a pixel flips.
/// `L_reg` penalizes the distance to the code of the previous step.
pub fn optimize_reference_proxy(
    init: LatentWPlus,
    i_ref: &Image,
    i_src: &Image,
    env: &ProxyEnv<'_>,
    opt: &OptimConfig,
    target_mask: Option<&BinaryMask>,
) -> Result<Proxy> {
    opt.validate(true)?;
    env.weights.validate()?;
    check_image(i_ref, env.gen, "reference image")?;
    check_image(i_src, env.gen, "source image")?;
    check_target_mask(target_mask, env.gen)?;
    let b = env.backends;
    let (h, w) = env.gen.output_size();
    let m_rh = b.parsing.hair_mask(i_ref);
    let ref_grams = reference_grams(i_ref, &m_rh, b.perceptual.as_ref());
    let src_points: Vec<f64> = b.keypoints.extract(i_src).into_iter().flatten().collect();
    let mut prev = init.as_slice().to_vec();
    let out = minimize(
        init.into_vec(),
        opt,
        "reference_proxy",
        env.progress,
        |p, _| {
            let g = Graph::new();
            let wv = g.input(p.to_vec());
            let img = ImageVar::new(env.gen.synth_var(&g, wv, StageId::Output), h, w);
            let soft = b.parsing.soft_hair_var(&g, img);
            let mut loss = style_loss_var(
                &g,
                &ref_grams,
                img.weighted(soft),
                &BinaryMask::filled(h, w, true),
                b.perceptual.as_ref(),
            )
            .mul_const(env.weights.style)
            .add(
                pose_loss_var(&g, &src_points, img, b.keypoints.as_ref())
                    .mul_const(env.weights.pose),
            )
            .add(reg_loss_var(&g, wv, &prev).mul_const(env.weights.reg));
            if let Some(m) = target_mask {
                loss = loss.add(shape_loss_var(&g, soft, m).mul_const(env.weights.shape));
            }
            prev = p.to_vec();
            (loss.item(), g.backward(loss).wrt(wv))
        },
    );
    if out.flagged {
        log::warn!("reference proxy did not improve on its starting loss");
    }
    let summary = OptimSummary::from_outcome(&out, opt.steps);
    hairstyle_proxy(
        ProxyKind::Reference,
        LatentWPlus::from_flat(out.params)?,
        env,
        Some(summary),
    )
}

/// The stroke raster dilated at image resolution by half a style cell,
/// then downsampled to the style stage.
pub fn sketch_region(sketch: &SketchInput, gen: &dyn GeneratorBackend) -> Result<BinaryMask> {
    let (sh, sw, _) = gen.stage(StageId::Style).shape;
    let radius = (sketch.height / sh).max(1) / 2;
    downsample_mask(&dilate_mask(&sketch.raster(), radius), sh, sw)
}

/// One feed-forward pass of the sketch inverter.
pub fn make_sketch_proxy(
    sketch: &SketchInput,
    inverter: &SketchInverter,
    gen: &dyn GeneratorBackend,
) -> Result<Proxy> {
    sketch.validate()?;
    if sketch.strokes.is_empty() {
        return Err(Error::InvalidRequest("sketch has no strokes".into()));
    }
    if (sketch.height, sketch.width) != gen.output_size() {
        return Err(Error::shape(format!(
            "sketch canvas {}x{} does not match the {}x{} output",
            sketch.height,
            sketch.width,
            gen.output_size().0,
            gen.output_size().1
        )));
    }
    let w = inverter.invert(sketch)?;
    let f_style = gen.synth_to_stage(&w, StageId::Style)?;
    let region = sketch_region(sketch, gen)?;
    Ok(Proxy {
        kind: ProxyKind::Sketch,
        w: Some(w),
        f_style: Some(f_style),
        region,
        optim: None,
    })
}

/// Euclidean norm of each consecutive update in a trajectory of codes.
pub fn step_norms(codes: &[Vec<f64>]) -> Vec<f64> {
    codes
        .windows(2)
        .map(|p| {
            p[0].iter()
                .zip(&p[1])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Number of latent entries in the first seven layers.
pub const HEAD_LEN: usize = 7 * LATENT_DIM;
