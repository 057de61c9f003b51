//! The full edit: bald proxy, hairstyle blending at the style stage, then
//! colour blending at the colour stage.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::generator::{GeneratorBackend, ToyGenerator};
use crate::inversion::{embed_fs, invert_wplus, InversionConfig};
use crate::losses::{
    avg_color_loss_var, bg_loss_var, blend_loss_var, clip_loss_var, masked_mean_color, step_seed,
    AugmentationSet, LossWeights,
};
use crate::optim::{minimize, OptimConfig, Progress};
use crate::perceptual::{Backends, ImageVar};
use crate::proxies::{
    make_bald_proxy, make_sketch_proxy, make_text_proxy, optimize_reference_proxy,
    style_bald_region, style_hair_region, BaldingMapper, OptimSummary, Proxy, ProxyEnv,
    TextProxyOptions, ToyBaldingMapper,
};
use crate::sketch::{SketchInput, SketchInverter};
use crate::tensor::{
    blend_features, mask_intersection_nonhair, resize_mask, BinaryMask, FeatureMap, Image,
    LatentSlice, LatentWPlus, StageId, LATENT_DIM,
};

#[derive(Clone, Debug, PartialEq)]
pub enum HairstyleCondition {
    Text(String),
    Reference(Image),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColorCondition {
    Text(String),
    Reference(Image),
    Rgb([f64; 3]),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditRequest {
    pub hairstyle: Option<HairstyleCondition>,
    pub sketch: Option<SketchInput>,
    /// Target hair region at image resolution; enables the shape loss.
    pub shape_mask: Option<BinaryMask>,
    /// Apply the sketch on top of the source hair with no global hairstyle.
    pub standalone_sketch: bool,
    pub color: Option<ColorCondition>,
    /// Local colour region at image resolution.
    pub color_mask: Option<BinaryMask>,
    pub seed: u64,
}

impl EditRequest {
    pub fn edits_hairstyle(&self) -> bool {
        self.hairstyle.is_some() || (self.standalone_sketch && self.sketch.is_some())
    }

    pub fn validate(&self, gen: &dyn GeneratorBackend) -> Result<()> {
        if !self.edits_hairstyle() && self.color.is_none() {
            return Err(Error::InvalidRequest(
                "at least one of hairstyle or color must be given".into(),
            ));
        }
        if self.sketch.is_some() && self.hairstyle.is_none() && !self.standalone_sketch {
            return Err(Error::InvalidRequest(
                "a sketch needs a hairstyle condition or standalone sketch mode".into(),
            ));
        }
        if self.standalone_sketch && self.sketch.is_none() {
            return Err(Error::InvalidRequest(
                "standalone sketch mode needs a sketch".into(),
            ));
        }
        if self.shape_mask.is_some() && self.hairstyle.is_none() {
            return Err(Error::InvalidRequest(
                "a shape mask needs a text or reference hairstyle".into(),
            ));
        }
        if self.color_mask.is_some() && self.color.is_none() {
            return Err(Error::InvalidRequest(
                "a colour mask needs a colour condition".into(),
            ));
        }
        let (h, w) = gen.output_size();
        let check_img = |img: &Image, what: &str| {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::shape(format!(
                    "{what} is {}x{}, expected {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            Ok(())
        };
        let check_mask = |m: &BinaryMask, what: &str| {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::shape(format!(
                    "{what} is {}x{}, expected {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
            Ok(())
        };
        match &self.hairstyle {
            Some(HairstyleCondition::Text(t)) if t.trim().is_empty() => {
                return Err(Error::InvalidRequest("hairstyle text is empty".into()))
            }
            Some(HairstyleCondition::Reference(img)) => check_img(img, "hairstyle reference")?,
            _ => {}
        }
        match &self.color {
            Some(ColorCondition::Text(t)) if t.trim().is_empty() => {
                return Err(Error::InvalidRequest("colour text is empty".into()))
            }
            Some(ColorCondition::Reference(img)) => check_img(img, "colour reference")?,
            Some(ColorCondition::Rgb(rgb)) => {
                if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidRequest(format!(
                        "rgb target {rgb:?} must lie in [0, 1]"
                    )));
                }
            }
            _ => {}
        }
        if let Some(m) = &self.shape_mask {
            check_mask(m, "shape mask")?;
        }
        if let Some(m) = &self.color_mask {
            check_mask(m, "colour mask")?;
            if m.is_empty() {
                return Err(Error::InvalidRequest("colour mask is empty".into()));
            }
        }
        if let Some(s) = &self.sketch {
            s.validate()?;
            if (s.height, s.width) != (h, w) {
                return Err(Error::shape(format!("sketch canvas must be {h}x{w}")));
            }
            if s.strokes.is_empty() {
                return Err(Error::InvalidRequest("sketch has no strokes".into()));
            }
        }
        Ok(())
    }
}

/// Step budgets for each optimization stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub learning_rate: f64,
    pub invert_steps: usize,
    pub fs_steps: usize,
    pub text_steps: usize,
    pub reference_steps: usize,
    pub color_steps: usize,
    pub final_steps: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            learning_rate: 0.01,
            invert_steps: 200,
            fs_steps: 100,
            text_steps: 200,
            reference_steps: 100,
            color_steps: 100,
            final_steps: 100,
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<()> {
        OptimConfig::new(self.learning_rate, 1, 0).validate(false)?;
        if self.invert_steps == 0 {
            return Err(Error::Config(
                "budgets.invert_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn cfg(&self, steps: usize, seed: u64) -> OptimConfig {
        OptimConfig::new(self.learning_rate, steps, seed)
    }
}

/// Colour proxy: `w_color` differs from `w_src` only on layers 10–13 until
/// the final tail optimization.
#[derive(Clone, Debug)]
pub struct ColorProxyState {
    pub w_color: LatentWPlus,
    pub f_blend_14: Option<FeatureMap>,
    pub optim: OptimSummary,
}

impl ColorProxyState {
    /// One-based, inclusive.
    pub const OPTIMIZABLE: (usize, usize) = (10, 13);
    pub const TAIL: (usize, usize) = (15, 18);
}

/// Per-stage optimizer summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub stages: Vec<StageReport>,
    pub masks: Vec<MaskReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timings: Vec<StageTiming>,
}

impl EditReport {
    fn stage(&mut self, name: &str, s: &OptimSummary) {
        self.stages.push(StageReport {
            stage: name.into(),
            steps: s.steps,
            initial_loss: s.initial_loss,
            final_loss: s.final_loss,
            flagged: s.flagged,
        });
    }

    fn mask(&mut self, name: &str, m: &BinaryMask) {
        self.masks.push(MaskReport {
            name: name.into(),
            height: m.height(),
            width: m.width(),
            count: m.count(),
        });
    }

    /// The report with wall-clock timings removed, for reproducible output.
    pub fn without_timings(&self) -> EditReport {
        EditReport {
            timings: Vec::new(),
            ..self.clone()
        }
    }
}

/// A stage failure with the best artifact produced before it.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {error}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub error: Error,
    pub partial: Option<Image>,
}

impl StageError {
    pub fn is_validation(&self) -> bool {
        self.error.is_validation()
    }
}

type StageResult<T> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: &'static str, partial: &Option<Image>) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: &'static str, partial: &Option<Image>) -> StageResult<T> {
        self.map_err(|error| StageError {
            stage,
            error,
            partial: partial.clone(),
        })
    }
}

/// Inversion, FS embedding and bald proxy of a source image. Computed once
/// and reused by every edit on that image.
#[derive(Clone, Debug)]
pub struct SourceState {
    pub image: Image,
    pub w_src: LatentWPlus,
    pub f_src: FeatureMap,
    pub bald: Proxy,
    pub report: EditReport,
}

impl SourceState {
    pub fn f_bald(&self) -> &FeatureMap {
        self.bald
            .f_style
            .as_ref()
            .expect("bald proxy carries features")
    }

    /// Style-stage bald region.
    pub fn m_bald(&self) -> &BinaryMask {
        &self.bald.region
    }
}

#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub image: Image,
    pub report: EditReport,
    pub f_style: FeatureMap,
    pub i_style: Image,
    /// Style-stage masks that gated the hairstyle blend.
    pub m_global: Option<BinaryMask>,
    pub m_local: Option<BinaryMask>,
    pub color: Option<ColorProxyState>,
}

/// Generator, backends and settings shared by every edit.
#[derive(Clone)]
pub struct Engine {
    pub gen: Arc<dyn GeneratorBackend>,
    pub backends: Backends,
    pub weights: LossWeights,
    pub budgets: Budgets,
    pub mapper: Arc<dyn BaldingMapper>,
    pub inverter: Option<Arc<SketchInverter>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("gen", &self.gen.name())
            .field("backends", &self.backends)
            .field("weights", &self.weights)
            .field("budgets", &self.budgets)
            .field("mapper", &self.mapper.name())
            .field("inverter", &self.inverter.is_some())
            .finish()
    }
}

impl Engine {
    /// Toy generator and backends with default weights and budgets. The
    /// sketch inverter starts untrained (every sketch maps to the mean).
    pub fn toy() -> Self {
        let gen = ToyGenerator::default();
        let mapper = Arc::new(ToyBaldingMapper::new(&gen));
        let inverter = Arc::new(SketchInverter::at_mean(&gen));
        Engine {
            gen: Arc::new(gen),
            backends: Backends::toy(),
            weights: LossWeights::default(),
            budgets: Budgets::default(),
            mapper,
            inverter: Some(inverter),
        }
    }

    fn env<'a>(&'a self, progress: &'a dyn Progress) -> ProxyEnv<'a> {
        ProxyEnv {
            gen: self.gen.as_ref(),
            backends: &self.backends,
            weights: &self.weights,
            progress,
        }
    }

    /// Inverts `image`, embeds it in FS space and builds its bald proxy.
    pub fn prepare_source(
        &self,
        image: &Image,
        seed: u64,
        progress: &dyn Progress,
    ) -> StageResult<SourceState> {
        let gen = self.gen.as_ref();
        let mut report = EditReport::default();
        let none = None;
        self.budgets.validate().at("validate", &none)?;
        let (h, w) = gen.output_size();
        if (image.height(), image.width()) != (h, w) {
            return Err(Error::shape(format!(
                "source image is {}x{}, expected {h}x{w}",
                image.height(),
                image.width()
            )))
            .at("validate", &none);
        }
        let t = Instant::now();
        let inv_cfg: InversionConfig = self.budgets.cfg(self.budgets.invert_steps, seed);
        let inv = invert_wplus(image, gen, self.backends.patch.as_ref(), &inv_cfg, progress)
            .at("invert", &none)?;
        report.stage(
            "invert",
            &OptimSummary {
                steps: inv_cfg.steps,
                initial_loss: inv.initial_loss,
                final_loss: inv.loss,
                flagged: inv.flagged,
                trajectory: Vec::new(),
            },
        );
        timing(&mut report, "invert", t);

        let t = Instant::now();
        let fs_cfg = self.budgets.cfg(self.budgets.fs_steps, seed);
        let fs = embed_fs(
            image,
            &inv.w,
            gen,
            self.backends.patch.as_ref(),
            &fs_cfg,
            progress,
        )
        .at("embed_fs", &none)?;
        report.stage(
            "embed_fs",
            &OptimSummary {
                steps: fs_cfg.steps,
                initial_loss: fs.initial_loss,
                final_loss: fs.loss,
                flagged: fs.flagged,
                trajectory: Vec::new(),
            },
        );
        timing(&mut report, "embed_fs", t);

        let t = Instant::now();
        let m_bald = style_bald_region(image, gen, &self.backends).at("bald", &none)?;
        let bald = make_bald_proxy(&inv.w, &fs.fs.f7, &m_bald, self.mapper.as_ref(), gen)
            .at("bald", &none)?;
        report.mask("bald", &m_bald);
        timing(&mut report, "bald", t);
        Ok(SourceState {
            image: image.clone(),
            w_src: inv.w,
            f_src: fs.fs.f7,
            bald,
            report,
        })
    }

    /// Runs a request against a prepared source.
    pub fn edit(
        &self,
        src: &SourceState,
        req: &EditRequest,
        progress: &dyn Progress,
    ) -> StageResult<EditOutcome> {
        let gen = self.gen.as_ref();
        let env = self.env(progress);
        let mut report = src.report.clone();
        let mut partial = synth_style_only(&src.f_src, &src.w_src, gen).ok();
        req.validate(gen).at("validate", &partial)?;

        // hairstyle
        let mut m_global = None;
        let mut m_local = None;
        let f_style = if req.edits_hairstyle() {
            let mut f = match &req.hairstyle {
                Some(cond) => {
                    let t = Instant::now();
                    let (stage, proxy) = match cond {
                        HairstyleCondition::Text(text) => {
                            let cfg = self.budgets.cfg(self.budgets.text_steps, req.seed);
                            let p = make_text_proxy(
                                text,
                                &src.image,
                                &env,
                                &cfg,
                                req.shape_mask.as_ref(),
                                &TextProxyOptions::default(),
                            );
                            ("text_proxy", p)
                        }
                        HairstyleCondition::Reference(i_ref) => {
                            let inv = self.budgets.cfg(self.budgets.invert_steps, req.seed);
                            let cfg = self.budgets.cfg(self.budgets.reference_steps, req.seed);
                            let p = invert_wplus(
                                i_ref,
                                gen,
                                self.backends.patch.as_ref(),
                                &inv,
                                progress,
                            )
                            .and_then(|start| {
                                optimize_reference_proxy(
                                    start.w,
                                    i_ref,
                                    &src.image,
                                    &env,
                                    &cfg,
                                    req.shape_mask.as_ref(),
                                )
                            });
                            ("reference_proxy", p)
                        }
                    };
                    let proxy = proxy.at(stage, &partial)?;
                    if let Some(s) = &proxy.optim {
                        report.stage(stage, s);
                    }
                    timing(&mut report, stage, t);
                    report.mask("global", &proxy.region);
                    let f = blend_global_style(
                        proxy.f_style.as_ref().expect("hairstyle proxy features"),
                        src.f_bald(),
                        &proxy.region,
                    )
                    .at("style_blend", &partial)?;
                    m_global = Some(proxy.region);
                    f
                }
                None => src.f_src.clone(),
            };
            if let Some(sketch) = &req.sketch {
                let t = Instant::now();
                let inverter = self
                    .inverter
                    .as_deref()
                    .ok_or_else(|| Error::BackendUnavailable {
                        name: "sketch inverter".into(),
                        reason: "no inverter weights are loaded".into(),
                    })
                    .at("sketch_proxy", &partial)?;
                let proxy =
                    make_sketch_proxy(sketch, inverter, gen).at("sketch_proxy", &partial)?;
                timing(&mut report, "sketch_proxy", t);
                report.mask("local", &proxy.region);
                f = blend_local_sketch(
                    proxy.f_style.as_ref().expect("sketch proxy features"),
                    &f,
                    &proxy.region,
                )
                .at("style_blend", &partial)?;
                m_local = Some(proxy.region);
            }
            f
        } else {
            src.f_src.clone()
        };
        let i_style = synth_style_only(&f_style, &src.w_src, gen).at("style_blend", &partial)?;
        partial = Some(i_style.clone());

        // colour
        let Some(cond) = &req.color else {
            return Ok(EditOutcome {
                image: i_style.clone(),
                report,
                f_style,
                i_style,
                m_global,
                m_local,
                color: None,
            });
        };
        let t = Instant::now();
        let cfg = self.budgets.cfg(self.budgets.color_steps, req.seed);
        let state = optimize_color_proxy(&f_style, &src.w_src, cond, &env, &cfg)
            .at("color_proxy", &partial)?;
        report.stage("color_proxy", &state.optim);
        timing(&mut report, "color_proxy", t);

        let (ch, cw, _) = gen.stage(StageId::Color).shape;
        let m_color = match &req.color_mask {
            Some(m) => resize_mask(m, ch, cw),
            None => resize_mask(&self.backends.parsing.hair_mask(&i_style), ch, cw),
        }
        .at("color_blend", &partial)?;
        report.mask("color", &m_color);
        let state = blend_color_features(state, &f_style, &src.w_src, &m_color, gen)
            .at("color_blend", &partial)?;
        let i_color =
            color_proxy_image(&f_style, &state.w_color, gen).at("color_blend", &partial)?;

        let t = Instant::now();
        let cfg = self.budgets.cfg(self.budgets.final_steps, req.seed);
        let (image, summary) = finalize_color(
            &state,
            &src.w_src,
            &i_style,
            &i_color,
            &m_color,
            gen,
            &self.backends,
            &cfg,
            progress,
        )
        .at("finalize_color", &partial)?;
        report.stage("finalize_color", &summary);
        timing(&mut report, "finalize_color", t);
        Ok(EditOutcome {
            image,
            report,
            f_style,
            i_style,
            m_global,
            m_local,
            color: Some(state),
        })
    }

    /// `prepare_source` followed by `edit`.
    pub fn run_edit(
        &self,
        image: &Image,
        req: &EditRequest,
        progress: &dyn Progress,
    ) -> StageResult<EditOutcome> {
        req.validate(self.gen.as_ref()).at("validate", &None)?;
        let src = self.prepare_source(image, req.seed, progress)?;
        self.edit(&src, req, progress)
    }
}

fn timing(report: &mut EditReport, stage: &str, since: Instant) {
    report.timings.push(StageTiming {
        stage: stage.into(),
        seconds: since.elapsed().as_secs_f64(),
    });
}

/// `F_global = F_tr·M_global + F_bald·(1 − M_global)`.
pub fn blend_global_style(
    f_proxy: &FeatureMap,
    f_bald: &FeatureMap,
    m_global: &BinaryMask,
) -> Result<FeatureMap> {
    style_stage(f_proxy)?;
    blend_features(f_proxy, f_bald, m_global)
}

/// `F_style = F_sketch·M_local + F_global·(1 − M_local)`.
pub fn blend_local_sketch(
    f_sketch: &FeatureMap,
    f_global: &FeatureMap,
    m_local: &BinaryMask,
) -> Result<FeatureMap> {
    style_stage(f_sketch)?;
    blend_features(f_sketch, f_global, m_local)
}

fn style_stage(f: &FeatureMap) -> Result<()> {
    if f.stage() != StageId::Style {
        return Err(Error::shape(format!(
            "expected style-stage features, got {}",
            f.stage()
        )));
    }
    Ok(())
}

/// `G(F_style, w_src[8..=18])`.
pub fn synth_style_only(
    f_style: &FeatureMap,
    w_src: &LatentWPlus,
    gen: &dyn GeneratorBackend,
) -> Result<Image> {
    style_stage(f_style)?;
    gen.synth_from_stage(f_style, &w_src.slice(8, 18), StageId::Output)?
        .into_image()
}

/// `I_color = G(F_style, w_color[8..=18])`.
pub fn color_proxy_image(
    f_style: &FeatureMap,
    w_color: &LatentWPlus,
    gen: &dyn GeneratorBackend,
) -> Result<Image> {
    synth_style_only(f_style, w_color, gen)
}

fn layer_range(first: usize, last: usize) -> std::ops::Range<usize> {
    (first - 1) * LATENT_DIM..last * LATENT_DIM
}

/// Optimizes layers 10–13 of a copy of `w_src` under `L_modal + L_bg`.
pub fn optimize_color_proxy(
    f_style: &FeatureMap,
    w_src: &LatentWPlus,
    cond: &ColorCondition,
    env: &ProxyEnv<'_>,
    opt: &OptimConfig,
) -> Result<ColorProxyState> {
    opt.validate(true)?;
    style_stage(f_style)?;
    let gen = env.gen;
    let b = env.backends;
    let (h, w) = gen.output_size();
    let i_style = synth_style_only(f_style, w_src, gen)?;
    let hair_style = b.parsing.hair_mask(&i_style);
    let target = match cond {
        ColorCondition::Rgb(rgb) => Some(*rgb),
        ColorCondition::Reference(img) => Some(
            masked_mean_color(img, &b.parsing.hair_mask(img))
                .ok_or_else(|| Error::InvalidRequest("colour reference shows no hair".into()))?,
        ),
        ColorCondition::Text(text) if text.trim().is_empty() => {
            return Err(Error::InvalidRequest("colour text is empty".into()))
        }
        ColorCondition::Text(_) => None,
    };
    let text_emb = match cond {
        ColorCondition::Text(text) => Some(std::rc::Rc::new(b.similarity.embed_text(text))),
        _ => None,
    };

    let (o0, o1) = ColorProxyState::OPTIMIZABLE;
    let opt_range = layer_range(o0, o1);
    let before = w_src.as_slice()[layer_range(8, o0 - 1)].to_vec();
    let after = w_src.as_slice()[layer_range(o1 + 1, 18)].to_vec();
    let init = w_src.as_slice()[opt_range.clone()].to_vec();
    let out = minimize(init, opt, "color_proxy", env.progress, |p, step| {
        let g = Graph::new();
        let pv = g.input(p.to_vec());
        let tail = g.concat(&[g.constant(before.clone()), pv, g.constant(after.clone())]);
        let img_var = gen
            .resume_var(
                &g,
                g.constant(f_style.data().to_vec()),
                StageId::Style,
                tail,
                StageId::Output,
            )
            .expect("style features and tail sized by the backend");
        let img = ImageVar::new(img_var, h, w);
        let current =
            Image::from_raw_clamped(h, w, img.data.to_vec()).expect("generator output size");
        let hair_now = b.parsing.hair_mask(&current);
        let modal = match (&target, &text_emb) {
            (Some(t), _) => avg_color_loss_var(&g, img, &hair_now, *t),
            (None, Some(emb)) => {
                let augs = AugmentationSet::sample(
                    AugmentationSet::DEFAULT_COUNT,
                    step_seed(opt.seed, step),
                )
                .expect("default count is positive");
                clip_loss_var(&g, img, emb, &augs, b.similarity.as_ref())
                    .mul_const(env.weights.clip)
            }
            (None, None) => unreachable!("every colour condition has a target or a text"),
        };
        let m_nhair = mask_intersection_nonhair(&hair_style, &hair_now).expect("same resolution");
        let loss = modal.add(bg_loss_var(&g, &i_style, img, &m_nhair));
        (loss.item(), g.backward(loss).wrt(pv))
    });
    if out.flagged {
        log::warn!("colour proxy did not improve on its starting loss");
    }
    let mut w_color = w_src.clone();
    w_color.as_mut_slice()[opt_range].copy_from_slice(&out.params);
    Ok(ColorProxyState {
        w_color,
        f_blend_14: None,
        optim: OptimSummary {
            steps: opt.steps,
            initial_loss: out.initial_loss,
            final_loss: out.loss,
            flagged: out.flagged,
            trajectory: out.trajectory,
        },
    })
}

/// `F_blend = G(F_style, w_color[8..=14])·M + G(F_style, w_src[8..=14])·(1 − M)`.
pub fn blend_color_features(
    mut state: ColorProxyState,
    f_style: &FeatureMap,
    w_src: &LatentWPlus,
    m_color: &BinaryMask,
    gen: &dyn GeneratorBackend,
) -> Result<ColorProxyState> {
    style_stage(f_style)?;
    let edited = gen
        .synth_from_stage(f_style, &state.w_color.slice(8, 14), StageId::Color)?
        .into_features()?;
    let source = gen
        .synth_from_stage(f_style, &w_src.slice(8, 14), StageId::Color)?
        .into_features()?;
    state.f_blend_14 = Some(blend_features(&edited, &source, m_color)?);
    Ok(state)
}

/// Optimizes `F_blend` and layers 15–18 under `L_blend` and synthesizes
/// the final image. The tail starts from `w_src`.
#[allow(clippy::too_many_arguments)]
pub fn finalize_color(
    state: &ColorProxyState,
    w_src: &LatentWPlus,
    i_style: &Image,
    i_color: &Image,
    m_color: &BinaryMask,
    gen: &dyn GeneratorBackend,
    backends: &Backends,
    opt: &OptimConfig,
    progress: &dyn Progress,
) -> Result<(Image, OptimSummary)> {
    opt.validate(true)?;
    let f_blend = state
        .f_blend_14
        .as_ref()
        .ok_or_else(|| Error::invalid("colour features must be blended before finalizing"))?;
    let (h, w) = gen.output_size();
    if !i_style.same_size(i_color) || (i_style.height(), i_style.width()) != (h, w) {
        return Err(Error::shape(
            "style and colour images must match the output size",
        ));
    }
    if (m_color.height(), m_color.width()) != (h, w) {
        return Err(Error::shape(format!(
            "colour mask must be {h}x{w} for the final loss"
        )));
    }
    let n_feat = f_blend.data().len();
    let (t0, t1) = ColorProxyState::TAIL;
    let mut init = f_blend.data().to_vec();
    init.extend_from_slice(&w_src.as_slice()[layer_range(t0, t1)]);
    let pd = backends.patch.as_ref();
    let out = minimize(init, opt, "finalize_color", progress, |p, _| {
        let g = Graph::new();
        let pv = g.input(p.to_vec());
        let img_var = gen
            .resume_var(
                &g,
                pv.slice(0, n_feat),
                StageId::Color,
                pv.slice(n_feat, p.len() - n_feat),
                StageId::Output,
            )
            .expect("colour features and tail sized by the backend");
        let loss = blend_loss_var(
            &g,
            ImageVar::new(img_var, h, w),
            i_color,
            i_style,
            m_color,
            pd,
        );
        (loss.item(), g.backward(loss).wrt(pv))
    });
    if out.flagged {
        log::warn!("final colour blending did not improve on its starting loss");
    }
    let (fh, fw, fc) = f_blend.shape();
    let f14 = FeatureMap::new(StageId::Color, fh, fw, fc, out.params[..n_feat].to_vec())?;
    let tail = LatentSlice::new(t0, out.params[n_feat..].to_vec())?;
    let image = gen
        .synth_from_stage(&f14, &tail, StageId::Output)?
        .into_image()?;
    let summary = OptimSummary {
        steps: opt.steps,
        initial_loss: out.initial_loss,
        final_loss: out.loss,
        flagged: out.flagged,
        trajectory: out.trajectory,
    };
    Ok((image, summary))
}

/// Ablation baseline: edits in latent space by taking layers 1–7 from the
/// proxy code, with no feature blending.
pub fn latent_interpolation_style(
    w_src: &LatentWPlus,
    w_proxy: &LatentWPlus,
    gen: &dyn GeneratorBackend,
) -> Result<FeatureMap> {
    let mut w = w_src.clone();
    let head = layer_range(1, 7);
    w.as_mut_slice()[head.clone()].copy_from_slice(&w_proxy.as_slice()[head]);
    gen.synth_to_stage(&w, StageId::Style)
}

/// Largest absolute difference between two feature maps over cells where
/// `keep` is set.
pub fn max_masked_deviation(a: &FeatureMap, b: &FeatureMap, keep: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() || (keep.height(), keep.width()) != (a.height(), a.width()) {
        return Err(Error::shape("feature maps and mask must share a grid"));
    }
    let c = a.channels();
    Ok(a.data()
        .chunks_exact(c)
        .zip(b.data().chunks_exact(c))
        .zip(keep.data())
        .filter(|(_, &k)| k == 1.0)
        .flat_map(|((x, y), _)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max))
}

/// Parsed hair of an image at the style stage.
pub fn hair_region(
    img: &Image,
    gen: &dyn GeneratorBackend,
    backends: &Backends,
) -> Result<BinaryMask> {
    style_hair_region(img, gen, backends)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::truncation_init;
    use crate::optim::NoProgress;

    fn quick_engine() -> Engine {
        let mut e = Engine::toy();
        e.budgets = Budgets {
            invert_steps: 60,
            fs_steps: 20,
            text_steps: 20,
            reference_steps: 10,
            color_steps: 40,
            final_steps: 10,
            ..Budgets::default()
        };
        e
    }

    fn source(e: &Engine, seed: u64) -> Image {
        let gen = e.gen.as_ref();
        let w = truncation_init(gen.mean_latent(), &gen.sample_random_latent(seed), 0.6).unwrap();
        gen.synthesize(&w).unwrap()
    }

    #[test]
    fn empty_request_is_rejected() {
        let e = quick_engine();
        let err = e
            .run_edit(&source(&e, 1), &EditRequest::default(), &NoProgress)
            .unwrap_err();
        assert_eq!(err.stage, "validate");
        assert!(err.is_validation());
    }

    #[test]
    fn sketch_without_mode_is_rejected() {
        let e = quick_engine();
        let sketch =
            crate::sketch::sketch_from_hair_mask(&BinaryMask::from_fn(32, 32, |y, _| y < 8));
        let req = EditRequest {
            sketch: Some(sketch),
            color: Some(ColorCondition::Rgb([0.5; 3])),
            ..Default::default()
        };
        assert!(req.validate(e.gen.as_ref()).is_err());
    }

    #[test]
    fn style_only_preserves_bald_features_outside_masks() {
        let e = quick_engine();
        let img = source(&e, 2);
        let src = e.prepare_source(&img, 0, &NoProgress).unwrap();
        let req = EditRequest {
            hairstyle: Some(HairstyleCondition::Text("short blonde hair".into())),
            ..Default::default()
        };
        let out = e.edit(&src, &req, &NoProgress).unwrap();
        let m = out.m_global.as_ref().unwrap();
        let keep = m.complement();
        assert_eq!(
            max_masked_deviation(&out.f_style, src.f_bald(), &keep).unwrap(),
            0.0
        );
        let keep_src = m.union(src.m_bald()).unwrap().complement();
        assert_eq!(
            max_masked_deviation(&out.f_style, &src.f_src, &keep_src).unwrap(),
            0.0
        );
        assert_eq!(
            out.image,
            synth_style_only(&out.f_style, &src.w_src, e.gen.as_ref()).unwrap()
        );
    }

    #[test]
    fn color_only_changes_layers_ten_to_thirteen() {
        let e = quick_engine();
        let img = source(&e, 3);
        let src = e.prepare_source(&img, 0, &NoProgress).unwrap();
        let req = EditRequest {
            color: Some(ColorCondition::Rgb([0.6, 0.3, 0.2])),
            ..Default::default()
        };
        let out = e.edit(&src, &req, &NoProgress).unwrap();
        let state = out.color.unwrap();
        for layer in (0..18).filter(|l| !(9..13).contains(l)) {
            assert_eq!(
                state.w_color.layer(layer),
                src.w_src.layer(layer),
                "layer {}",
                layer + 1
            );
        }
        assert!(state.optim.final_loss < state.optim.initial_loss);
    }

    #[test]
    fn zero_color_mask_keeps_source_branch() {
        let e = quick_engine();
        let gen = e.gen.as_ref();
        let img = source(&e, 4);
        let src = e.prepare_source(&img, 0, &NoProgress).unwrap();
        let env = e.env(&NoProgress);
        let state = optimize_color_proxy(
            &src.f_src,
            &src.w_src,
            &ColorCondition::Rgb([0.7, 0.2, 0.2]),
            &env,
            &OptimConfig::new(0.01, 5, 0),
        )
        .unwrap();
        let zero = BinaryMask::filled(32, 32, false);
        let blended = blend_color_features(state, &src.f_src, &src.w_src, &zero, gen).unwrap();
        let base = gen
            .synth_from_stage(&src.f_src, &src.w_src.slice(8, 14), StageId::Color)
            .unwrap()
            .into_features()
            .unwrap();
        assert_eq!(blended.f_blend_14.unwrap(), base);
    }
}
