//! Staged generator contract and the deterministic toy generator.
//!
//! A generator is split at two tap points: the style stage (after layer 7)
//! and the color stage (after layer 14). Each segment is exposed on the
//! autodiff graph so losses can be differentiated back to latents or to
//! injected features.

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, SparseMatrix, Var};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Image, LatentSlice, LatentW, LatentWPlus, StageId, LATENT_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorStage {
    pub id: StageId,
    /// `(height, width, channels)`.
    pub shape: (usize, usize, usize),
}

/// Stage table of the full-scale 1024px generator this engine targets.
pub const FULL_SCALE_STAGES: [GeneratorStage; 3] = [
    GeneratorStage {
        id: StageId::Style,
        shape: (32, 32, 512),
    },
    GeneratorStage {
        id: StageId::Color,
        shape: (256, 256, 128),
    },
    GeneratorStage {
        id: StageId::Output,
        shape: (1024, 1024, 3),
    },
];

/// Output of resuming synthesis from injected features.
#[derive(Clone, Debug, PartialEq)]
pub enum StageOutput {
    Features(FeatureMap),
    Image(Image),
}

impl StageOutput {
    pub fn into_features(self) -> Result<FeatureMap> {
        match self {
            StageOutput::Features(f) => Ok(f),
            StageOutput::Image(_) => Err(Error::invalid(
                "expected features, synthesis produced an image",
            )),
        }
    }

    pub fn into_image(self) -> Result<Image> {
        match self {
            StageOutput::Image(i) => Ok(i),
            StageOutput::Features(_) => Err(Error::invalid(
                "expected an image, synthesis stopped at features",
            )),
        }
    }
}

/// A hierarchical generator with injectable features at the style and
/// color stages.
///
/// Implementors supply the three graph segments; the provided methods
/// compose them. Segments must be deterministic, and feeding a segment the
/// features an earlier segment produced must reproduce the direct result.
pub trait GeneratorBackend: Send + Sync {
    fn name(&self) -> &str;

    fn mean_latent(&self) -> &LatentW;

    /// Style, color and output stages, in synthesis order.
    fn stages(&self) -> [GeneratorStage; 3];

    /// Deterministic draw from the latent prior.
    fn sample_random_latent(&self, seed: u64) -> LatentW;

    /// Layers 1–7 (flat, `7·512`) → style-stage features.
    fn style_segment<'g>(&self, g: &'g Graph, head: Var<'g>) -> Var<'g>;

    /// Style features + layers 8–14 → color-stage features.
    fn color_segment<'g>(&self, g: &'g Graph, f_style: Var<'g>, mid: Var<'g>) -> Var<'g>;

    /// Color features + layers 15–18 → RGB image buffer.
    fn output_segment<'g>(&self, g: &'g Graph, f_color: Var<'g>, tail: Var<'g>) -> Var<'g>;

    fn stage(&self, id: StageId) -> GeneratorStage {
        self.stages()
            .into_iter()
            .find(|s| s.id == id)
            .expect("stage table covers every id")
    }

    fn output_size(&self) -> (usize, usize) {
        let (h, w, _) = self.stage(StageId::Output).shape;
        (h, w)
    }

    /// Runs layers `1..=to.last_layer()` of a flat W+ variable.
    fn synth_var<'g>(&self, g: &'g Graph, w: Var<'g>, to: StageId) -> Var<'g> {
        let head = w.slice(0, 7 * LATENT_DIM);
        let f7 = self.style_segment(g, head);
        if to == StageId::Style {
            return f7;
        }
        let f14 = self.color_segment(g, f7, w.slice(7 * LATENT_DIM, 7 * LATENT_DIM));
        if to == StageId::Color {
            return f14;
        }
        self.output_segment(g, f14, w.slice(14 * LATENT_DIM, 4 * LATENT_DIM))
    }

    /// Resumes synthesis from features at `from`. `tail` holds exactly the
    /// layers between the two stages, flat.
    fn resume_var<'g>(
        &self,
        g: &'g Graph,
        f: Var<'g>,
        from: StageId,
        tail: Var<'g>,
        to: StageId,
    ) -> Result<Var<'g>> {
        if to <= from || from == StageId::Output {
            return Err(Error::invalid(format!("cannot resume from {from} to {to}")));
        }
        let needed = (to.last_layer() - from.last_layer()) * LATENT_DIM;
        if tail.len() != needed {
            return Err(Error::shape(format!(
                "resuming {from}→{to} needs layers {}..={}, got {} values",
                from.last_layer() + 1,
                to.last_layer(),
                tail.len()
            )));
        }
        let (h, w, c) = self.stage(from).shape;
        if f.len() != h * w * c {
            return Err(Error::shape(format!("{from} features must be {h}x{w}x{c}")));
        }
        Ok(match (from, to) {
            (StageId::Style, StageId::Color) => self.color_segment(g, f, tail),
            (StageId::Style, StageId::Output) => {
                let f14 = self.color_segment(g, f, tail.slice(0, 7 * LATENT_DIM));
                self.output_segment(g, f14, tail.slice(7 * LATENT_DIM, 4 * LATENT_DIM))
            }
            (StageId::Color, StageId::Output) => self.output_segment(g, f, tail),
            _ => unreachable!("stage order checked above"),
        })
    }

    /// Feature map at `stage` from a full W+ code.
    fn synth_to_stage(&self, w: &LatentWPlus, stage: StageId) -> Result<FeatureMap> {
        let g = Graph::new();
        let out = self.synth_var(&g, g.input(w.as_slice().to_vec()), stage);
        let (h, wd, c) = self.stage(stage).shape;
        FeatureMap::new(stage, h, wd, c, out.to_vec())
    }

    /// Full synthesis.
    fn synthesize(&self, w: &LatentWPlus) -> Result<Image> {
        let g = Graph::new();
        let out = self.synth_var(&g, g.input(w.as_slice().to_vec()), StageId::Output);
        let (h, wd) = self.output_size();
        Image::from_raw_clamped(h, wd, out.to_vec())
    }

    /// Resumes from injected features; `w_tail` must cover the layers
    /// between `from` and `to`.
    fn synth_from_stage(
        &self,
        f: &FeatureMap,
        w_tail: &LatentSlice,
        to: StageId,
    ) -> Result<StageOutput> {
        let from = f.stage();
        if f.shape() != self.stage(from).shape {
            return Err(Error::shape(format!(
                "{from} features {:?} do not match backend shape {:?}",
                f.shape(),
                self.stage(from).shape
            )));
        }
        if to <= from {
            return Err(Error::invalid(format!("cannot resume from {from} to {to}")));
        }
        let tail = w_tail.sub(from.last_layer() + 1, to.last_layer())?;
        let g = Graph::new();
        let out = self.resume_var(
            &g,
            g.input(f.data().to_vec()),
            from,
            g.input(tail.as_slice().to_vec()),
            to,
        )?;
        let (h, wd, c) = self.stage(to).shape;
        Ok(match to {
            StageId::Output => StageOutput::Image(Image::from_raw_clamped(h, wd, out.to_vec())?),
            _ => StageOutput::Features(FeatureMap::new(to, h, wd, c, out.to_vec())?),
        })
    }
}

/// `w_mean + ψ·(w_random − w_mean)` broadcast to all 18 layers.
pub fn truncation_init(w_mean: &LatentW, w_random: &LatentW, psi: f64) -> Result<LatentWPlus> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::invalid(format!(
            "truncation psi must lie in [0, 1], got {psi}"
        )));
    }
    let v = w_mean
        .as_slice()
        .iter()
        .zip(w_random.as_slice())
        .map(|(m, r)| m + psi * (r - m))
        .collect();
    Ok(LatentWPlus::broadcast(&LatentW::new(v)?))
}

/// Interleaves channel-major planes (`planes[c][pixel]`) into HWC.
fn interleave<'g>(g: &'g Graph, planes: &[Var<'g>]) -> Var<'g> {
    let c = planes.len();
    let n = planes[0].len();
    let all = g.concat(planes);
    let perm: Vec<usize> = (0..n * c).map(|i| (i % c) * n + i / c).collect();
    all.select(Rc::new(perm))
}

/// Extracts channel `k` of an HWC buffer, optionally upsampling by
/// nearest neighbour (`src_w` wide, `factor`× larger output).
fn channel_indices(
    src_h: usize,
    src_w: usize,
    channels: usize,
    k: usize,
    factor: usize,
) -> Vec<usize> {
    let (oh, ow) = (src_h * factor, src_w * factor);
    (0..oh * ow)
        .map(|p| {
            let (y, x) = (p / ow / factor, (p % ow) / factor);
            (y * src_w + x) * channels + k
        })
        .collect()
}

// RGB basis of the two chroma axes; both sum to zero so luminance is free
// of chroma.
pub(crate) const CHROMA_A: [f64; 3] = [
    std::f64::consts::FRAC_1_SQRT_2,
    -std::f64::consts::FRAC_1_SQRT_2,
    0.0,
];
pub(crate) const CHROMA_B: [f64; 3] = [
    0.408_248_290_463_863,
    0.408_248_290_463_863,
    -0.816_496_580_927_726,
];
pub(crate) const CHROMA_SCALE: f64 = 0.25;
/// Luminance (per channel) of fully-hair and fully-non-hair pixels.
pub(crate) const HAIR_LUMA: f64 = 0.3;
pub(crate) const BASE_LUMA: f64 = 0.7;

/// Hair logit slope per style cell of band height.
const HAIR_GAIN: f64 = 10.0;
const FACE_GAIN: f64 = 2.5;
const DETAIL_CHANNELS: usize = 7;
const DETAIL_PROJECTIONS: usize = 8;

/// Fixed latent directions (unit vectors) and their offsets `⟨μ, d⟩`.
struct Direction {
    dir: Rc<Vec<f64>>,
    mean_dot: f64,
}

struct Directions {
    face_x: Direction,
    face_y: Direction,
    face_r: Direction,
    skin_a: Direction,
    skin_b: Direction,
    hair: Direction,
    texture: Direction,
    detail: Vec<Direction>,
    bg_a: Direction,
    bg_b: Direction,
    shade: Direction,
    color_a: Direction,
    color_b: Direction,
    leak: Direction,
    tex_gain: Direction,
    out_hair_a: Direction,
    out_hair_b: Direction,
    out_base_a: Direction,
    out_base_b: Direction,
}

/// Raw (Send + Sync) copy of the toy weights; graph-side `Rc`s are rebuilt
/// per call.
#[derive(Clone, Debug)]
struct ToyWeights {
    mean: Vec<f64>,
    dirs: Vec<Vec<f64>>,
    detail_basis: Vec<f64>,
    shade_weights: Vec<f64>,
}

/// Deterministic two-stage toy generator.
///
/// Style features hold a parametric hair band (rows above a latent-driven
/// height), a disc-shaped face, tone parameters and a few per-cell detail
/// channels. The color stage upsamples 4× with strictly per-pixel mixing
/// modulated by layers 8–14; the output segment is a per-pixel colour map
/// modulated by layers 15–18. Pixel luminance encodes hair occupancy
/// exactly (`sum(rgb) = 2.1 − 1.2·o`), which is what lets the toy parser
/// recover the hair band in closed form.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    seed: u64,
    mean: LatentW,
    weights: ToyWeights,
}

impl ToyGenerator {
    pub const STYLE_SHAPE: (usize, usize, usize) = (8, 8, 16);
    pub const COLOR_SHAPE: (usize, usize, usize) = (32, 32, 8);
    pub const OUTPUT_SHAPE: (usize, usize, usize) = (32, 32, 3);
    pub const DEFAULT_SEED: u64 = 0x6861_6972;

    const NAMED_DIRS: usize = 18;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        };
        let mean = normal(LATENT_DIM, 0.5);
        let dirs: Vec<Vec<f64>> = (0..Self::NAMED_DIRS + DETAIL_PROJECTIONS)
            .map(|_| {
                let v = normal(LATENT_DIM, 1.0);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let (sh, sw, _) = Self::STYLE_SHAPE;
        let detail_basis = normal(
            DETAIL_CHANNELS * sh * sw * DETAIL_PROJECTIONS,
            1.0 / (DETAIL_PROJECTIONS as f64).sqrt(),
        );
        let shade_weights = normal(DETAIL_CHANNELS, 0.5);
        ToyGenerator {
            seed,
            mean: LatentW::new(mean.clone()).expect("finite mean"),
            weights: ToyWeights {
                mean,
                dirs,
                detail_basis,
                shade_weights,
            },
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn directions(&self) -> Directions {
        let mk = |i: usize| {
            let d = &self.weights.dirs[i];
            Direction {
                mean_dot: d.iter().zip(&self.weights.mean).map(|(a, b)| a * b).sum(),
                dir: Rc::new(d.clone()),
            }
        };
        Directions {
            face_x: mk(0),
            face_y: mk(1),
            face_r: mk(2),
            skin_a: mk(3),
            skin_b: mk(4),
            hair: mk(5),
            texture: mk(6),
            bg_a: mk(7),
            bg_b: mk(8),
            shade: mk(9),
            color_a: mk(10),
            color_b: mk(11),
            leak: mk(12),
            tex_gain: mk(13),
            out_hair_a: mk(14),
            out_hair_b: mk(15),
            out_base_a: mk(16),
            out_base_b: mk(17),
            detail: (0..DETAIL_PROJECTIONS)
                .map(|k| mk(Self::NAMED_DIRS + k))
                .collect(),
        }
    }

    /// Unit direction that raises the hair band when added to layers 3–5.
    pub fn hair_direction(&self) -> &[f64] {
        &self.weights.dirs[5]
    }

    /// Hair-chroma directions driven by the mean of layers 10–13.
    pub fn hair_color_directions(&self) -> (&[f64], &[f64]) {
        (&self.weights.dirs[10], &self.weights.dirs[11])
    }

    /// Per-pixel hair occupancy `o = σ(c₀)` of color-stage features.
    pub fn hair_occupancy(&self, f_color: &FeatureMap) -> Vec<f64> {
        f_color
            .data()
            .chunks_exact(Self::COLOR_SHAPE.2)
            .map(|c| crate::autodiff::sigmoid(c[0]))
            .collect()
    }

    /// Pixels the generator draws as hair (`o ≥ 0.5`).
    pub fn hair_band(&self, w: &LatentWPlus) -> Result<crate::tensor::BinaryMask> {
        let f14 = self.synth_to_stage(w, StageId::Color)?;
        let (h, wd, _) = Self::COLOR_SHAPE;
        let occ = self.hair_occupancy(&f14);
        Ok(crate::tensor::BinaryMask::from_fn(h, wd, |y, x| {
            occ[y * wd + x] >= 0.5
        }))
    }

    /// Continuous hair-band height in style cells for a W+ code.
    pub fn hair_height(&self, w: &LatentWPlus) -> f64 {
        let d = self.directions();
        let p = (2..5)
            .map(|i| dot(w.layer(i), &d.hair.dir) - d.hair.mean_dot)
            .sum::<f64>()
            / 3.0;
        2.0 + 2.5 * p.tanh()
    }
}

impl Default for ToyGenerator {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project<'g>(layer: Var<'g>, d: &Direction) -> Var<'g> {
    layer.dot_const(Rc::clone(&d.dir)).add_const(-d.mean_dot)
}

fn layer_of<'g>(flat: Var<'g>, i: usize) -> Var<'g> {
    flat.slice(i * LATENT_DIM, LATENT_DIM)
}

/// `exp(−ρ²/2)` where ρ² is the mean squared deviation from the mean code.
fn realism<'g>(g: &'g Graph, layers: Var<'g>, mean: &[f64]) -> Var<'g> {
    let n = layers.len() / LATENT_DIM;
    let tiled: Vec<f64> = (0..n).flat_map(|_| mean.iter().copied()).collect();
    layers
        .sub(g.constant(tiled))
        .square()
        .mean()
        .mul_const(-0.5)
        .exp()
}

impl GeneratorBackend for ToyGenerator {
    fn name(&self) -> &str {
        "toy"
    }

    fn mean_latent(&self) -> &LatentW {
        &self.mean
    }

    fn stages(&self) -> [GeneratorStage; 3] {
        [
            GeneratorStage {
                id: StageId::Style,
                shape: Self::STYLE_SHAPE,
            },
            GeneratorStage {
                id: StageId::Color,
                shape: Self::COLOR_SHAPE,
            },
            GeneratorStage {
                id: StageId::Output,
                shape: Self::OUTPUT_SHAPE,
            },
        ]
    }

    fn sample_random_latent(&self, seed: u64) -> LatentW {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_0c47_1a7e_0001);
        let v = self
            .weights
            .mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + z
            })
            .collect();
        LatentW::new(v).expect("finite sample")
    }

    fn style_segment<'g>(&self, g: &'g Graph, head: Var<'g>) -> Var<'g> {
        let d = self.directions();
        let (sh, sw, _) = Self::STYLE_SHAPE;
        let n = sh * sw;
        let ycs: Vec<f64> = (0..n).map(|i| (i / sw) as f64 + 0.5).collect();
        let xcs: Vec<f64> = (0..n).map(|i| (i % sw) as f64 + 0.5).collect();

        let hair_p = project(layer_of(head, 2), &d.hair)
            .add(project(layer_of(head, 3), &d.hair))
            .add(project(layer_of(head, 4), &d.hair))
            .mul_const(1.0 / 3.0);
        let height = hair_p.tanh().mul_const(2.5).add_const(2.0);
        let ch_hair = height
            .broadcast(n)
            .sub(g.constant(ycs.clone()))
            .mul_const(HAIR_GAIN);
        let ch_hair_slope = g.constant(vec![-HAIR_GAIN; n]);

        let cx = project(layer_of(head, 0), &d.face_x)
            .tanh()
            .mul_const(0.8)
            .add_const(4.0);
        let cy = project(layer_of(head, 0), &d.face_y)
            .tanh()
            .mul_const(0.6)
            .add_const(5.0);
        let radius = project(layer_of(head, 1), &d.face_r)
            .tanh()
            .mul_const(0.5)
            .add_const(2.2);
        let r_b = radius.broadcast(n);
        let dx = g.constant(xcs).sub(cx.broadcast(n));
        let dy = g.constant(ycs).sub(cy.broadcast(n));
        let ch_face = r_b
            .square()
            .sub(dx.square())
            .sub(dy.square())
            .mul_const(FACE_GAIN)
            .div(r_b);
        let ch_face_dx = dx.mul_const(-2.0 * FACE_GAIN).div(r_b);
        let ch_face_dy = dy.mul_const(-2.0 * FACE_GAIN).div(r_b);

        let texture = project(layer_of(head, 5), &d.texture)
            .tanh()
            .mul_const(0.5)
            .add_const(0.5)
            .broadcast(n);
        let real = realism(g, head, &self.weights.mean).broadcast(n);
        let skin_a = project(layer_of(head, 1), &d.skin_a)
            .tanh()
            .mul_const(0.3)
            .add_const(0.8)
            .broadcast(n);
        let skin_b = project(layer_of(head, 1), &d.skin_b)
            .tanh()
            .mul_const(0.3)
            .broadcast(n);

        let q: Vec<Var<'g>> = d
            .detail
            .iter()
            .enumerate()
            .map(|(k, dir)| project(layer_of(head, 5 + k / 4), dir))
            .collect();
        let q = g.concat(&q).tanh();
        let mut planes = vec![
            ch_hair,
            ch_hair_slope,
            ch_face,
            ch_face_dx,
            ch_face_dy,
            texture,
            real,
            skin_a,
            skin_b,
        ];
        for j in 0..DETAIL_CHANNELS {
            let rows = (0..n)
                .map(|cell| {
                    (0..DETAIL_PROJECTIONS)
                        .map(|k| {
                            (
                                k,
                                self.weights.detail_basis[(j * n + cell) * DETAIL_PROJECTIONS + k],
                            )
                        })
                        .collect()
                })
                .collect();
            let basis = std::sync::Arc::new(SparseMatrix::from_rows(DETAIL_PROJECTIONS, rows));
            planes.push(q.linear(basis).tanh().mul_const(0.3));
        }
        interleave(g, &planes)
    }

    fn color_segment<'g>(&self, g: &'g Graph, f_style: Var<'g>, mid: Var<'g>) -> Var<'g> {
        let d = self.directions();
        let (sh, sw, sc) = Self::STYLE_SHAPE;
        let (ch, cw, _) = Self::COLOR_SHAPE;
        let factor = ch / sh;
        let n = ch * cw;
        let up = |k: usize| f_style.select(Rc::new(channel_indices(sh, sw, sc, k, factor)));
        let sub = |i: usize| ((i % factor) as f64 + 0.5) / factor as f64 - 0.5;
        let delta_y = g.constant((0..n).map(|p| sub(p / cw)).collect());
        let delta_x = g.constant((0..n).map(|p| sub(p % cw)).collect());
        let stripe = g.constant(
            (0..n)
                .map(|p| {
                    if (p / cw + p % cw) % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect(),
        );

        let hair_logit = up(0).add(up(1).mul(delta_y));
        let face_logit = up(2).add(up(3).mul(delta_x)).add(up(4).mul(delta_y));
        let face = face_logit.sigmoid();

        // mid layer k is W+ layer 8 + k
        let bg_a = project(layer_of(mid, 0), &d.bg_a)
            .tanh()
            .mul_const(0.3)
            .add_const(-0.8)
            .broadcast(n);
        let bg_b = project(layer_of(mid, 0), &d.bg_b)
            .tanh()
            .mul_const(0.5)
            .broadcast(n);
        let shade = project(layer_of(mid, 1), &d.shade)
            .tanh()
            .mul_const(0.5)
            .add_const(1.0)
            .broadcast(n);
        let color_a = (2..6)
            .map(|i| project(layer_of(mid, i), &d.color_a))
            .reduce(|a, b| a.add(b))
            .expect("four layers")
            .mul_const(0.25);
        let color_b = (2..6)
            .map(|i| project(layer_of(mid, i), &d.color_b))
            .reduce(|a, b| a.add(b))
            .expect("four layers")
            .mul_const(0.25);
        let leak = project(layer_of(mid, 3), &d.leak)
            .tanh()
            .mul_const(0.15)
            .broadcast(n);
        let tex_gain = project(layer_of(mid, 6), &d.tex_gain)
            .tanh()
            .mul_const(0.15)
            .add_const(0.3)
            .broadcast(n);
        let real = realism(g, mid, &self.weights.mean).broadcast(n);

        let detail_rows = (0..n)
            .map(|p| {
                let cell = (p / cw / factor) * sw + (p % cw) / factor;
                (0..DETAIL_CHANNELS)
                    .map(|j| (cell * sc + 9 + j, self.weights.shade_weights[j]))
                    .collect()
            })
            .collect();
        let detail = f_style.linear(std::sync::Arc::new(SparseMatrix::from_rows(
            sh * sw * sc,
            detail_rows,
        )));

        let base_a = up(7).sub(bg_a).mul(face).add(bg_a);
        let base_b = up(8)
            .sub(bg_b)
            .mul(face)
            .add(bg_b)
            .add(leak)
            .add(shade.mul(detail));
        let gain = up(6).mul(real);
        let tex = up(5).mul(stripe).mul(tex_gain);
        interleave(
            g,
            &[
                hair_logit,
                face_logit,
                color_a.broadcast(n),
                color_b.broadcast(n),
                base_a,
                base_b,
                gain,
                tex,
            ],
        )
    }

    fn output_segment<'g>(&self, g: &'g Graph, f_color: Var<'g>, tail: Var<'g>) -> Var<'g> {
        let d = self.directions();
        let (ch, cw, cc) = Self::COLOR_SHAPE;
        let n = ch * cw;
        let c = |k: usize| f_color.select(Rc::new(channel_indices(ch, cw, cc, k, 1)));
        let off = |i: usize, dir: &Direction, s: f64| {
            project(layer_of(tail, i), dir)
                .tanh()
                .mul_const(s)
                .broadcast(n)
        };

        let occ = c(0).sigmoid();
        let tex = c(7);
        let hair_a = c(6).mul(c(2).add(tex).add(off(0, &d.out_hair_a, 0.3)).tanh());
        let hair_b = c(6).mul(c(3).sub(tex).add(off(1, &d.out_hair_b, 0.3)).tanh());
        let base_a = c(4).add(off(2, &d.out_base_a, 0.2)).tanh();
        let base_b = c(5).add(off(3, &d.out_base_b, 0.2)).tanh();
        // Steep gate: mixed boundary pixels carry little hair colour.
        let gate = occ.square().square();
        let chroma_a = hair_a
            .sub(base_a)
            .mul(gate)
            .add(base_a)
            .mul_const(CHROMA_SCALE);
        let chroma_b = hair_b
            .sub(base_b)
            .mul(gate)
            .add(base_b)
            .mul_const(CHROMA_SCALE);
        let luma = occ.mul_const(HAIR_LUMA - BASE_LUMA).add_const(BASE_LUMA);
        let planes: Vec<Var<'g>> = (0..3)
            .map(|k| {
                luma.add(chroma_a.mul_const(CHROMA_A[k]))
                    .add(chroma_b.mul_const(CHROMA_B[k]))
            })
            .collect();
        interleave(g, &planes)
    }
}

/// Picks a generator by config name.
pub fn load_generator(
    backend: &str,
    weights_path: Option<&Path>,
) -> Result<std::sync::Arc<dyn GeneratorBackend>> {
    match backend {
        "toy" => Ok(std::sync::Arc::new(ToyGenerator::default())),
        "pretrained" => {
            let path = weights_path.ok_or_else(|| {
                Error::Config(
                    "generator.weights_path is required for the pretrained backend".into(),
                )
            })?;
            let reason = if path.exists() {
                // The weight container is located, but full-scale synthesis needs an
                // external runtime that this build does not link.
                "no runtime for full-scale generator weights is linked into this build".to_string()
            } else {
                format!("weights file {} not found", path.display())
            };
            Err(Error::BackendUnavailable {
                name: "pretrained".into(),
                reason,
            })
        }
        other => Err(Error::Config(format!(
            "unknown generator backend `{other}`"
        ))),
    }
}

/// W+ layers (one-based, inclusive) that feed `to` when resuming from `from`.
pub fn tail_layers(from: StageId, to: StageId) -> (usize, usize) {
    (from.last_layer() + 1, to.last_layer())
}
