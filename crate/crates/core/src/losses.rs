//! Loss terms. Each term has a graph form (`*_var`) used inside optimizers
//! and a value form for reporting and tests.

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SparseMatrix, Var};
use crate::error::{Error, Result};
use crate::perceptual::{
    gram_var, FaceParsingBackend, ImageVar, KeypointBackend, PatchDistanceBackend,
    PerceptualFeatureBackend, TextImageSimilarityBackend,
};
use crate::tensor::{BinaryMask, Image, LatentWPlus};

/// Weights of every loss term. Defaults are the engine's published values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub clip: f64,
    pub pose: f64,
    pub shape: f64,
    pub style: f64,
    pub reg: f64,
    pub mse: f64,
    pub lpips: f64,
    pub m_par: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            clip: 1.0,
            pose: 200.0,
            shape: 1.0,
            style: 2000.0,
            reg: 1.0,
            mse: 0.5,
            lpips: 0.8,
            m_par: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("clip", self.clip),
            ("pose", self.pose),
            ("shape", self.shape),
            ("style", self.style),
            ("reg", self.reg),
            ("mse", self.mse),
            ("lpips", self.lpips),
            ("m_par", self.m_par),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "loss weight `{name}` must be a nonnegative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One random crop-and-rotate, in normalized units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    /// Crop side relative to the image (0.8–1.0).
    pub scale: f64,
    /// Rotation in radians.
    pub angle: f64,
    /// Crop-centre offset in `[-1, 1]` of the slack left by the crop.
    pub shift: (f64, f64),
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: 1.0,
        angle: 0.0,
        shift: (0.0, 0.0),
    };

    /// Bilinear resampling matrix for an `h × w` RGB image; samples outside
    /// the frame clamp to the edge.
    pub fn matrix(&self, h: usize, w: usize) -> SparseMatrix {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let (sin, cos) = self.angle.sin_cos();
        let ty = self.shift.0 * (1.0 - self.scale) * cy;
        let tx = self.shift.1 * (1.0 - self.scale) * cx;
        let mut rows = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let sx = self.scale * (cos * u - sin * v) + cx + tx - 0.5;
                let sy = self.scale * (sin * u + cos * v) + cy + ty - 0.5;
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let sy = sy.clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for k in 0..3 {
                    rows.push(
                        taps.iter()
                            .filter(|t| t.2 != 0.0)
                            .map(|&(ty, tx, wt)| ((ty * w + tx) * 3 + k, wt))
                            .collect(),
                    );
                }
            }
        }
        SparseMatrix::from_rows(h * w * 3, rows)
    }
}

/// The `N` image transforms averaged over by the text-similarity loss.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSet {
    transforms: Vec<Affine>,
}

impl AugmentationSet {
    pub const DEFAULT_COUNT: usize = 4;
    const MAX_ANGLE: f64 = 5.0 * std::f64::consts::PI / 180.0;

    /// `count` random crops (scale 0.8–1.0) with ±5° rotations.
    pub fn sample(count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("augmentation count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transforms = (0..count)
            .map(|_| Affine {
                scale: rng.random_range(0.8..=1.0),
                angle: rng.random_range(-Self::MAX_ANGLE..=Self::MAX_ANGLE),
                shift: (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
            })
            .collect();
        Ok(AugmentationSet { transforms })
    }

    pub fn from_transforms(transforms: Vec<Affine>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::invalid("augmentation count must be at least 1"));
        }
        Ok(AugmentationSet { transforms })
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn transforms(&self) -> &[Affine] {
        &self.transforms
    }

    pub fn apply<'g>(&self, img: ImageVar<'g>) -> Vec<ImageVar<'g>> {
        self.transforms
            .iter()
            .map(|t| {
                let m = Arc::new(t.matrix(img.height, img.width));
                ImageVar::new(img.data.linear(m), img.height, img.width)
            })
            .collect()
    }
}

/// Seed of the augmentation draw at one optimizer step.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(step as u64)
}

/// `(1/N) Σ (1 − s_i)` over per-augmentation similarities.
pub fn clip_loss_from_similarities(sims: &[f64]) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::invalid("augmentation count must be at least 1"));
    }
    Ok(sims.iter().map(|s| 1.0 - s).sum::<f64>() / sims.len() as f64)
}

pub fn clip_loss_var<'g>(
    g: &'g Graph,
    img: ImageVar<'g>,
    text_embedding: &Rc<Vec<f64>>,
    augs: &AugmentationSet,
    sim: &dyn TextImageSimilarityBackend,
) -> Var<'g> {
    let terms: Vec<Var<'g>> = augs
        .apply(img)
        .into_iter()
        .map(|a| {
            sim.embed_image_var(g, a)
                .dot_const(Rc::clone(text_embedding))
                .one_minus()
        })
        .collect();
    g.concat(&terms).mean()
}

pub fn clip_loss(
    image: &Image,
    text: &str,
    augs: &AugmentationSet,
    sim: &dyn TextImageSimilarityBackend,
) -> Result<f64> {
    if augs.is_empty() {
        return Err(Error::invalid("augmentation count must be at least 1"));
    }
    let g = Graph::new();
    let t = Rc::new(sim.embed_text(text));
    Ok(clip_loss_var(&g, ImageVar::constant(&g, image), &t, augs, sim).item())
}

/// `(1/N_k) Σ_k ‖a_k − b_k‖²`.
pub fn pose_loss_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!(
            "keypoint counts {} and {}",
            a.len(),
            b.len()
        )));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / a.len() as f64)
}

/// Pose loss against fixed source keypoints (flat `N_k × 3`).
pub fn pose_loss_var<'g>(
    g: &'g Graph,
    src_points: &[f64],
    gen: ImageVar<'g>,
    kp: &dyn KeypointBackend,
) -> Var<'g> {
    let p = kp.extract_var(g, gen);
    p.sub(g.constant(src_points.to_vec()))
        .square()
        .sum()
        .mul_const(1.0 / kp.num_keypoints() as f64)
}

pub fn pose_loss(src: &Image, gen: &Image, kp: &dyn KeypointBackend) -> Result<f64> {
    pose_loss_points(&kp.extract(src), &kp.extract(gen))
}

/// Gram matrices of the four feature layers of a masked image.
pub fn masked_grams<'g>(
    g: &'g Graph,
    img: ImageVar<'g>,
    m: &BinaryMask,
    pf: &dyn PerceptualFeatureBackend,
) -> Vec<Var<'g>> {
    pf.features_var(g, img.masked(m))
        .into_iter()
        .map(gram_var)
        .collect()
}

/// Style loss against precomputed reference Gram matrices.
pub fn style_loss_var<'g>(
    g: &'g Graph,
    ref_grams: &[Vec<f64>],
    gen: ImageVar<'g>,
    m_gen: &BinaryMask,
    pf: &dyn PerceptualFeatureBackend,
) -> Var<'g> {
    let gen_grams = masked_grams(g, gen, m_gen, pf);
    assert_eq!(gen_grams.len(), ref_grams.len(), "feature layer count");
    let terms: Vec<Var<'g>> = gen_grams
        .into_iter()
        .zip(ref_grams)
        .map(|(gg, rg)| gg.sub(g.constant(rg.clone())).square().sum())
        .collect();
    g.concat(&terms).mean()
}

pub fn reference_grams(
    img: &Image,
    m: &BinaryMask,
    pf: &dyn PerceptualFeatureBackend,
) -> Vec<Vec<f64>> {
    let g = Graph::new();
    masked_grams(&g, ImageVar::constant(&g, img), m, pf)
        .into_iter()
        .map(|v| v.to_vec())
        .collect()
}

pub fn style_loss(
    reference: &Image,
    gen: &Image,
    m_ref: &BinaryMask,
    m_gen: &BinaryMask,
    pf: &dyn PerceptualFeatureBackend,
) -> Result<f64> {
    check_mask(reference, m_ref)?;
    check_mask(gen, m_gen)?;
    let grams = reference_grams(reference, m_ref, pf);
    let g = Graph::new();
    Ok(style_loss_var(&g, &grams, ImageVar::constant(&g, gen), m_gen, pf).item())
}

/// `‖w_t − w_prev‖²` over every entry.
pub fn reg_loss_var<'g>(g: &'g Graph, w_t: Var<'g>, w_prev: &[f64]) -> Var<'g> {
    w_t.sub(g.constant(w_prev.to_vec())).square().sum()
}

pub fn reg_loss(w_t: &LatentWPlus, w_prev: &LatentWPlus) -> f64 {
    w_t.as_slice()
        .iter()
        .zip(w_prev.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

/// Mean squared difference between a soft hair map and a target mask.
pub fn shape_loss_var<'g>(g: &'g Graph, soft_hair: Var<'g>, target: &BinaryMask) -> Var<'g> {
    soft_hair
        .sub(g.constant(target.data().to_vec()))
        .square()
        .mean()
}

pub fn shape_loss(gen_hair: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    same_mask_size(gen_hair, target)?;
    let n = gen_hair.data().len() as f64;
    Ok(gen_hair
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

fn rgb_weights(m: &BinaryMask) -> Vec<f64> {
    m.data().iter().flat_map(|&v| [v, v, v]).collect()
}

/// `‖(I_style − I_color)·M‖²`, summed.
pub fn bg_loss_var<'g>(
    g: &'g Graph,
    i_style: &Image,
    i_color: ImageVar<'g>,
    m: &BinaryMask,
) -> Var<'g> {
    i_color
        .data
        .sub(g.constant(i_style.data().to_vec()))
        .mul(g.constant(rgb_weights(m)))
        .square()
        .sum()
}

pub fn bg_loss(i_style: &Image, i_color: &Image, m: &BinaryMask) -> Result<f64> {
    same_size(i_style, i_color)?;
    check_mask(i_style, m)?;
    let g = Graph::new();
    Ok(bg_loss_var(&g, i_style, ImageVar::constant(&g, i_color), m).item())
}

/// L2 plus patch distance to `i_color` inside the mask and to `i_style`
/// outside, both terms weighted 1.
pub fn blend_loss_var<'g>(
    g: &'g Graph,
    i_final: ImageVar<'g>,
    i_color: &Image,
    i_style: &Image,
    m_color: &BinaryMask,
    pd: &dyn PatchDistanceBackend,
) -> Var<'g> {
    let inside = rgb_weights(m_color);
    let outside: Vec<f64> = inside.iter().map(|v| 1.0 - v).collect();
    let (h, w) = (i_final.height, i_final.width);
    let term = |target: &Image, weights: Vec<f64>| {
        let wv = g.constant(weights);
        let a = i_final.data.mul(wv);
        let b = g.constant(target.data().to_vec()).mul(wv);
        let l2 = a.sub(b).square().mean();
        l2.add(pd.distance_var(g, ImageVar::new(a, h, w), ImageVar::new(b, h, w)))
    };
    term(i_color, inside).add(term(i_style, outside))
}

pub fn blend_loss(
    i_final: &Image,
    i_color: &Image,
    i_style: &Image,
    m_color: &BinaryMask,
    pd: &dyn PatchDistanceBackend,
) -> Result<f64> {
    same_size(i_final, i_color)?;
    same_size(i_final, i_style)?;
    check_mask(i_final, m_color)?;
    let g = Graph::new();
    Ok(blend_loss_var(
        &g,
        ImageVar::constant(&g, i_final),
        i_color,
        i_style,
        m_color,
        pd,
    )
    .item())
}

/// `‖mean_{hair}(gen) − target‖²`; zero for an empty mask.
pub fn avg_color_loss_var<'g>(
    g: &'g Graph,
    gen: ImageVar<'g>,
    hair: &BinaryMask,
    target: [f64; 3],
) -> Var<'g> {
    let count = hair.count();
    if count == 0 {
        return g.scalar(0.0);
    }
    let means: Vec<Var<'g>> = (0..3)
        .map(|k| {
            gen.channel(k)
                .dot_const(Rc::new(hair.data().to_vec()))
                .mul_const(1.0 / count as f64)
                .add_const(-target[k])
        })
        .collect();
    g.concat(&means).square().sum()
}

pub fn avg_color_loss(gen: &Image, hair: &BinaryMask, target: [f64; 3]) -> Result<f64> {
    check_mask(gen, hair)?;
    let g = Graph::new();
    Ok(avg_color_loss_var(&g, ImageVar::constant(&g, gen), hair, target).item())
}

/// Mean colour of the masked pixels, or `None` for an empty mask.
pub fn masked_mean_color(img: &Image, m: &BinaryMask) -> Option<[f64; 3]> {
    let n = m.count();
    if n == 0 {
        return None;
    }
    let mut acc = [0.0; 3];
    for (px, &on) in img.data().chunks_exact(3).zip(m.data()) {
        if on == 1.0 {
            for k in 0..3 {
                acc[k] += px[k];
            }
        }
    }
    Some(acc.map(|v| v / n as f64))
}

/// `Σ_i (1 − cos(P_i(target), P_i(pred)))` over the parser's levels.
pub fn parsing_cosine_loss_var<'g>(
    g: &'g Graph,
    pred: ImageVar<'g>,
    target_levels: &[Vec<f64>],
    parsing: &dyn FaceParsingBackend,
) -> Var<'g> {
    let terms: Vec<Var<'g>> = parsing
        .multi_level_features_var(g, pred)
        .into_iter()
        .zip(target_levels)
        .map(|(p, t)| {
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let unit = Rc::new(t.iter().map(|v| v / norm).collect::<Vec<f64>>());
            p.normalize().dot_const(unit).one_minus()
        })
        .collect();
    g.concat(&terms).sum()
}

pub fn parsing_levels(img: &Image, parsing: &dyn FaceParsingBackend) -> Vec<Vec<f64>> {
    let g = Graph::new();
    parsing
        .multi_level_features_var(&g, ImageVar::constant(&g, img))
        .into_iter()
        .map(|v| v.to_vec())
        .collect()
}

/// Sketch-inverter objective: weighted L2, patch distance and multi-level
/// parsing cosine loss.
pub fn sketch_trainer_loss_var<'g>(
    g: &'g Graph,
    pred: ImageVar<'g>,
    target: &Image,
    target_levels: &[Vec<f64>],
    parsing: &dyn FaceParsingBackend,
    pd: &dyn PatchDistanceBackend,
    w: &LossWeights,
) -> Var<'g> {
    let t = ImageVar::constant(g, target);
    let mse = pred.data.sub(t.data).square().mean();
    let patch = pd.distance_var(g, pred, t);
    let par = parsing_cosine_loss_var(g, pred, target_levels, parsing);
    mse.mul_const(w.mse)
        .add(patch.mul_const(w.lpips))
        .add(par.mul_const(w.m_par))
}

pub fn sketch_trainer_loss(
    pred: &Image,
    target: &Image,
    parsing: &dyn FaceParsingBackend,
    pd: &dyn PatchDistanceBackend,
    w: &LossWeights,
) -> Result<f64> {
    same_size(pred, target)?;
    let levels = parsing_levels(target, parsing);
    let g = Graph::new();
    Ok(sketch_trainer_loss_var(
        &g,
        ImageVar::constant(&g, pred),
        target,
        &levels,
        parsing,
        pd,
        w,
    )
    .item())
}

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(format!(
            "images are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn same_mask_size(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(format!(
            "masks are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn check_mask(img: &Image, m: &BinaryMask) -> Result<()> {
    if (img.height(), img.width()) != (m.height(), m.width()) {
        return Err(Error::shape(format!(
            "mask {}x{} does not match image {}x{}",
            m.height(),
            m.width(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}
