//! Perceptual model interfaces and their toy stand-ins.
//!
//! Every backend works on graph variables so losses built from them can be
//! differentiated back to latents. Value-level helpers wrap a throwaway
//! graph. The toy backends read the toy generator's colour encoding:
//! per-pixel luminance gives hair occupancy and the two chroma axes carry
//! skin, background and hair colour.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SparseMatrix, Var};
use crate::error::{Error, Result};
use crate::generator::{BASE_LUMA, CHROMA_A, CHROMA_B, CHROMA_SCALE, HAIR_LUMA};
use crate::tensor::{BinaryMask, FeatureMap, Image};

/// An RGB image (HWC) living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ImageVar<'g> {
    pub data: Var<'g>,
    pub height: usize,
    pub width: usize,
}

impl<'g> ImageVar<'g> {
    pub fn new(data: Var<'g>, height: usize, width: usize) -> Self {
        assert_eq!(data.len(), height * width * 3, "image var length");
        ImageVar {
            data,
            height,
            width,
        }
    }

    pub fn constant(g: &'g Graph, img: &Image) -> Self {
        Self::new(g.constant(img.data().to_vec()), img.height(), img.width())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Channel `k` as an `h·w` plane.
    pub fn channel(&self, k: usize) -> Var<'g> {
        let idx: Vec<usize> = (0..self.pixels()).map(|p| p * 3 + k).collect();
        self.data.select(Rc::new(idx))
    }

    /// Multiplies every channel by per-pixel weights living on the graph.
    pub fn weighted(&self, per_pixel: Var<'g>) -> Self {
        assert_eq!(per_pixel.len(), self.pixels(), "weight plane length");
        let idx: Vec<usize> = (0..self.pixels() * 3).map(|i| i / 3).collect();
        ImageVar {
            data: self.data.mul(per_pixel.select(Rc::new(idx))),
            ..*self
        }
    }

    /// Multiplies every channel by a per-pixel mask.
    pub fn masked(&self, m: &BinaryMask) -> Self {
        assert_eq!(
            (m.height(), m.width()),
            (self.height, self.width),
            "mask resolution"
        );
        let w: Vec<f64> = m.data().iter().flat_map(|&v| [v, v, v]).collect();
        let g = self.data.graph();
        ImageVar {
            data: self.data.mul(g.constant(w)),
            ..*self
        }
    }
}

/// A feature tensor (HWC) living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVar<'g> {
    pub data: Var<'g>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Gram matrix `FᵀF / P` of an HWC map, row-major `c × c`.
pub fn gram_var<'g>(f: FeatureVar<'g>) -> Var<'g> {
    let p = f.height * f.width;
    let c = f.channels;
    let transpose: Vec<usize> = (0..c * p).map(|i| (i % p) * c + i / p).collect();
    let ft = f.data.select(Rc::new(transpose));
    ft.matmul(f.data, c, p, c).mul_const(1.0 / p as f64)
}

/// Channel Gram matrix of a feature map, normalized by pixel count.
pub fn gram_matrix(f: &FeatureMap) -> Vec<f64> {
    let g = Graph::new();
    let (height, width, channels) = f.shape();
    gram_var(FeatureVar {
        data: g.constant(f.data().to_vec()),
        height,
        width,
        channels,
    })
    .to_vec()
}

pub trait TextImageSimilarityBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Unit-norm image embedding.
    fn embed_image_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Var<'g>;

    /// Unit-norm text embedding.
    fn embed_text(&self, text: &str) -> Vec<f64>;

    fn embed_image(&self, img: &Image) -> Vec<f64> {
        let g = Graph::new();
        self.embed_image_var(&g, ImageVar::constant(&g, img))
            .to_vec()
    }

    fn similarity(&self, text: &str, img: &Image) -> f64 {
        dot(&self.embed_image(img), &self.embed_text(text))
    }
}

pub trait KeypointBackend: Send + Sync {
    fn name(&self) -> &str;

    fn num_keypoints(&self) -> usize;

    /// Flat `N_k × 3` points.
    fn extract_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Var<'g>;

    fn extract(&self, img: &Image) -> Vec<[f64; 3]> {
        let g = Graph::new();
        self.extract_var(&g, ImageVar::constant(&g, img))
            .to_vec()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Background,
    Face,
    Hair,
    Ear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Label>,
}

impl LabelMap {
    pub fn mask_of(&self, pick: impl Fn(Label) -> bool) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| {
            pick(self.labels[y * self.width + x])
        })
    }
}

pub trait FaceParsingBackend: Send + Sync {
    fn name(&self) -> &str;

    fn parse(&self, img: &Image) -> LabelMap;

    /// Differentiable per-pixel hair probability.
    fn soft_hair_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Var<'g>;

    /// Five semantic feature levels, coarsening with depth.
    fn multi_level_features_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Vec<Var<'g>>;

    fn hair_mask(&self, img: &Image) -> BinaryMask {
        self.parse(img).mask_of(|l| l == Label::Hair)
    }

    fn ear_mask(&self, img: &Image) -> BinaryMask {
        self.parse(img).mask_of(|l| l == Label::Ear)
    }

    fn nonhair_mask(&self, img: &Image) -> BinaryMask {
        self.parse(img).mask_of(|l| l != Label::Hair)
    }

    /// Hair and ear pixels: the region a balding edit may repaint.
    fn hair_and_ear_mask(&self, img: &Image) -> BinaryMask {
        self.parse(img)
            .mask_of(|l| matches!(l, Label::Hair | Label::Ear))
    }
}

pub trait PerceptualFeatureBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Exactly four layers, shallow to deep.
    fn features_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Vec<FeatureVar<'g>>;
}

pub trait PatchDistanceBackend: Send + Sync {
    fn name(&self) -> &str;

    fn distance_var<'g>(&self, g: &'g Graph, a: ImageVar<'g>, b: ImageVar<'g>) -> Var<'g>;

    fn distance(&self, a: &Image, b: &Image) -> f64 {
        let g = Graph::new();
        self.distance_var(&g, ImageVar::constant(&g, a), ImageVar::constant(&g, b))
            .item()
    }
}

pub trait IdentityBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Unit-norm identity embedding.
    fn embed_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Var<'g>;

    fn embed(&self, img: &Image) -> Vec<f64> {
        let g = Graph::new();
        self.embed_var(&g, ImageVar::constant(&g, img)).to_vec()
    }
}

/// The full set of perceptual models used by the engine.
#[derive(Clone)]
pub struct Backends {
    pub similarity: Arc<dyn TextImageSimilarityBackend>,
    pub keypoints: Arc<dyn KeypointBackend>,
    pub parsing: Arc<dyn FaceParsingBackend>,
    pub perceptual: Arc<dyn PerceptualFeatureBackend>,
    pub patch: Arc<dyn PatchDistanceBackend>,
    pub identity: Arc<dyn IdentityBackend>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("similarity", &self.similarity.name())
            .field("keypoints", &self.keypoints.name())
            .field("parsing", &self.parsing.name())
            .field("perceptual", &self.perceptual.name())
            .field("patch", &self.patch.name())
            .field("identity", &self.identity.name())
            .finish()
    }
}

/// Backend names as they appear under `[backends]` in the config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendNames {
    pub similarity: String,
    pub keypoints: String,
    pub parsing: String,
    pub perceptual: String,
    pub patch: String,
    pub identity: String,
}

impl Default for BackendNames {
    fn default() -> Self {
        let toy = || "toy".to_string();
        BackendNames {
            similarity: toy(),
            keypoints: toy(),
            parsing: toy(),
            perceptual: toy(),
            patch: toy(),
            identity: toy(),
        }
    }
}

fn pick<T: ?Sized>(role: &str, name: &str, toy: Arc<T>) -> Result<Arc<T>> {
    if name == "toy" {
        Ok(toy)
    } else {
        Err(Error::BackendUnavailable {
            name: name.to_string(),
            reason: format!("no `{name}` plugin is registered for the {role} role"),
        })
    }
}

impl Backends {
    pub fn toy() -> Self {
        Backends {
            similarity: Arc::new(ToySimilarity),
            keypoints: Arc::new(ToyKeypoints),
            parsing: Arc::new(ToyParser),
            perceptual: Arc::new(ToyPerceptual::default()),
            patch: Arc::new(ToyPatchDistance),
            identity: Arc::new(ToyIdentity),
        }
    }

    pub fn from_names(names: &BackendNames) -> Result<Self> {
        let toy = Self::toy();
        Ok(Backends {
            similarity: pick("similarity", &names.similarity, toy.similarity)?,
            keypoints: pick("keypoints", &names.keypoints, toy.keypoints)?,
            parsing: pick("parsing", &names.parsing, toy.parsing)?,
            perceptual: pick("perceptual", &names.perceptual, toy.perceptual)?,
            patch: pick("patch", &names.patch, toy.patch)?,
            identity: pick("identity", &names.identity, toy.identity)?,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Toy colour decoding shared by the toy backends.

const SIM_CHROMA_GAIN: f64 = 1.5;
const SIM_BAND_GAIN: f64 = 3.0;
const SIM_BAND_CENTER: f64 = 0.3;
const FACE_SHARPNESS: f64 = 6.0;
const MASS_EPS: f64 = 1e-3;

/// Per-pixel planes decoded from a toy-encoded image.
struct Decoded<'g> {
    /// Hair occupancy, exact for generator output.
    occ: Var<'g>,
    /// Chroma coordinates in units of the generator's tanh outputs.
    chroma_a: Var<'g>,
    chroma_b: Var<'g>,
}

fn decode<'g>(img: ImageVar<'g>) -> Decoded<'g> {
    let (r, gr, b) = (img.channel(0), img.channel(1), img.channel(2));
    let luma_sum = r.add(gr).add(b);
    let occ = luma_sum
        .add_const(-3.0 * BASE_LUMA)
        .mul_const(1.0 / (3.0 * (HAIR_LUMA - BASE_LUMA)));
    let axis = |e: [f64; 3]| {
        r.mul_const(e[0])
            .add(gr.mul_const(e[1]))
            .add(b.mul_const(e[2]))
            .mul_const(1.0 / CHROMA_SCALE)
    };
    Decoded {
        occ,
        chroma_a: axis(CHROMA_A),
        chroma_b: axis(CHROMA_B),
    }
}

/// Soft face weight: non-hair pixels with skin-coloured chroma.
fn face_weight<'g>(d: &Decoded<'g>) -> Var<'g> {
    d.occ
        .one_minus()
        .mul(d.chroma_a.mul_const(FACE_SHARPNESS).sigmoid())
}

fn weighted_mean<'g>(values: Var<'g>, weights: Var<'g>) -> Var<'g> {
    values
        .mul(weights)
        .sum()
        .div(weights.sum().add_const(MASS_EPS))
}

fn text_hash(text: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hair chroma `(a, b)` and hair-band fraction a text hashes to.
pub fn toy_text_target(text: &str) -> (f64, f64, f64) {
    let h = text_hash(text);
    let unit = |shift: u32| ((h >> shift) & 0xffff) as f64 / 65535.0;
    let a = -0.7 + 1.4 * unit(0);
    let b = -0.7 + 1.4 * unit(16);
    let band = (2 + (h >> 32) % 6) as f64 / 16.0;
    (a, b, band)
}

fn stats_embedding(a: f64, b: f64, band: f64) -> Vec<f64> {
    let v = [
        1.0,
        SIM_CHROMA_GAIN * a,
        SIM_CHROMA_GAIN * b,
        SIM_BAND_GAIN * (band - SIM_BAND_CENTER),
    ];
    let n = dot(&v, &v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Renders the image a text's toy embedding is maximised by: a hair band of
/// the target height and colour over a plain background.
pub fn render_target(text: &str, height: usize, width: usize) -> Image {
    let (a, b, band) = toy_text_target(text);
    let rows = (band * height as f64).round() as usize;
    let pixel = |luma: f64, ca: f64, cb: f64| -> [f64; 3] {
        std::array::from_fn(|k| luma + CHROMA_SCALE * (ca * CHROMA_A[k] + cb * CHROMA_B[k]))
    };
    let hair = pixel(HAIR_LUMA, a, b);
    let bg = pixel(BASE_LUMA, -0.6, 0.0);
    let data = (0..height * width)
        .flat_map(|p| if p / width < rows { hair } else { bg })
        .collect();
    Image::new(height, width, data).expect("target colours lie inside the unit cube")
}

/// Cosine between a text's toy embedding and an image's.
pub fn toy_text_similarity(text: &str, image: &Image) -> f64 {
    ToySimilarity.similarity(text, image)
}

/// Scores hair colour and hair-band height against a hashed text target.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToySimilarity;

impl TextImageSimilarityBackend for ToySimilarity {
    fn name(&self) -> &str {
        "toy"
    }

    fn embed_image_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Var<'g> {
        let d = decode(img);
        let a = weighted_mean(d.chroma_a, d.occ);
        let b = weighted_mean(d.chroma_b, d.occ);
        let band = d.occ.mean();
        g.concat(&[
            g.scalar(1.0),
            a.mul_const(SIM_CHROMA_GAIN),
            b.mul_const(SIM_CHROMA_GAIN),
            band.add_const(-SIM_BAND_CENTER).mul_const(SIM_BAND_GAIN),
        ])
        .normalize()
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let (a, b, band) = toy_text_target(text);
        stats_embedding(a, b, band)
    }
}

/// Face centroid plus four quadrant-weighted centroids; the third
/// coordinate is the (weighted) face mass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyKeypoints;

impl ToyKeypoints {
    pub const COUNT: usize = 5;
}

fn pixel_coords(h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let xs = (0..h * w)
        .map(|p| ((p % w) as f64 + 0.5) / w as f64)
        .collect();
    let ys = (0..h * w)
        .map(|p| ((p / w) as f64 + 0.5) / h as f64)
        .collect();
    (xs, ys)
}

fn keypoint_weights(h: usize, w: usize) -> Vec<Vec<f64>> {
    let (xs, ys) = pixel_coords(h, w);
    let quad = |fx: &dyn Fn(f64) -> f64, fy: &dyn Fn(f64) -> f64| -> Vec<f64> {
        xs.iter().zip(&ys).map(|(&x, &y)| fx(x) * fy(y)).collect()
    };
    let lo = |t: f64| 1.0 - t;
    let hi = |t: f64| t;
    vec![
        vec![1.0; h * w],
        quad(&lo, &lo),
        quad(&hi, &lo),
        quad(&lo, &hi),
        quad(&hi, &hi),
    ]
}

impl KeypointBackend for ToyKeypoints {
    fn name(&self) -> &str {
        "toy"
    }

    fn num_keypoints(&self) -> usize {
        Self::COUNT
    }

    fn extract_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Var<'g> {
        let d = decode(img);
        let q = face_weight(&d);
        let (xs, ys) = pixel_coords(img.height, img.width);
        let (xs, ys) = (g.constant(xs), g.constant(ys));
        let mut parts = Vec::with_capacity(3 * Self::COUNT);
        for (k, wk) in keypoint_weights(img.height, img.width)
            .into_iter()
            .enumerate()
        {
            let qk = q.mul(g.constant(wk));
            let mass_scale = if k == 0 { 1.0 } else { 4.0 };
            parts.push(weighted_mean(xs, qk));
            parts.push(weighted_mean(ys, qk));
            parts.push(qk.mean().mul_const(mass_scale));
        }
        g.concat(&parts)
    }
}

/// Closed-form parser for toy-encoded images.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyParser;

impl ToyParser {
    pub const LEVELS: usize = 5;
}

/// Average pooling by `factor` on an HWC buffer; edge blocks average only
/// the cells they cover.
pub fn avg_pool_matrix(
    h: usize,
    w: usize,
    c: usize,
    factor: usize,
) -> (SparseMatrix, usize, usize) {
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut rows = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = oy * factor..((oy + 1) * factor).min(h);
            let xs = ox * factor..((ox + 1) * factor).min(w);
            let count = (ys.len() * xs.len()) as f64;
            for k in 0..c {
                let mut row = Vec::with_capacity(factor * factor);
                for y in ys.clone() {
                    for x in xs.clone() {
                        row.push(((y * w + x) * c + k, 1.0 / count));
                    }
                }
                rows.push(row);
            }
        }
    }
    (SparseMatrix::from_rows(h * w * c, rows), oh, ow)
}

fn interleave<'g>(g: &'g Graph, planes: &[Var<'g>]) -> Var<'g> {
    let c = planes.len();
    let n = planes[0].len();
    let perm: Vec<usize> = (0..n * c).map(|i| (i % c) * n + i / c).collect();
    g.concat(planes).select(Rc::new(perm))
}

impl FaceParsingBackend for ToyParser {
    fn name(&self) -> &str {
        "toy"
    }

    fn parse(&self, img: &Image) -> LabelMap {
        let g = Graph::new();
        let d = decode(ImageVar::constant(&g, img));
        let (occ, ca) = (d.occ.value(), d.chroma_a.value());
        let labels = occ
            .iter()
            .zip(ca.iter())
            .map(|(&o, &a)| {
                if o >= 0.5 {
                    Label::Hair
                } else if a > 0.0 {
                    Label::Face
                } else {
                    Label::Background
                }
            })
            .collect();
        LabelMap {
            height: img.height(),
            width: img.width(),
            labels,
        }
    }

    fn soft_hair_var<'g>(&self, _g: &'g Graph, img: ImageVar<'g>) -> Var<'g> {
        decode(img).occ
    }

    fn multi_level_features_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Vec<Var<'g>> {
        let d = decode(img);
        let q = face_weight(&d);
        let base = interleave(
            g,
            &[
                d.occ.add_const(-0.5),
                q.add_const(-0.5),
                d.chroma_a,
                d.chroma_b,
            ],
        );
        (0..Self::LEVELS)
            .map(|i| {
                if i == 0 {
                    base
                } else {
                    let (m, _, _) = avg_pool_matrix(img.height, img.width, 4, 1 << i);
                    base.linear(Arc::new(m))
                }
            })
            .collect()
    }
}

struct ConvLayer {
    cin: usize,
    cout: usize,
    /// `[cout][cin][ky][kx]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Per-resolution sparse operators of the toy feature network.
struct ConvPlan {
    convs: Vec<(Arc<SparseMatrix>, Rc<Vec<f64>>, usize, usize)>,
    pools: Vec<Arc<SparseMatrix>>,
}

#[derive(Clone)]
struct SendPlan {
    convs: Vec<(Arc<SparseMatrix>, Arc<Vec<f64>>, usize, usize)>,
    pools: Vec<Arc<SparseMatrix>>,
}

/// Four seeded 3×3 conv + tanh layers with 2× average pooling between them.
pub struct ToyPerceptual {
    layers: Vec<ConvLayer>,
    plans: Mutex<HashMap<(usize, usize), SendPlan>>,
}

impl ToyPerceptual {
    pub const SEED: u64 = 0x7667_6700;
    const CHANNELS: [usize; 5] = [3, 4, 6, 8, 8];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, s: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z
                })
                .collect()
        };
        let layers = Self::CHANNELS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                ConvLayer {
                    cin,
                    cout,
                    weights: normal(cout * cin * 9, 1.5 / ((9 * cin) as f64).sqrt()),
                    bias: normal(cout, 0.1),
                }
            })
            .collect();
        ToyPerceptual {
            layers,
            plans: Mutex::new(HashMap::new()),
        }
    }

    fn conv_matrix(layer: &ConvLayer, h: usize, w: usize) -> SparseMatrix {
        let mut rows = Vec::with_capacity(h * w * layer.cout);
        for y in 0..h {
            for x in 0..w {
                for co in 0..layer.cout {
                    let mut row = Vec::with_capacity(9 * layer.cin);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) =
                                (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for ci in 0..layer.cin {
                                let wt = layer.weights[((co * layer.cin + ci) * 3 + ky) * 3 + kx];
                                row.push(((sy as usize * w + sx as usize) * layer.cin + ci, wt));
                            }
                        }
                    }
                    rows.push(row);
                }
            }
        }
        SparseMatrix::from_rows(h * w * layer.cin, rows)
    }

    fn plan(&self, h: usize, w: usize) -> ConvPlan {
        let mut cache = self.plans.lock().unwrap_or_else(|e| e.into_inner());
        let plan = cache.entry((h, w)).or_insert_with(|| {
            let (mut ch, mut cw) = (h, w);
            let mut convs = Vec::new();
            let mut pools = Vec::new();
            for (i, layer) in self.layers.iter().enumerate() {
                if i > 0 {
                    let (m, oh, ow) = avg_pool_matrix(ch, cw, layer.cin, 2);
                    pools.push(Arc::new(m));
                    (ch, cw) = (oh, ow);
                }
                let bias: Vec<f64> = (0..ch * cw)
                    .flat_map(|_| layer.bias.iter().copied())
                    .collect();
                convs.push((
                    Arc::new(Self::conv_matrix(layer, ch, cw)),
                    Arc::new(bias),
                    ch,
                    cw,
                ));
            }
            SendPlan { convs, pools }
        });
        ConvPlan {
            convs: plan
                .convs
                .iter()
                .map(|(m, b, h, w)| (Arc::clone(m), Rc::new(b.as_ref().clone()), *h, *w))
                .collect(),
            pools: plan.pools.clone(),
        }
    }
}

impl Default for ToyPerceptual {
    fn default() -> Self {
        Self::new(Self::SEED)
    }
}

impl PerceptualFeatureBackend for ToyPerceptual {
    fn name(&self) -> &str {
        "toy"
    }

    fn features_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Vec<FeatureVar<'g>> {
        let plan = self.plan(img.height, img.width);
        let mut x = img.data.add_const(-0.5);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, (conv, bias, h, w)) in plan.convs.iter().enumerate() {
            if i > 0 {
                x = x.linear(Arc::clone(&plan.pools[i - 1]));
            }
            x = x
                .linear(Arc::clone(conv))
                .add(g.constant(bias.as_ref().clone()))
                .tanh();
            out.push(FeatureVar {
                data: x,
                height: *h,
                width: *w,
                channels: self.layers[i].cout,
            });
        }
        out
    }
}

/// Mean squared difference of 4×4 block means.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyPatchDistance;

impl ToyPatchDistance {
    pub const BLOCK: usize = 4;
}

impl PatchDistanceBackend for ToyPatchDistance {
    fn name(&self) -> &str {
        "toy"
    }

    fn distance_var<'g>(&self, _g: &'g Graph, a: ImageVar<'g>, b: ImageVar<'g>) -> Var<'g> {
        assert_eq!(
            (a.height, a.width),
            (b.height, b.width),
            "patch distance needs equal sizes"
        );
        let (m, _, _) = avg_pool_matrix(a.height, a.width, 3, Self::BLOCK);
        a.data.sub(b.data).linear(Arc::new(m)).square().mean()
    }
}

/// Keypoints and face chroma as an identity signature.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyIdentity;

impl IdentityBackend for ToyIdentity {
    fn name(&self) -> &str {
        "toy"
    }

    fn embed_var<'g>(&self, g: &'g Graph, img: ImageVar<'g>) -> Var<'g> {
        let kp = ToyKeypoints.extract_var(g, img);
        let d = decode(img);
        let q = face_weight(&d);
        g.concat(&[
            g.scalar(1.0),
            kp.mul_const(2.0),
            weighted_mean(d.chroma_a, q),
            weighted_mean(d.chroma_b, q),
        ])
        .normalize()
    }
}
