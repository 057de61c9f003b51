//! Hair sketches: the stroke document, rasterization, the feed-forward
//! sketch-to-latent inverter and its training loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::generator::{truncation_init, GeneratorBackend, ToyGenerator};
use crate::io;
use crate::losses::{parsing_levels, sketch_trainer_loss_var, LossWeights};
use crate::optim::{minimize, OptimConfig, Progress};
use crate::perceptual::{FaceParsingBackend, ImageVar, PatchDistanceBackend};
use crate::tensor::{BinaryMask, Image, LatentWPlus, StageId, LATENT_DIM, NUM_LAYERS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stroke {
    /// Stroke diameter in pixels.
    pub width: f64,
    /// Polyline vertices as `[x, y]` in pixel units; pixel `(r, c)` has
    /// its centre at `[c + 0.5, r + 0.5]`.
    pub points: Vec<[f64; 2]>,
}

/// A stroke document at a fixed canvas size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchInput {
    #[serde(default = "document_version")]
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub strokes: Vec<Stroke>,
    /// Optional path to a pre-rasterized mask, kept for interchange only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

fn document_version() -> u32 {
    1
}

fn segment_distance_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    cx * cx + cy * cy
}

impl SketchInput {
    pub fn new(height: usize, width: usize, strokes: Vec<Stroke>) -> Result<Self> {
        let s = SketchInput {
            version: 1,
            height,
            width,
            strokes,
            mask: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Format {
                what: "sketch document",
                reason: format!("unsupported version {}", self.version),
            });
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("sketch canvas must be nonempty"));
        }
        for (i, s) in self.strokes.iter().enumerate() {
            if !(s.width > 0.0) || !s.width.is_finite() {
                return Err(Error::invalid(format!("stroke {i} has width {}", s.width)));
            }
            if s.points.is_empty() || s.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "stroke {i} needs at least one finite point"
                )));
            }
        }
        Ok(())
    }

    /// Pixels whose centre lies within half a stroke width of a polyline.
    pub fn raster(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            self.strokes.iter().any(|s| {
                let r_sq = (s.width / 2.0).powi(2);
                if s.points.len() == 1 {
                    return segment_distance_sq(p, s.points[0], s.points[0]) <= r_sq;
                }
                s.points
                    .windows(2)
                    .any(|seg| segment_distance_sq(p, seg[0], seg[1]) <= r_sq)
            })
        })
    }

    /// Keeps each stroke with probability `1 − p`.
    pub fn drop_strokes(&self, p: f64, rng: &mut impl Rng) -> SketchInput {
        let strokes = if p <= 0.0 {
            self.strokes.clone()
        } else {
            self.strokes
                .iter()
                .filter(|_| !rng.random_bool(p.min(1.0)))
                .cloned()
                .collect()
        };
        SketchInput {
            strokes,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "sketch document",
            reason: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: SketchInput = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "sketch document",
            reason: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&io::load_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_text(path, &self.to_json()?)
    }
}

/// Side of the coverage grid the inverter reads.
pub const GRID: usize = 8;

/// Fraction of each grid cell covered by strokes.
pub fn raster_features(raster: &BinaryMask) -> Vec<f64> {
    let (h, w) = (raster.height(), raster.width());
    let mut out = Vec::with_capacity(GRID * GRID);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let (y0, y1) = (
                gy * h / GRID,
                ((gy + 1) * h / GRID).max(gy * h / GRID + 1).min(h),
            );
            let (x0, x1) = (
                gx * w / GRID,
                ((gx + 1) * w / GRID).max(gx * w / GRID + 1).min(w),
            );
            let mut on = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    on += raster.data()[y * w + x];
                }
            }
            out.push(on / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

const CODE_LEN: usize = NUM_LAYERS * LATENT_DIM;
const FEATURES: usize = GRID * GRID;

/// Linear map from stroke coverage to a W+ code: `w = b + Wᵀ·f`.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchInverter {
    height: usize,
    width: usize,
    /// `FEATURES × CODE_LEN`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SketchInverter {
    /// Maps every sketch to the generator's mean code.
    pub fn at_mean(gen: &dyn GeneratorBackend) -> Self {
        let (height, width) = gen.output_size();
        SketchInverter {
            height,
            width,
            weights: vec![0.0; FEATURES * CODE_LEN],
            bias: LatentWPlus::broadcast(gen.mean_latent()).into_vec(),
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    fn with_params(&self, mut p: Vec<f64>) -> Self {
        let bias = p.split_off(FEATURES * CODE_LEN);
        SketchInverter {
            weights: p,
            bias,
            ..*self
        }
    }

    fn code_from(weights: &[f64], bias: &[f64], f: &[f64]) -> Vec<f64> {
        let mut w = bias.to_vec();
        for (i, &fi) in f.iter().enumerate() {
            if fi != 0.0 {
                let row = &weights[i * CODE_LEN..(i + 1) * CODE_LEN];
                w.iter_mut().zip(row).for_each(|(a, r)| *a += fi * r);
            }
        }
        w
    }

    /// One feed-forward evaluation.
    pub fn invert(&self, sketch: &SketchInput) -> Result<LatentWPlus> {
        if (sketch.height, sketch.width) != (self.height, self.width) {
            return Err(Error::shape(format!(
                "sketch canvas {}x{} does not match inverter resolution {}x{}",
                sketch.height, sketch.width, self.height, self.width
            )));
        }
        let f = raster_features(&sketch.raster());
        LatentWPlus::from_flat(Self::code_from(&self.weights, &self.bias, &f))
    }

    /// `HPSI` | u16 version | u32 height | u32 width | u32 features |
    /// u32 code length | f32 weights | f32 bias.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22 + 4 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(b"HPSI");
        out.extend_from_slice(&1u16.to_le_bytes());
        for v in [self.height, self.width, FEATURES, CODE_LEN] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            what: "sketch inverter",
            reason: reason.to_string(),
        };
        if bytes.len() < 22 || &bytes[..4] != b"HPSI" {
            return Err(bad("bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != 1 {
            return Err(bad("unsupported version"));
        }
        let u = |i: usize| {
            u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize
        };
        let (height, width, features, code) = (u(0), u(1), u(2), u(3));
        if features != FEATURES || code != CODE_LEN {
            return Err(bad("layout does not match this build"));
        }
        let body = &bytes[22..];
        if body.len() != 4 * (FEATURES + 1) * CODE_LEN {
            return Err(bad("truncated or oversized weight block"));
        }
        let mut vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let bias = vals.split_off(FEATURES * CODE_LEN);
        Ok(SketchInverter {
            height,
            width,
            weights: vals,
            bias,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&io::load_bytes(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_bytes(path, &self.encode())
    }
}

#[derive(Clone, Debug)]
pub struct SketchPair {
    pub name: String,
    pub sketch: SketchInput,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchTrainConfig {
    pub optim: OptimConfig,
    /// Per-stroke removal probability during training.
    pub dropout: f64,
}

impl SketchTrainConfig {
    pub const DEFAULT_DROPOUT: f64 = 0.3;
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn new(steps: usize, seed: u64) -> Self {
        SketchTrainConfig {
            optim: OptimConfig::new(Self::DEFAULT_LR, steps, seed),
            dropout: Self::DEFAULT_DROPOUT,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SketchTraining {
    pub inverter: SketchInverter,
    /// Loss of the sample drawn at each step, then the final sample loss.
    pub step_losses: Vec<f64>,
    /// Dataset-mean loss with full sketches, before and after training.
    pub initial_mean_loss: f64,
    pub final_mean_loss: f64,
    /// The sketch each step trained on, after stroke dropout.
    pub stroke_counts: Vec<usize>,
}

struct Prepared {
    sketch: SketchInput,
    image: Image,
    levels: Vec<Vec<f64>>,
}

fn sample_loss(
    code: Vec<f64>,
    p: &Prepared,
    gen: &dyn GeneratorBackend,
    parsing: &dyn FaceParsingBackend,
    pd: &dyn PatchDistanceBackend,
    weights: &LossWeights,
) -> (f64, Vec<f64>) {
    let (h, w) = gen.output_size();
    let g = Graph::new();
    let wv = g.input(code);
    let pred = ImageVar::new(gen.synth_var(&g, wv, StageId::Output), h, w);
    let loss = sketch_trainer_loss_var(&g, pred, &p.image, &p.levels, parsing, pd, weights);
    (loss.item(), g.backward(loss).wrt(wv))
}

/// Mean trainer loss of `inv` over full (undropped) sketches.
pub fn dataset_loss(
    inv: &SketchInverter,
    pairs: &[SketchPair],
    gen: &dyn GeneratorBackend,
    parsing: &dyn FaceParsingBackend,
    pd: &dyn PatchDistanceBackend,
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for pair in pairs {
        let pred = gen.synthesize(&inv.invert(&pair.sketch)?)?;
        total += crate::losses::sketch_trainer_loss(&pred, &pair.image, parsing, pd, weights)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains the inverter on one randomly drawn pair per step.
pub fn train_sketch_inverter(
    pairs: &[SketchPair],
    gen: &dyn GeneratorBackend,
    parsing: &dyn FaceParsingBackend,
    pd: &dyn PatchDistanceBackend,
    weights: &LossWeights,
    cfg: &SketchTrainConfig,
    progress: &dyn Progress,
) -> Result<SketchTraining> {
    if pairs.is_empty() {
        return Err(Error::invalid("sketch training needs a nonempty dataset"));
    }
    cfg.optim.validate(false)?;
    weights.validate()?;
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::invalid(format!(
            "stroke dropout must lie in [0, 1), got {}",
            cfg.dropout
        )));
    }
    let (h, w) = gen.output_size();
    let prepared: Vec<Prepared> = pairs
        .iter()
        .map(|p| {
            if (p.sketch.height, p.sketch.width) != (h, w)
                || (p.image.height(), p.image.width()) != (h, w)
            {
                return Err(Error::shape(format!("pair `{}` is not {h}x{w}", p.name)));
            }
            Ok(Prepared {
                sketch: p.sketch.clone(),
                image: p.image.clone(),
                levels: parsing_levels(&p.image, parsing),
            })
        })
        .collect::<Result<_>>()?;

    let start = SketchInverter::at_mean(gen);
    let initial_mean_loss = dataset_loss(&start, pairs, gen, parsing, pd, weights)?;
    let mut stroke_counts = Vec::with_capacity(cfg.optim.steps + 1);
    let out = minimize(
        start.params(),
        &cfg.optim,
        "train_sketch",
        progress,
        |params, step| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::losses::step_seed(cfg.optim.seed, step));
            let item = &prepared[rng.random_range(0..prepared.len())];
            let sketch = item.sketch.drop_strokes(cfg.dropout, &mut rng);
            stroke_counts.push(sketch.strokes.len());
            let f = raster_features(&sketch.raster());
            let (loss, dw) = sample_loss(
                SketchInverter::code_from(params, &params[FEATURES * CODE_LEN..], &f),
                item,
                gen,
                parsing,
                pd,
                weights,
            );
            let mut grad = vec![0.0; params.len()];
            for (i, &fi) in f.iter().enumerate() {
                if fi != 0.0 {
                    grad[i * CODE_LEN..(i + 1) * CODE_LEN]
                        .iter_mut()
                        .zip(&dw)
                        .for_each(|(g, d)| *g = fi * d);
                }
            }
            grad[FEATURES * CODE_LEN..].copy_from_slice(&dw);
            (loss, grad)
        },
    );
    let inverter = start.with_params(out.params);
    let final_mean_loss = dataset_loss(&inverter, pairs, gen, parsing, pd, weights)?;
    Ok(SketchTraining {
        inverter,
        step_losses: out.trajectory,
        initial_mean_loss,
        final_mean_loss,
        stroke_counts,
    })
}

/// Horizontal strokes every third row of the hair region plus one along its
/// lower edge.
pub fn sketch_from_hair_mask(hair: &BinaryMask) -> SketchInput {
    let (h, w) = (hair.height(), hair.width());
    let rows: Vec<usize> = (0..h).filter(|&y| (0..w).any(|x| hair.get(y, x))).collect();
    let line = |y: usize| {
        let xs: Vec<usize> = (0..w).filter(|&x| hair.get(y, x)).collect();
        let (x0, x1) = (*xs.first().unwrap_or(&0), *xs.last().unwrap_or(&(w - 1)));
        Stroke {
            width: 1.0,
            points: vec![
                [x0 as f64 + 0.5, y as f64 + 0.5],
                [x1 as f64 + 0.5, y as f64 + 0.5],
            ],
        }
    };
    let mut strokes: Vec<Stroke> = rows
        .iter()
        .copied()
        .filter(|y| y % 3 == 0)
        .map(line)
        .collect();
    match rows.last() {
        Some(&last) if last % 3 != 0 => strokes.push(line(last)),
        None => strokes.push(line(0)),
        _ => {}
    }
    SketchInput::new(h, w, strokes).expect("generated strokes are valid")
}

/// Procedural pairs from the toy generator: codes near the mean with a
/// random hair-band height, each paired with a sketch of its hair region.
pub fn generate_toy_dataset(
    gen: &ToyGenerator,
    parsing: &dyn FaceParsingBackend,
    count: usize,
    seed: u64,
) -> Result<Vec<SketchPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = gen.hair_direction().to_vec();
    (0..count)
        .map(|i| {
            let random = gen.sample_random_latent(rng.random());
            let mut w = truncation_init(gen.mean_latent(), &random, 0.05)?;
            let shift: f64 = rng.random_range(-0.9..0.9);
            for layer in 2..5 {
                w.layer_mut(layer)
                    .iter_mut()
                    .zip(&dir)
                    .for_each(|(v, d)| *v += shift * d);
            }
            let image = gen.synthesize(&w)?;
            let sketch = sketch_from_hair_mask(&parsing.hair_mask(&image));
            Ok(SketchPair {
                name: format!("pair_{i:04}"),
                sketch,
                image,
            })
        })
        .collect()
}

/// Writes `<name>.sketch` and `<name>.png` for every pair.
pub fn save_dataset(dir: &Path, pairs: &[SketchPair]) -> Result<()> {
    for p in pairs {
        p.sketch.save(&dir.join(format!("{}.sketch", p.name)))?;
        io::save_image(&dir.join(format!("{}.png", p.name)), &p.image)?;
    }
    Ok(())
}

/// Reads every `<name>.sketch` with a matching `<name>.png`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<SketchPair>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "sketch").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    names.sort();
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let png = dir.join(format!("{name}.png"));
        if !png.exists() {
            log::warn!("skipping {name}: no matching image");
            continue;
        }
        pairs.push(SketchPair {
            sketch: SketchInput::load(&dir.join(format!("{name}.sketch")))?,
            image: io::load_image(&png)?,
            name,
        });
    }
    Ok(pairs)
}
