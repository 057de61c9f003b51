//! Fidelity metrics over the non-hair region and a batch harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{truncation_init, GeneratorBackend, ToyGenerator};
use crate::optim::NoProgress;
use crate::perceptual::{FaceParsingBackend, IdentityBackend};
use crate::pipeline::{ColorCondition, EditRequest, Engine, HairstyleCondition};
use crate::recipe::{RecipeFile, Resolve};
use crate::tensor::{mask_intersection_nonhair, BinaryMask, Image};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(a: &Image, b: &Image, m: &BinaryMask) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape("images differ in size"));
    }
    if (m.height(), m.width()) != (a.height(), a.width()) {
        return Err(Error::shape("mask does not match the images"));
    }
    if m.is_empty() {
        return Err(Error::InvalidArgument("metric mask is empty".into()));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over masked pixels and all channels, capped at
/// 100 dB when the MSE falls below 1e-10.
pub fn masked_psnr(a: &Image, b: &Image, m: &BinaryMask) -> Result<f64> {
    check_pair(a, b, m)?;
    let mut sum = 0.0;
    for (i, &mv) in m.data().iter().enumerate() {
        if mv == 1.0 {
            for k in 0..3 {
                sum += (a.data()[i * 3 + k] - b.data()[i * 3 + k]).powi(2);
            }
        }
    }
    let mse = sum / (3 * m.count()) as f64;
    Ok(if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    })
}

fn luma(img: &Image) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Per-pixel SSIM map on luminance. The window is truncated at the border
/// and renormalized.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    if !a.same_size(b) {
        return Err(Error::shape("images differ in size"));
    }
    let (h, w) = (a.height(), a.width());
    let (la, lb) = (luma(a), luma(b));
    let k = gaussian_kernel();
    let r = SSIM_WINDOW / 2;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                let Some(yy) = (y + dy).checked_sub(r).filter(|&v| v < h) else {
                    continue;
                };
                for dx in 0..SSIM_WINDOW {
                    let Some(xx) = (x + dx).checked_sub(r).filter(|&v| v < w) else {
                        continue;
                    };
                    let wt = k[dy] * k[dx];
                    let (p, q) = (la[yy * w + xx], lb[yy * w + xx]);
                    sw += wt;
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (ma, mb) = (ma / sw, mb / sw);
            let va = (saa / sw - ma * ma).max(0.0);
            let vb = (sbb / sw - mb * mb).max(0.0);
            let cov = sab / sw - ma * mb;
            out.push(
                ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2)),
            );
        }
    }
    Ok(out)
}

/// Mean of the SSIM map over masked pixels.
pub fn masked_ssim(a: &Image, b: &Image, m: &BinaryMask) -> Result<f64> {
    check_pair(a, b, m)?;
    let map = ssim_map(a, b)?;
    let total: f64 = map
        .iter()
        .zip(m.data())
        .filter(|(_, &mv)| mv == 1.0)
        .map(|(v, _)| v)
        .sum();
    Ok(total / m.count() as f64)
}

/// SSIM of two constant images, in closed form.
pub fn constant_ssim(c1: f64, c2: f64) -> f64 {
    (2.0 * c1 * c2 + SSIM_C1) / (c1 * c1 + c2 * c2 + SSIM_C1)
}

/// Cosine of the identity embeddings.
pub fn identity_similarity(a: &Image, b: &Image, id: &dyn IdentityBackend) -> f64 {
    let (ea, eb) = (id.embed(a), id.embed(b));
    let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
    let na = ea.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = eb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Pixels parsed as non-hair in both images.
pub fn nonhair_intersection(
    a: &Image,
    b: &Image,
    parsing: &dyn FaceParsingBackend,
) -> Result<BinaryMask> {
    mask_intersection_nonhair(&parsing.hair_mask(a), &parsing.hair_mask(b))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ids: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub runtime_s: f64,
}

/// IDS, masked PSNR and masked SSIM between a source and its edit.
pub fn evaluate(
    src: &Image,
    edited: &Image,
    engine: &Engine,
    runtime_s: f64,
) -> Result<EvalResult> {
    let m = nonhair_intersection(src, edited, engine.backends.parsing.as_ref())?;
    Ok(EvalResult {
        ids: identity_similarity(src, edited, engine.backends.identity.as_ref()),
        psnr_db: masked_psnr(src, edited, &m)?,
        ssim: masked_ssim(src, edited, &m)?,
        runtime_s,
    })
}

#[derive(Clone, Debug)]
pub struct BenchItem {
    pub name: String,
    pub image: Image,
    pub request: EditRequest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub name: String,
    #[serde(flatten)]
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

/// Full-scale numbers the harness is modelled on, for context only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub ids: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub const FULL_SCALE_REFERENCE: ReferenceValues = ReferenceValues {
    ids: 0.84,
    psnr_db: 29.5,
    ssim: 0.91,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub items: Vec<ItemResult>,
    pub skipped: Vec<Skipped>,
    pub aggregate: EvalResult,
    pub full_scale_reference: ReferenceValues,
}

impl BenchmarkReport {
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.items.iter_mut().for_each(|i| i.result.runtime_s = 0.0);
        r.aggregate.runtime_s = 0.0;
        r
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "benchmark report",
            reason: e.to_string(),
        })
    }
}

/// Per-field mean.
pub fn aggregate(results: &[EvalResult]) -> EvalResult {
    if results.is_empty() {
        return EvalResult::default();
    }
    let n = results.len() as f64;
    let mean = |f: fn(&EvalResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    EvalResult {
        ids: mean(|r| r.ids),
        psnr_db: mean(|r| r.psnr_db),
        ssim: mean(|r| r.ssim),
        runtime_s: mean(|r| r.runtime_s),
    }
}

/// Edits every item and scores it against its source. Items that fail to
/// edit are skipped and logged.
pub fn run_benchmark(
    items: &[BenchItem],
    engine: &Engine,
    mut skipped: Vec<Skipped>,
) -> BenchmarkReport {
    let mut results = Vec::new();
    for item in items {
        let t = Instant::now();
        let scored = engine
            .run_edit(&item.image, &item.request, &NoProgress)
            .map_err(|e| e.to_string())
            .and_then(|out| {
                evaluate(&item.image, &out.image, engine, t.elapsed().as_secs_f64())
                    .map_err(|e| e.to_string())
            });
        match scored {
            Ok(result) => results.push(ItemResult {
                name: item.name.clone(),
                result,
            }),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", item.name);
                skipped.push(Skipped {
                    name: item.name.clone(),
                    reason,
                });
            }
        }
    }
    let aggregate = aggregate(&results.iter().map(|r| r.result).collect::<Vec<_>>());
    BenchmarkReport {
        items: results,
        skipped,
        aggregate,
        full_scale_reference: FULL_SCALE_REFERENCE,
    }
}

/// `count` toy sources near the mean, cycling through text, RGB and
/// reference edits.
pub fn toy_benchmark_items(gen: &ToyGenerator, count: usize, seed: u64) -> Result<Vec<BenchItem>> {
    const TEXTS: [&str; 3] = ["short curly hair", "long straight hair", "afro hairstyle"];
    let sample = |s: u64| {
        truncation_init(gen.mean_latent(), &gen.sample_random_latent(s), 0.6)
            .and_then(|w| gen.synthesize(&w))
    };
    (0..count)
        .map(|i| {
            let base = seed.wrapping_mul(1000).wrapping_add(i as u64);
            let image = sample(base)?;
            let mut request = EditRequest {
                seed: base,
                ..Default::default()
            };
            match i % 3 {
                0 => {
                    request.hairstyle = Some(HairstyleCondition::Text(
                        TEXTS[(i / 3) % TEXTS.len()].into(),
                    ))
                }
                1 => request.color = Some(ColorCondition::Rgb([0.45, 0.25, 0.2])),
                _ => {
                    request.hairstyle = Some(HairstyleCondition::Reference(sample(
                        base.wrapping_add(500_000),
                    )?))
                }
            }
            Ok(BenchItem {
                name: format!("toy_{i:03}"),
                image,
                request,
            })
        })
        .collect()
}

/// Dataset spec file: a list of `(name, image, recipe)` entries with paths
/// relative to the spec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub items: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub image: PathBuf,
    pub recipe: PathBuf,
}

/// Loads the items of a dataset spec. Unreadable items are returned as
/// skipped rather than failing the batch.
pub fn load_dataset_spec(path: &Path) -> Result<(Vec<BenchItem>, Vec<Skipped>)> {
    let spec: DatasetSpec =
        toml::from_str(&crate::io::load_text(path)?).map_err(|e| Error::Format {
            what: "dataset spec",
            reason: e.to_string(),
        })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for entry in spec.items {
        let loaded = crate::io::load_image(&dir.join(&entry.image)).and_then(|image| {
            let (recipe, rdir) = RecipeFile::load(&dir.join(&entry.recipe))?;
            Ok((image, recipe.to_request(Resolve::Dir(&rdir))?))
        });
        match loaded {
            Ok((image, request)) => items.push(BenchItem {
                name: entry.name,
                image,
                request,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.name);
                skipped.push(Skipped {
                    name: entry.name,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok((items, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::ToyIdentity;

    fn ramp(seed: u64) -> Image {
        let data = (0..32 * 32 * 3)
            .map(|i| (((i as u64 * 7919 + seed * 104_729) % 1000) as f64 / 1000.0) * 0.8 + 0.1)
            .collect();
        Image::new(32, 32, data).unwrap()
    }

    #[test]
    fn identical_images_hit_the_caps() {
        let a = ramp(1);
        let m = BinaryMask::filled(32, 32, true);
        assert_eq!(masked_psnr(&a, &a, &m).unwrap(), 100.0);
        assert!((masked_ssim(&a, &a, &m).unwrap() - 1.0).abs() < 1e-12);
        assert!((identity_similarity(&a, &a, &ToyIdentity) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_offset_psnr() {
        let a = Image::filled(32, 32, [0.4, 0.5, 0.6]);
        let b = Image::filled(32, 32, [0.5, 0.6, 0.7]);
        let m = BinaryMask::filled(32, 32, true);
        assert!((masked_psnr(&a, &b, &m).unwrap() - 20.0).abs() < 0.01);
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let (a, b) = (ramp(2), ramp(3));
        let m = BinaryMask::from_fn(32, 32, |y, x| (y * 3 + x) % 5 != 0);
        let mut s = 0.0;
        let mut n = 0.0;
        for y in 0..32 {
            for x in 0..32 {
                if m.get(y, x) {
                    let (p, q) = (a.pixel(y, x), b.pixel(y, x));
                    for k in 0..3 {
                        s += (p[k] - q[k]) * (p[k] - q[k]);
                        n += 1.0;
                    }
                }
            }
        }
        let oracle = 10.0 * (n / s).log10();
        assert!((masked_psnr(&a, &b, &m).unwrap() - oracle).abs() < 0.01);
    }

    #[test]
    fn constant_images_match_closed_form() {
        let a = Image::filled(32, 32, [0.2; 3]);
        let b = Image::filled(32, 32, [0.7; 3]);
        let m = BinaryMask::from_fn(32, 32, |y, _| y > 4);
        let got = masked_ssim(&a, &b, &m).unwrap();
        assert!((got - constant_ssim(0.2, 0.7)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn empty_mask_is_rejected() {
        let a = ramp(1);
        let m = BinaryMask::filled(32, 32, false);
        assert!(masked_psnr(&a, &a, &m).is_err());
        assert!(masked_ssim(&a, &a, &m).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = Image::filled(32, 32, [0.5; 3]);
        let m = BinaryMask::filled(32, 32, true);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let b = Image::filled(32, 32, [0.5 + amp; 3]);
            let p = masked_psnr(&a, &b, &m).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn aggregate_is_the_mean() {
        let rs = [
            EvalResult {
                ids: 0.5,
                psnr_db: 30.0,
                ssim: 0.8,
                runtime_s: 1.0,
            },
            EvalResult {
                ids: 1.0,
                psnr_db: 40.0,
                ssim: 0.9,
                runtime_s: 3.0,
            },
        ];
        let a = aggregate(&rs);
        assert_eq!(a.ids, 0.75);
        assert_eq!(a.psnr_db, 35.0);
        assert_eq!(a.runtime_s, 2.0);
    }
}
