//! Reconstruction-driven embedding of an image into W+ and into FS space.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::generator::GeneratorBackend;
use crate::optim::{minimize, OptimConfig, Progress};
use crate::perceptual::{ImageVar, PatchDistanceBackend};
use crate::tensor::{FeatureMap, Image, LatentFS, LatentWPlus, StageId, LATENT_DIM};

/// Adam settings for an inversion stage.
pub type InversionConfig = OptimConfig;

pub const WPLUS_STEPS: usize = 200;
pub const FS_STEPS: usize = 100;
pub const DEFAULT_LR: f64 = 0.01;

pub fn wplus_defaults(seed: u64) -> InversionConfig {
    OptimConfig::new(DEFAULT_LR, WPLUS_STEPS, seed)
}

pub fn fs_defaults(seed: u64) -> InversionConfig {
    OptimConfig::new(DEFAULT_LR, FS_STEPS, seed)
}

/// Mean squared error plus patch distance.
pub fn reconstruction_loss_var<'g>(
    g: &'g Graph,
    pred: ImageVar<'g>,
    target: &Image,
    pd: &dyn PatchDistanceBackend,
) -> Var<'g> {
    let t = ImageVar::constant(g, target);
    pred.data
        .sub(t.data)
        .square()
        .mean()
        .add(pd.distance_var(g, pred, t))
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug)]
pub struct WPlusInversion {
    pub w: LatentWPlus,
    pub loss: f64,
    pub initial_loss: f64,
    /// The budget ran out without improving on the mean-latent start.
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct FsInversion {
    pub fs: LatentFS,
    pub loss: f64,
    pub initial_loss: f64,
    pub flagged: bool,
}

fn check_size(img: &Image, gen: &dyn GeneratorBackend) -> Result<()> {
    let (h, w) = gen.output_size();
    if (img.height(), img.width()) != (h, w) {
        return Err(Error::shape(format!(
            "image is {}x{} but the {} generator renders {h}x{w}",
            img.height(),
            img.width(),
            gen.name()
        )));
    }
    Ok(())
}

/// Optimizes a W+ code, starting from the mean latent, so its synthesis
/// reconstructs `img`.
pub fn invert_wplus(
    img: &Image,
    gen: &dyn GeneratorBackend,
    pd: &dyn PatchDistanceBackend,
    cfg: &InversionConfig,
    progress: &dyn Progress,
) -> Result<WPlusInversion> {
    cfg.validate(false)?;
    check_size(img, gen)?;
    let (h, w) = gen.output_size();
    let init = LatentWPlus::broadcast(gen.mean_latent()).into_vec();
    let out = minimize(init, cfg, "invert", progress, |p, _| {
        let g = Graph::new();
        let wv = g.input(p.to_vec());
        let pred = ImageVar::new(gen.synth_var(&g, wv, StageId::Output), h, w);
        let loss = reconstruction_loss_var(&g, pred, img, pd);
        (loss.item(), g.backward(loss).wrt(wv))
    });
    if out.flagged {
        log::warn!(
            "W+ inversion did not improve on its starting loss {:.6}",
            out.initial_loss
        );
    }
    Ok(WPlusInversion {
        w: LatentWPlus::from_flat(out.params)?,
        loss: out.loss,
        initial_loss: out.initial_loss,
        flagged: out.flagged,
    })
}

/// Refines the style-stage features of `w` for reconstruction, keeping
/// layers 8–18 fixed. Zero steps returns the W+ features unchanged.
pub fn embed_fs(
    img: &Image,
    w: &LatentWPlus,
    gen: &dyn GeneratorBackend,
    pd: &dyn PatchDistanceBackend,
    cfg: &InversionConfig,
    progress: &dyn Progress,
) -> Result<FsInversion> {
    cfg.validate(true)?;
    check_size(img, gen)?;
    let (h, wd) = gen.output_size();
    let f7 = gen.synth_to_stage(w, StageId::Style)?;
    let tail = w.slice(8, 18);
    let tail_flat = tail.as_slice().to_vec();
    debug_assert_eq!(tail_flat.len(), 11 * LATENT_DIM);
    let out = minimize(f7.data().to_vec(), cfg, "embed_fs", progress, |p, _| {
        let g = Graph::new();
        let fv = g.input(p.to_vec());
        let t = g.constant(tail_flat.clone());
        let img_var = gen
            .resume_var(&g, fv, StageId::Style, t, StageId::Output)
            .expect("style features and tail sized by the backend");
        let loss = reconstruction_loss_var(&g, ImageVar::new(img_var, h, wd), img, pd);
        (loss.item(), g.backward(loss).wrt(fv))
    });
    let (sh, sw, sc) = f7.shape();
    let f7 = FeatureMap::new(StageId::Style, sh, sw, sc, out.params)?;
    Ok(FsInversion {
        fs: LatentFS::new(f7, tail)?,
        loss: out.loss,
        initial_loss: out.initial_loss,
        flagged: out.flagged,
    })
}

/// Synthesizes an FS code to an image.
pub fn synthesize_fs(fs: &LatentFS, gen: &dyn GeneratorBackend) -> Result<Image> {
    gen.synth_from_stage(&fs.f7, &fs.s, StageId::Output)?
        .into_image()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{truncation_init, ToyGenerator};
    use crate::optim::NoProgress;
    use crate::perceptual::ToyPatchDistance;

    #[test]
    fn self_inversion_reconstructs() {
        let gen = ToyGenerator::default();
        let w = truncation_init(gen.mean_latent(), &gen.sample_random_latent(11), 0.7).unwrap();
        let img = gen.synthesize(&w).unwrap();
        let inv = invert_wplus(
            &img,
            &gen,
            &ToyPatchDistance,
            &wplus_defaults(0),
            &NoProgress,
        )
        .unwrap();
        let rec = gen.synthesize(&inv.w).unwrap();
        assert!(inv.loss < inv.initial_loss);
        assert!(mse(&rec, &img) < 1e-3, "mse {}", mse(&rec, &img));

        let fs = embed_fs(
            &img,
            &inv.w,
            &gen,
            &ToyPatchDistance,
            &fs_defaults(0),
            &NoProgress,
        )
        .unwrap();
        let rec_fs = synthesize_fs(&fs.fs, &gen).unwrap();
        assert!(mse(&rec_fs, &img) <= mse(&rec, &img) + 1e-12);
    }

    #[test]
    fn zero_step_fs_keeps_wplus_features() {
        let gen = ToyGenerator::default();
        let w = LatentWPlus::broadcast(gen.mean_latent());
        let img = gen.synthesize(&w).unwrap();
        let cfg = OptimConfig::new(0.01, 0, 0);
        let fs = embed_fs(&img, &w, &gen, &ToyPatchDistance, &cfg, &NoProgress).unwrap();
        assert_eq!(fs.fs.f7, gen.synth_to_stage(&w, StageId::Style).unwrap());
        assert!(invert_wplus(&img, &gen, &ToyPatchDistance, &cfg, &NoProgress).is_err());
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let gen = ToyGenerator::default();
        let img = Image::filled(16, 16, [0.5; 3]);
        let r = invert_wplus(
            &img,
            &gen,
            &ToyPatchDistance,
            &wplus_defaults(0),
            &NoProgress,
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }
}
