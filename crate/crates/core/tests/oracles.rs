//! Library results checked against small, independent brute-force
//! reimplementations.

use hairproxy_core::autodiff::Graph;
use hairproxy_core::generator::{truncation_init, GeneratorBackend, ToyGenerator};
use hairproxy_core::inversion::wplus_defaults;
use hairproxy_core::losses::{
    avg_color_loss, bg_loss, blend_loss, parsing_levels, pose_loss, reg_loss, shape_loss,
    sketch_trainer_loss, style_loss, LossWeights,
};
use hairproxy_core::metrics::{masked_ssim, SSIM_SIGMA, SSIM_WINDOW};
use hairproxy_core::perceptual::{
    gram_matrix, Backends, ImageVar, KeypointBackend, PatchDistanceBackend,
    PerceptualFeatureBackend, ToyKeypoints, ToyPatchDistance, ToyPerceptual,
};
use hairproxy_core::pipeline::{
    blend_color_features, blend_global_style, blend_local_sketch, color_proxy_image,
    optimize_color_proxy, synth_style_only, ColorProxyState,
};
use hairproxy_core::proxies::{make_reference_proxy, OptimSummary, ProxyEnv};
use hairproxy_core::tensor::{dilate_mask, downsample_mask, resize_mask};
use hairproxy_core::{
    BinaryMask, ColorCondition, EditRequest, Engine, FeatureMap, Image, LatentWPlus, NoProgress,
    OptimConfig, StageId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_w(gen: &ToyGenerator, seed: u64) -> LatentWPlus {
    truncation_init(gen.mean_latent(), &gen.sample_random_latent(seed), 0.6).unwrap()
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    let bits: Vec<bool> = (0..h * w).map(|_| r.random::<f64>() < p).collect();
    BinaryMask::from_fn(h, w, |y, x| bits[y * w + x])
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w * 3).map(|_| r.random()).collect()).unwrap()
}

fn random_features(r: &mut ChaCha8Rng, stage: StageId, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(
        stage,
        h,
        w,
        c,
        (0..h * w * c).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn downsample_matches_block_majority() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    let mut r = rng(11);
    for seed in 0..5 {
        // A 256x256 hair mask: the parsed toy hair, upscaled, with ragged edges.
        let hair = b
            .parsing
            .hair_mask(&gen.synthesize(&toy_w(&gen, seed)).unwrap());
        let flips: Vec<bool> = (0..256 * 256).map(|_| r.random::<f64>() < 0.2).collect();
        let big = BinaryMask::from_fn(256, 256, |y, x| hair.get(y / 8, x / 8) ^ flips[y * 256 + x]);
        let small = downsample_mask(&big, 32, 32).unwrap();
        for by in 0..32 {
            for bx in 0..32 {
                let mut on = 0;
                for y in by * 8..by * 8 + 8 {
                    for x in bx * 8..bx * 8 + 8 {
                        on += big.get(y, x) as usize;
                    }
                }
                assert_eq!(small.get(by, bx), on * 2 >= 64, "block ({by},{bx})");
            }
        }
    }
}

#[test]
fn dilation_matches_max_filter() {
    let mut r = rng(12);
    for _ in 0..20 {
        let m = random_mask(&mut r, 16, 16, 0.08);
        let d = dilate_mask(&m, 2);
        for y in 0..16i64 {
            for x in 0..16i64 {
                let mut any = false;
                for yy in (y - 2).max(0)..=(y + 2).min(15) {
                    for xx in (x - 2).max(0)..=(x + 2).min(15) {
                        any |= m.get(yy as usize, xx as usize);
                    }
                }
                assert_eq!(d.get(y as usize, x as usize), any);
            }
        }
    }
}

fn gram_oracle(data: &[f64], p: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for px in 0..p {
                s += data[px * c + i] * data[px * c + j];
            }
            out[i * c + j] = s / p as f64;
        }
    }
    out
}

#[test]
fn gram_matches_double_loop_and_is_psd() {
    let mut r = rng(13);
    for _ in 0..10 {
        let f = random_features(&mut r, StageId::Style, 3, 3, 2);
        let got = gram_matrix(&f);
        let want = gram_oracle(f.data(), 9, 2);
        for (a, b) in got.iter().zip(&want) {
            assert!(close(*a, *b, 1e-12));
        }
        // A symmetric 2x2 matrix is PSD iff its trace and determinant are nonnegative.
        assert_eq!(got[1], got[2]);
        assert!(got[0] + got[3] >= -1e-8);
        assert!(got[0] * got[3] - got[1] * got[2] >= -1e-8);
    }
}

#[test]
fn pose_loss_matches_hand_sum() {
    let mut r = rng(14);
    for _ in 0..10 {
        let (a, b) = (random_image(&mut r, 32, 32), random_image(&mut r, 32, 32));
        let (pa, pb) = (ToyKeypoints.extract(&a), ToyKeypoints.extract(&b));
        let mut s = 0.0;
        for k in 0..pa.len() {
            for d in 0..3 {
                s += (pa[k][d] - pb[k][d]) * (pa[k][d] - pb[k][d]);
            }
        }
        let want = s / pa.len() as f64;
        assert!(close(
            pose_loss(&a, &b, &ToyKeypoints).unwrap(),
            want,
            1e-12
        ));
    }
}

fn masked(img: &Image, m: &BinaryMask) -> Image {
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * m.data()[i / 3])
        .collect();
    Image::new(img.height(), img.width(), data).unwrap()
}

fn toy_features(img: &Image) -> Vec<(Vec<f64>, usize, usize)> {
    let g = Graph::new();
    ToyPerceptual::default()
        .features_var(&g, ImageVar::constant(&g, img))
        .into_iter()
        .map(|f| (f.data.to_vec(), f.height * f.width, f.channels))
        .collect()
}

#[test]
fn style_loss_matches_gram_difference() {
    let mut r = rng(15);
    let pf = ToyPerceptual::default();
    for _ in 0..5 {
        let (a, b) = (random_image(&mut r, 32, 32), random_image(&mut r, 32, 32));
        let (ma, mb) = (
            random_mask(&mut r, 32, 32, 0.5),
            random_mask(&mut r, 32, 32, 0.5),
        );
        let fa = toy_features(&masked(&a, &ma));
        let fb = toy_features(&masked(&b, &mb));
        assert_eq!(fa.len(), 4);
        let mut total = 0.0;
        for ((da, p, c), (db, _, _)) in fa.iter().zip(&fb) {
            let (ga, gb) = (gram_oracle(da, *p, *c), gram_oracle(db, *p, *c));
            total += ga
                .iter()
                .zip(&gb)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>();
        }
        let want = total / 4.0;
        assert!(close(
            style_loss(&a, &b, &ma, &mb, &pf).unwrap(),
            want,
            1e-10
        ));
    }
}

#[test]
fn reg_loss_matches_flat_vector() {
    let gen = ToyGenerator::default();
    let (a, b) = (toy_w(&gen, 1), toy_w(&gen, 2));
    let mut s = 0.0;
    for i in 0..a.as_slice().len() {
        s += (a.as_slice()[i] - b.as_slice()[i]).powi(2);
    }
    assert!(close(reg_loss(&a, &b), s, 1e-12));
}

#[test]
fn shape_and_background_losses_match_pixel_loops() {
    let mut r = rng(16);
    let (m1, m2) = (
        random_mask(&mut r, 32, 32, 0.4),
        random_mask(&mut r, 32, 32, 0.4),
    );
    let mut s = 0.0;
    for y in 0..32 {
        for x in 0..32 {
            s += (m1.get(y, x) != m2.get(y, x)) as u8 as f64;
        }
    }
    assert!(close(shape_loss(&m1, &m2).unwrap(), s / 1024.0, 1e-12));

    let (a, b) = (random_image(&mut r, 32, 32), random_image(&mut r, 32, 32));
    let mut s = 0.0;
    for y in 0..32 {
        for x in 0..32 {
            if m1.get(y, x) {
                let (p, q) = (a.pixel(y, x), b.pixel(y, x));
                s += (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
            }
        }
    }
    assert!(close(bg_loss(&a, &b, &m1).unwrap(), s, 1e-12));
}

fn patch_oracle(a: &Image, b: &Image) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut s = 0.0;
    let mut n = 0;
    for by in (0..h).step_by(4) {
        for bx in (0..w).step_by(4) {
            for k in 0..3 {
                let mut d = 0.0;
                for y in by..by + 4 {
                    for x in bx..bx + 4 {
                        d += a.pixel(y, x)[k] - b.pixel(y, x)[k];
                    }
                }
                s += (d / 16.0).powi(2);
                n += 1;
            }
        }
    }
    s / n as f64
}

fn mse_oracle(a: &Image, b: &Image) -> f64 {
    let n = a.data().len();
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n as f64
}

#[test]
fn patch_distance_matches_block_means() {
    let mut r = rng(17);
    let (a, b) = (random_image(&mut r, 32, 32), random_image(&mut r, 32, 32));
    assert!(close(
        ToyPatchDistance.distance(&a, &b),
        patch_oracle(&a, &b),
        1e-12
    ));
}

#[test]
fn blend_loss_matches_composed_terms() {
    let mut r = rng(18);
    let (fin, col, sty) = (
        random_image(&mut r, 32, 32),
        random_image(&mut r, 32, 32),
        random_image(&mut r, 32, 32),
    );
    let m = random_mask(&mut r, 32, 32, 0.5);
    let out = m.complement();
    let inside = mse_oracle(&masked(&fin, &m), &masked(&col, &m))
        + patch_oracle(&masked(&fin, &m), &masked(&col, &m));
    let outside = mse_oracle(&masked(&fin, &out), &masked(&sty, &out))
        + patch_oracle(&masked(&fin, &out), &masked(&sty, &out));
    let got = blend_loss(&fin, &col, &sty, &m, &ToyPatchDistance).unwrap();
    assert!(close(got, inside + outside, 1e-12));
}

#[test]
fn avg_color_loss_matches_masked_mean() {
    let mut r = rng(19);
    let img = random_image(&mut r, 32, 32);
    let m = random_mask(&mut r, 32, 32, 0.3);
    let target = [0.2, 0.7, 0.4];
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for y in 0..32 {
        for x in 0..32 {
            if m.get(y, x) {
                let p = img.pixel(y, x);
                for k in 0..3 {
                    acc[k] += p[k];
                }
                n += 1.0;
            }
        }
    }
    let want: f64 = (0..3).map(|k| (acc[k] / n - target[k]).powi(2)).sum();
    assert!(close(
        avg_color_loss(&img, &m, target).unwrap(),
        want,
        1e-12
    ));
}

#[test]
fn sketch_trainer_loss_matches_three_terms() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    let w = LossWeights::default();
    let pred = gen.synthesize(&toy_w(&gen, 3)).unwrap();
    let target = gen.synthesize(&toy_w(&gen, 4)).unwrap();
    let (lp, lt) = (
        parsing_levels(&pred, b.parsing.as_ref()),
        parsing_levels(&target, b.parsing.as_ref()),
    );
    assert_eq!(lp.len(), 5);
    let mut par = 0.0;
    for (p, t) in lp.iter().zip(&lt) {
        let dot: f64 = p.iter().zip(t).map(|(x, y)| x * y).sum();
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        par += 1.0 - dot / (np * nt);
    }
    let want = 0.5 * mse_oracle(&pred, &target) + 0.8 * patch_oracle(&pred, &target) + par;
    let got =
        sketch_trainer_loss(&pred, &target, b.parsing.as_ref(), b.patch.as_ref(), &w).unwrap();
    assert!(close(got, want, 1e-10), "{got} vs {want}");
}

fn luma(img: &Image) -> Vec<f64> {
    (0..img.height() * img.width())
        .map(|i| {
            let p = &img.data()[i * 3..i * 3 + 3];
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })
        .collect()
}

/// Direct 2D Gaussian window, truncated at the border and renormalized,
/// with two-pass moments.
fn ssim_oracle(a: &Image, b: &Image) -> Vec<f64> {
    let (h, w) = (a.height() as i64, a.width() as i64);
    let (la, lb) = (luma(a), luma(b));
    let r = (SSIM_WINDOW / 2) as i64;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut taps = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if (0..h).contains(&yy) && (0..w).contains(&xx) {
                        let wt =
                            (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                        let i = (yy * w + xx) as usize;
                        taps.push((wt, la[i], lb[i]));
                    }
                }
            }
            let sw: f64 = taps.iter().map(|t| t.0).sum();
            let ma = taps.iter().map(|t| t.0 * t.1).sum::<f64>() / sw;
            let mb = taps.iter().map(|t| t.0 * t.2).sum::<f64>() / sw;
            let va = taps.iter().map(|t| t.0 * (t.1 - ma).powi(2)).sum::<f64>() / sw;
            let vb = taps.iter().map(|t| t.0 * (t.2 - mb).powi(2)).sum::<f64>() / sw;
            let cov = taps
                .iter()
                .map(|t| t.0 * (t.1 - ma) * (t.2 - mb))
                .sum::<f64>()
                / sw;
            out.push(
                ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
            );
        }
    }
    out
}

#[test]
fn ssim_matches_windowed_oracle() {
    let mut r = rng(20);
    // Values avoid mid-gray so `a` and `1 - a` never coincide.
    let data: Vec<f64> = (0..24 * 24 * 3)
        .map(|_| {
            let v = r.random_range(0.0..0.4);
            if r.random::<bool>() {
                v
            } else {
                1.0 - v
            }
        })
        .collect();
    let a = Image::new(24, 24, data.clone()).unwrap();
    let inv = Image::new(24, 24, data.iter().map(|v| 1.0 - v).collect()).unwrap();
    let m = random_mask(&mut r, 24, 24, 0.6);
    let map = ssim_oracle(&a, &inv);
    let want = map
        .iter()
        .zip(m.data())
        .filter(|(_, &k)| k == 1.0)
        .map(|(v, _)| v)
        .sum::<f64>()
        / m.count() as f64;
    let got = masked_ssim(&a, &inv, &m).unwrap();
    assert!(close(got, want, 1e-9), "{got} vs {want}");
    assert!(got < 0.5);
}

#[test]
fn style_blends_match_cellwise_oracle() {
    let mut r = rng(21);
    for _ in 0..10 {
        let a = random_features(&mut r, StageId::Style, 8, 8, 16);
        let b = random_features(&mut r, StageId::Style, 8, 8, 16);
        let m = random_mask(&mut r, 8, 8, 0.5);
        for out in [
            blend_global_style(&a, &b, &m).unwrap(),
            blend_local_sketch(&a, &b, &m).unwrap(),
        ] {
            for y in 0..8 {
                for x in 0..8 {
                    let want = if m.get(y, x) {
                        a.cell(y, x)
                    } else {
                        b.cell(y, x)
                    };
                    assert_eq!(out.cell(y, x), want);
                }
            }
        }
    }
}

fn env<'a>(gen: &'a ToyGenerator, b: &'a Backends, w: &'a LossWeights) -> ProxyEnv<'a> {
    ProxyEnv {
        gen,
        backends: b,
        weights: w,
        progress: &NoProgress,
    }
}

#[test]
fn color_blend_matches_cellwise_oracle() {
    let gen = ToyGenerator::default();
    let mut r = rng(22);
    let w_src = toy_w(&gen, 5);
    let mut w_color = w_src.clone();
    for layer in 9..13 {
        for v in w_color.layer_mut(layer) {
            *v += r.random_range(-1.0..1.0);
        }
    }
    let f_style = gen.synth_to_stage(&toy_w(&gen, 6), StageId::Style).unwrap();
    let m = random_mask(&mut r, 32, 32, 0.5);
    let state = ColorProxyState {
        w_color: w_color.clone(),
        f_blend_14: None,
        optim: OptimSummary {
            steps: 0,
            initial_loss: 0.0,
            final_loss: 0.0,
            flagged: false,
            trajectory: Vec::new(),
        },
    };
    let out = blend_color_features(state, &f_style, &w_src, &m, &gen).unwrap();
    let f = out.f_blend_14.unwrap();
    let branch = |w: &LatentWPlus| {
        gen.synth_from_stage(&f_style, &w.slice(8, 14), StageId::Color)
            .unwrap()
            .into_features()
            .unwrap()
    };
    let (edited, source) = (branch(&w_color), branch(&w_src));
    assert_ne!(edited, source);
    for y in 0..32 {
        for x in 0..32 {
            let want = if m.get(y, x) {
                edited.cell(y, x)
            } else {
                source.cell(y, x)
            };
            assert_eq!(f.cell(y, x), want);
        }
    }
}

#[test]
fn style_only_keeps_pixels_of_unchanged_cells() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    for seed in 0..5 {
        let w = toy_w(&gen, 30 + seed);
        let other = toy_w(&gen, 40 + seed);
        let img = gen.synthesize(&w).unwrap();
        let f_src = gen.synth_to_stage(&w, StageId::Style).unwrap();
        let hair = downsample_mask(&b.parsing.hair_mask(&img), 8, 8).unwrap();
        let edited = blend_global_style(
            &gen.synth_to_stage(&other, StageId::Style).unwrap(),
            &f_src,
            &hair,
        )
        .unwrap();
        let (before, after) = (
            synth_style_only(&f_src, &w, &gen).unwrap(),
            synth_style_only(&edited, &w, &gen).unwrap(),
        );
        let mut changed = 0;
        for y in 0..32 {
            for x in 0..32 {
                if hair.get(y / 4, x / 4) {
                    changed += (before.pixel(y, x) != after.pixel(y, x)) as usize;
                } else {
                    assert_eq!(before.pixel(y, x), after.pixel(y, x), "pixel ({y},{x})");
                }
            }
        }
        assert!(hair.is_empty() || changed > 0);
    }
}

/// A colour the generator can reach: the hair re-rendered with shifted
/// colour layers.
fn reachable_color(
    gen: &ToyGenerator,
    f_style: &FeatureMap,
    w: &LatentWPlus,
    hair: &BinaryMask,
) -> [f64; 3] {
    let (da, db) = gen.hair_color_directions();
    let mut shifted = w.clone();
    for layer in 9..13 {
        for (i, v) in shifted.layer_mut(layer).iter_mut().enumerate() {
            *v += da[i] - 0.6 * db[i];
        }
    }
    let img = synth_style_only(f_style, &shifted, gen).unwrap();
    hairproxy_core::losses::masked_mean_color(&img, hair).unwrap()
}

#[test]
fn rgb_color_proxy_cuts_average_color_loss() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    let weights = LossWeights::default();
    for seed in 0..3 {
        let w = toy_w(&gen, 50 + seed);
        let f = gen.synth_to_stage(&w, StageId::Style).unwrap();
        let i_style = synth_style_only(&f, &w, &gen).unwrap();
        let hair = b.parsing.hair_mask(&i_style);
        let target = reachable_color(&gen, &f, &w, &hair);
        let state = optimize_color_proxy(
            &f,
            &w,
            &ColorCondition::Rgb(target),
            &env(&gen, &b, &weights),
            &OptimConfig::new(0.01, 100, seed),
        )
        .unwrap();
        let before = avg_color_loss(&i_style, &hair, target).unwrap();
        let after = avg_color_loss(
            &color_proxy_image(&f, &state.w_color, &gen).unwrap(),
            &hair,
            target,
        )
        .unwrap();
        assert!(after < 0.25 * before, "{after} vs {before}");
        for layer in [7, 8, 13] {
            assert_eq!(state.w_color.layer(layer), w.layer(layer));
        }
    }
}

fn region_mse(a: &Image, b: &Image, m: &BinaryMask) -> f64 {
    let mut s = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if m.get(y, x) {
                let (p, q) = (a.pixel(y, x), b.pixel(y, x));
                s += (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
            }
        }
    }
    s / (3 * m.count().max(1)) as f64
}

#[test]
fn strong_color_change_stays_inside_the_color_mask() {
    let e = Engine::toy();
    let gen = ToyGenerator::default();
    let img = gen.synthesize(&toy_w(&gen, 60)).unwrap();
    let src = e.prepare_source(&img, 0, &NoProgress).unwrap();
    let req = EditRequest {
        color: Some(ColorCondition::Rgb([0.1, 0.8, 0.2])),
        ..Default::default()
    };
    let out = e.edit(&src, &req, &NoProgress).unwrap();
    let m = resize_mask(&e.backends.parsing.hair_mask(&out.i_style), 32, 32).unwrap();
    let inside = region_mse(&out.image, &out.i_style, &m);
    let outside = region_mse(&out.image, &out.i_style, &m.complement());
    assert!(outside < inside, "outside {outside} inside {inside}");
}

#[test]
fn reference_proxy_reduces_pose_error() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    let weights = LossWeights::default();
    for seed in 0..3 {
        let i_src = gen.synthesize(&toy_w(&gen, 70 + seed)).unwrap();
        let i_ref = gen.synthesize(&toy_w(&gen, 80 + seed)).unwrap();
        let e = env(&gen, &b, &weights);
        let inv = wplus_defaults(seed);
        let start = make_reference_proxy(
            &i_ref,
            &i_src,
            &e,
            &OptimConfig::new(0.01, 1, seed),
            &inv,
            None,
        )
        .unwrap();
        let end = make_reference_proxy(
            &i_ref,
            &i_src,
            &e,
            &OptimConfig::new(0.01, 100, seed),
            &inv,
            None,
        )
        .unwrap();
        let pose = |p: &hairproxy_core::Proxy| {
            pose_loss(
                &i_src,
                &gen.synthesize(p.w.as_ref().unwrap()).unwrap(),
                &ToyKeypoints,
            )
            .unwrap()
        };
        let (p0, p1) = (pose(&start), pose(&end));
        assert!(p1 < p0, "seed {seed}: pose {p0} -> {p1}");
        let s = end.optim.unwrap();
        assert!(s.final_loss < s.initial_loss);
    }
}

struct CodeLog(std::sync::Mutex<Vec<Vec<f64>>>);

impl hairproxy_core::Progress for CodeLog {
    fn report(&self, _: &str, _: usize, _: f64) {}

    fn params(&self, _: &str, _: usize, p: &[f64]) {
        self.0.lock().unwrap().push(p.to_vec());
    }
}

#[test]
fn stronger_step_regularization_shortens_steps() {
    let gen = ToyGenerator::default();
    let b = Backends::toy();
    for seed in 0..3 {
        let i_src = gen.synthesize(&toy_w(&gen, 400 + seed)).unwrap();
        let w_ref = toy_w(&gen, 500 + seed);
        let i_ref = gen.synthesize(&w_ref).unwrap();
        let mean_step = |reg: f64| {
            let weights = LossWeights {
                reg,
                ..LossWeights::default()
            };
            let log = CodeLog(Default::default());
            let e = ProxyEnv {
                gen: &gen,
                backends: &b,
                weights: &weights,
                progress: &log,
            };
            hairproxy_core::proxies::optimize_reference_proxy(
                w_ref.clone(),
                &i_ref,
                &i_src,
                &e,
                &OptimConfig::new(0.01, 50, 0),
                None,
            )
            .unwrap();
            let codes = log.0.into_inner().unwrap();
            let norms: Vec<f64> = codes
                .windows(2)
                .map(|p| {
                    p[0].iter()
                        .zip(&p[1])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            norms.iter().sum::<f64>() / norms.len() as f64
        };
        let (loose, tight) = (mean_step(1.0), mean_step(1000.0));
        assert!(tight < loose, "seed {seed}: {tight} vs {loose}");
    }
}
