//! Fixtures shared by the benchmarks.

use hairproxy_core::generator::{truncation_init, GeneratorBackend, ToyGenerator};
use hairproxy_core::{Image, LatentWPlus};

/// A toy source latent and its rendering.
pub fn toy_source(gen: &ToyGenerator, seed: u64) -> (LatentWPlus, Image) {
    let w = truncation_init(gen.mean_latent(), &gen.sample_random_latent(seed), 0.6)
        .expect("toy latents share one width");
    let img = gen
        .synthesize(&w)
        .expect("toy generator accepts its own latents");
    (w, img)
}
