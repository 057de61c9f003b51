//! Hair editing by proxy blending inside a staged generator.
//!
//! Editing conditions (text, reference image, sketch, colour) are turned
//! into *proxies*: latent codes whose style-stage features can be spliced
//! into the source image's features under a region mask. Hairstyle edits
//! blend at the style stage, colour edits at the color stage.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod generator;
pub mod inversion;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod perceptual;
pub mod pipeline;
pub mod proxies;
pub mod recipe;
pub mod sketch;
pub mod tensor;

pub use config::Config;
pub use error::{Error, Result};
pub use generator::{truncation_init, GeneratorBackend, GeneratorStage, StageOutput, ToyGenerator};
pub use metrics::{identity_similarity, masked_psnr, masked_ssim, EvalResult};
pub use optim::{NoProgress, OptimConfig, Progress};
pub use perceptual::{BackendNames, Backends};
pub use pipeline::{
    Budgets, ColorCondition, EditOutcome, EditReport, EditRequest, Engine, HairstyleCondition,
    SourceState, StageError,
};
pub use proxies::{Proxy, ProxyKind};
pub use recipe::{RecipeFile, Resolve};
pub use sketch::{SketchInput, SketchInverter, Stroke};
pub use tensor::{
    blend_features, dilate_mask, downsample_mask, mask_intersection_nonhair, BinaryMask,
    FeatureMap, Image, LatentFS, LatentSlice, LatentW, LatentWPlus, StageId, LATENT_DIM,
    NUM_LAYERS,
};
