//! Edit recipes: the text form of an [`EditRequest`] plus per-run overrides.
//!
//! Images, masks and sketches are referenced by path (resolved against the
//! recipe's directory) or given inline. Inline images are base64 PNG.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::losses::LossWeights;
use crate::perceptual::{BackendNames, Backends};
use crate::pipeline::{Budgets, ColorCondition, EditRequest, Engine, HairstyleCondition};
use crate::sketch::SketchInput;
use crate::tensor::{BinaryMask, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageRef {
    Path(PathBuf),
    PngBase64(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SketchRef {
    Path(PathBuf),
    Inline(SketchInput),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HairstyleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch: Option<SketchRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_mask: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub standalone_sketch: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<ImageRef>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hairstyle: Option<HairstyleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<ColorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backends: Option<BackendNames>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Budgets>,
}

/// Where path references may point.
#[derive(Clone, Copy, Debug)]
pub enum Resolve<'a> {
    /// Relative paths are taken from this directory.
    Dir(&'a Path),
    /// Only inline data is accepted.
    InlineOnly,
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "recipe",
        reason: reason.into(),
    }
}

impl ImageRef {
    fn bytes(&self, resolve: Resolve<'_>) -> Result<Vec<u8>> {
        match (self, resolve) {
            (ImageRef::PngBase64(data), _) => B64
                .decode(data.trim())
                .map_err(|e| format_err(format!("bad base64 image: {e}"))),
            (ImageRef::Path(p), Resolve::Dir(dir)) => io::load_bytes(&dir.join(p)),
            (ImageRef::Path(p), Resolve::InlineOnly) => Err(Error::InvalidRequest(format!(
                "file references are not accepted here ({})",
                p.display()
            ))),
        }
    }

    pub fn image(&self, resolve: Resolve<'_>) -> Result<Image> {
        io::decode_image(&self.bytes(resolve)?)
    }

    pub fn mask(&self, resolve: Resolve<'_>) -> Result<BinaryMask> {
        io::decode_mask(&self.bytes(resolve)?)
    }

    pub fn inline_image(img: &Image) -> Result<Self> {
        Ok(ImageRef::PngBase64(B64.encode(io::encode_image_png(img)?)))
    }

    pub fn inline_mask(m: &BinaryMask) -> Result<Self> {
        Ok(ImageRef::PngBase64(B64.encode(io::encode_mask_png(m)?)))
    }
}

impl SketchRef {
    pub fn sketch(&self, resolve: Resolve<'_>) -> Result<SketchInput> {
        match (self, resolve) {
            (SketchRef::Inline(s), _) => {
                s.validate()?;
                Ok(s.clone())
            }
            (SketchRef::Path(p), Resolve::Dir(dir)) => SketchInput::load(&dir.join(p)),
            (SketchRef::Path(p), Resolve::InlineOnly) => Err(Error::InvalidRequest(format!(
                "file references are not accepted here ({})",
                p.display()
            ))),
        }
    }
}

impl RecipeFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| format_err(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| format_err(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| format_err(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| format_err(e.to_string()))
    }

    /// Reads a recipe; relative references resolve against its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let recipe = Self::from_toml(&io::load_text(path)?)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((recipe, dir))
    }

    pub fn to_request(&self, resolve: Resolve<'_>) -> Result<EditRequest> {
        let mut req = EditRequest {
            seed: self.seed,
            ..Default::default()
        };
        if let Some(h) = &self.hairstyle {
            req.hairstyle = match (&h.text, &h.reference) {
                (Some(_), Some(_)) => {
                    return Err(Error::InvalidRequest(
                        "hairstyle takes text or reference, not both".into(),
                    ))
                }
                (Some(t), None) => Some(HairstyleCondition::Text(t.clone())),
                (None, Some(r)) => Some(HairstyleCondition::Reference(r.image(resolve)?)),
                (None, None) => None,
            };
            req.sketch = h.sketch.as_ref().map(|s| s.sketch(resolve)).transpose()?;
            req.shape_mask = h.shape_mask.as_ref().map(|m| m.mask(resolve)).transpose()?;
            req.standalone_sketch = h.standalone_sketch;
        }
        if let Some(c) = &self.color {
            req.color = match (&c.text, &c.reference, &c.rgb) {
                (Some(t), None, None) => Some(ColorCondition::Text(t.clone())),
                (None, Some(r), None) => Some(ColorCondition::Reference(r.image(resolve)?)),
                (None, None, Some(rgb)) => Some(ColorCondition::Rgb(*rgb)),
                (None, None, None) => None,
                _ => {
                    return Err(Error::InvalidRequest(
                        "color takes exactly one of text, reference or rgb".into(),
                    ))
                }
            };
            req.color_mask = c.mask.as_ref().map(|m| m.mask(resolve)).transpose()?;
        }
        Ok(req)
    }

    /// Inline recipe for a request, with no overrides.
    pub fn from_request(req: &EditRequest) -> Result<Self> {
        let edits_hair = req.hairstyle.is_some()
            || req.sketch.is_some()
            || req.shape_mask.is_some()
            || req.standalone_sketch;
        let hairstyle = if edits_hair {
            let mut h = HairstyleSpec {
                standalone_sketch: req.standalone_sketch,
                sketch: req.sketch.clone().map(SketchRef::Inline),
                shape_mask: req
                    .shape_mask
                    .as_ref()
                    .map(ImageRef::inline_mask)
                    .transpose()?,
                ..Default::default()
            };
            match &req.hairstyle {
                Some(HairstyleCondition::Text(t)) => h.text = Some(t.clone()),
                Some(HairstyleCondition::Reference(img)) => {
                    h.reference = Some(ImageRef::inline_image(img)?)
                }
                None => {}
            }
            Some(h)
        } else {
            None
        };
        let color = if req.color.is_some() || req.color_mask.is_some() {
            let mut c = ColorSpec {
                mask: req
                    .color_mask
                    .as_ref()
                    .map(ImageRef::inline_mask)
                    .transpose()?,
                ..Default::default()
            };
            match &req.color {
                Some(ColorCondition::Text(t)) => c.text = Some(t.clone()),
                Some(ColorCondition::Reference(img)) => {
                    c.reference = Some(ImageRef::inline_image(img)?)
                }
                Some(ColorCondition::Rgb(rgb)) => c.rgb = Some(*rgb),
                None => {}
            }
            Some(c)
        } else {
            None
        };
        Ok(RecipeFile {
            seed: req.seed,
            hairstyle,
            color,
            ..Default::default()
        })
    }

    /// `engine` with this recipe's overrides applied.
    pub fn apply_overrides(&self, engine: &Engine) -> Result<Engine> {
        let mut e = engine.clone();
        if let Some(names) = &self.backends {
            e.backends = Backends::from_names(names)?;
        }
        if let Some(w) = &self.loss_weights {
            w.validate()?;
            e.weights = *w;
        }
        if let Some(b) = &self.budgets {
            b.validate()?;
            e.budgets = b.clone();
        }
        Ok(e)
    }
}
