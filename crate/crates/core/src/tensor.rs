//! Value types shared by every stage of the engine, plus the masked
//! blending and mask resampling primitives.
//!
//! All spatial buffers are row-major `height × width × channels` (HWC).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of one latent code.
pub const LATENT_DIM: usize = 512;
/// Number of per-layer codes in W+.
pub const NUM_LAYERS: usize = 18;

/// A single 512-dimensional latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentW(Vec<f64>);

impl LatentW {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != LATENT_DIM {
            return Err(Error::shape(format!(
                "latent code has {} entries, expected {LATENT_DIM}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent code has non-finite entries"));
        }
        Ok(LatentW(values))
    }

    pub fn splat(x: f64) -> Self {
        LatentW(vec![x; LATENT_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Eighteen stacked latent codes, stored flat (layer-major).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentWPlus(Vec<f64>);

impl LatentWPlus {
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        if values.len() != NUM_LAYERS * LATENT_DIM {
            return Err(Error::shape(format!(
                "W+ code has {} entries, expected {}",
                values.len(),
                NUM_LAYERS * LATENT_DIM
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("W+ code has non-finite entries"));
        }
        Ok(LatentWPlus(values))
    }

    /// Every layer set to `w`.
    pub fn broadcast(w: &LatentW) -> Self {
        let mut data = Vec::with_capacity(NUM_LAYERS * LATENT_DIM);
        for _ in 0..NUM_LAYERS {
            data.extend_from_slice(w.as_slice());
        }
        LatentWPlus(data)
    }

    pub fn from_layers(layers: &[LatentW]) -> Result<Self> {
        if layers.len() != NUM_LAYERS {
            return Err(Error::shape(format!(
                "W+ code needs {NUM_LAYERS} layers, got {}",
                layers.len()
            )));
        }
        Ok(LatentWPlus(
            layers
                .iter()
                .flat_map(|l| l.as_slice().iter().copied())
                .collect(),
        ))
    }

    /// Layer by zero-based index.
    pub fn layer(&self, idx: usize) -> &[f64] {
        &self.0[idx * LATENT_DIM..(idx + 1) * LATENT_DIM]
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.0[idx * LATENT_DIM..(idx + 1) * LATENT_DIM]
    }

    /// Layers `first..=last` in one-based numbering, e.g. `slice(8, 18)`.
    pub fn slice(&self, first: usize, last: usize) -> LatentSlice {
        assert!(
            (1..=NUM_LAYERS).contains(&first) && first <= last && last <= NUM_LAYERS,
            "layer range {first}..={last} out of bounds"
        );
        LatentSlice {
            first,
            data: self.0[(first - 1) * LATENT_DIM..last * LATENT_DIM].to_vec(),
        }
    }

    /// Overwrites the layers covered by `slice`.
    pub fn splice(&mut self, slice: &LatentSlice) {
        let start = (slice.first - 1) * LATENT_DIM;
        self.0[start..start + slice.data.len()].copy_from_slice(&slice.data);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A contiguous run of W+ layers, remembering which layer it starts at
/// (one-based).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSlice {
    first: usize,
    data: Vec<f64>,
}

impl LatentSlice {
    pub fn new(first: usize, data: Vec<f64>) -> Result<Self> {
        if first == 0 || data.len() % LATENT_DIM != 0 || data.is_empty() {
            return Err(Error::shape("latent slice must hold whole layers"));
        }
        if first - 1 + data.len() / LATENT_DIM > NUM_LAYERS {
            return Err(Error::shape("latent slice runs past layer 18"));
        }
        Ok(LatentSlice { first, data })
    }

    pub fn first_layer(&self) -> usize {
        self.first
    }

    pub fn last_layer(&self) -> usize {
        self.first + self.num_layers() - 1
    }

    pub fn num_layers(&self) -> usize {
        self.data.len() / LATENT_DIM
    }

    /// Sub-range in one-based numbering; must lie inside this slice.
    pub fn sub(&self, first: usize, last: usize) -> Result<LatentSlice> {
        if first < self.first || last > self.last_layer() || first > last {
            return Err(Error::shape(format!(
                "layers {first}..={last} not covered by slice {}..={}",
                self.first,
                self.last_layer()
            )));
        }
        let off = (first - self.first) * LATENT_DIM;
        Ok(LatentSlice {
            first,
            data: self.data[off..off + (last - first + 1) * LATENT_DIM].to_vec(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Named generator tap points. Toy and full-scale generators share names,
/// not shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum StageId {
    Style,
    Color,
    Output,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Style => "style",
            StageId::Color => "color",
            StageId::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "style" => Ok(StageId::Style),
            "color" => Ok(StageId::Color),
            "output" => Ok(StageId::Output),
            other => Err(Error::UnknownStage(other.to_string())),
        }
    }

    /// Last W+ layer (one-based) consumed before this stage's features exist.
    pub fn last_layer(self) -> usize {
        match self {
            StageId::Style => 7,
            StageId::Color => 14,
            StageId::Output => 18,
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Spatial feature tensor captured at a generator stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    stage: StageId,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        stage: StageId,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape("feature map dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature buffer has {} values for shape {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map has non-finite entries"));
        }
        Ok(FeatureMap {
            stage,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(stage: StageId, height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            stage,
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn stage(&self) -> StageId {
        self.stage
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The `channels`-long feature vector at one cell.
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let off = (y * self.width + x) * self.channels;
        &self.data[off..off + self.channels]
    }
}

/// Binary region selector stored as `{0.0, 1.0}` reals.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("mask dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask buffer has {} values for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| if f(i / width, i % width) { 1.0 } else { 0.0 })
            .collect();
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Self::from_fn(height, width, |_, _| on)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1.0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.max(*b))
                .collect(),
        })
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// `m ⊆ other` cellwise.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.data.iter().zip(&other.data).all(|(a, b)| a <= b)
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "image buffer has {} values for {height}x{width}x3",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image has non-finite entries"));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a raw buffer, clamping into `[0, 1]`.
    pub fn from_raw_clamped(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(
            height,
            width,
            data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Image {
            height,
            width,
            data: (0..height * width).flat_map(|_| rgb).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Hybrid embedding: style-stage features replacing layers 1–7 plus
/// layers 8–18 of a W+ code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFS {
    pub f7: FeatureMap,
    pub s: LatentSlice,
}

impl LatentFS {
    pub fn new(f7: FeatureMap, s: LatentSlice) -> Result<Self> {
        if f7.stage() != StageId::Style {
            return Err(Error::shape(
                "FS feature must be captured at the style stage",
            ));
        }
        if s.first_layer() != 8 || s.num_layers() != 11 {
            return Err(Error::shape("FS code must hold layers 8..=18"));
        }
        Ok(LatentFS { f7, s })
    }
}

/// `a·m + b·(1−m)` per channel. `m` selects `a`.
pub fn blend_features(a: &FeatureMap, b: &FeatureMap, m: &BinaryMask) -> Result<FeatureMap> {
    if a.stage != b.stage || a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "cannot blend {} {:?} with {} {:?}",
            a.stage,
            a.shape(),
            b.stage,
            b.shape()
        )));
    }
    if m.height != a.height || m.width != a.width {
        return Err(Error::shape(format!(
            "mask {}x{} does not gate features {}x{}",
            m.height, m.width, a.height, a.width
        )));
    }
    let c = a.channels;
    let data = a
        .data
        .chunks_exact(c)
        .zip(b.data.chunks_exact(c))
        .zip(&m.data)
        .flat_map(|((ac, bc), &mv)| {
            // Select rather than compute, so gated cells are bit-identical copies.
            if mv == 1.0 { ac } else { bc }.iter().copied()
        })
        .collect();
    Ok(FeatureMap {
        stage: a.stage,
        height: a.height,
        width: a.width,
        channels: c,
        data,
    })
}

/// Area-average onto a coarser grid, then threshold at 0.5 (ties → 1).
pub fn downsample_mask(m: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("target resolution must be positive"));
    }
    if target_h > m.height || target_w > m.width {
        return Err(Error::invalid(format!(
            "cannot downsample {}x{} mask to larger {target_h}x{target_w}",
            m.height, m.width
        )));
    }
    let sh = m.height as f64 / target_h as f64;
    let sw = m.width as f64 / target_w as f64;
    let mut data = Vec::with_capacity(target_h * target_w);
    for ty in 0..target_h {
        let (y0, y1) = (ty as f64 * sh, (ty + 1) as f64 * sh);
        for tx in 0..target_w {
            let (x0, x1) = (tx as f64 * sw, (tx + 1) as f64 * sw);
            // Exact area coverage, so non-integer ratios stay well defined.
            let mut acc = 0.0;
            for y in y0.floor() as usize..(y1.ceil() as usize).min(m.height) {
                let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                for x in x0.floor() as usize..(x1.ceil() as usize).min(m.width) {
                    let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                    acc += wy * wx * m.data[y * m.width + x];
                }
            }
            let avg = acc / (sh * sw);
            data.push(if avg >= 0.5 - 1e-12 { 1.0 } else { 0.0 });
        }
    }
    Ok(BinaryMask {
        height: target_h,
        width: target_w,
        data,
    })
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upsample_mask(m: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    if target_h < m.height
        || target_w < m.width
        || target_h % m.height != 0
        || target_w % m.width != 0
    {
        return Err(Error::invalid(format!(
            "cannot upsample {}x{} mask to {target_h}x{target_w}",
            m.height, m.width
        )));
    }
    let (fy, fx) = (target_h / m.height, target_w / m.width);
    Ok(BinaryMask::from_fn(target_h, target_w, |y, x| {
        m.get(y / fy, x / fx)
    }))
}

/// Resamples to any resolution: area-average down, nearest up.
pub fn resize_mask(m: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    if (target_h, target_w) == (m.height, m.width) {
        Ok(m.clone())
    } else if target_h <= m.height && target_w <= m.width {
        downsample_mask(m, target_h, target_w)
    } else {
        upsample_mask(m, target_h, target_w)
    }
}

/// Morphological dilation with a `(2r+1)²` square element.
pub fn dilate_mask(m: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return m.clone();
    }
    let (h, w) = (m.height, m.width);
    // Separable: a square max filter is a row pass followed by a column pass.
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[y * w + x] = (lo..=hi).map(|xx| m.data[y * w + xx]).fold(0.0, f64::max);
        }
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            data[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(0.0, f64::max);
        }
    }
    BinaryMask {
        height: h,
        width: w,
        data,
    }
}

/// Cells that are non-hair in both masks: `(1−a)·(1−b)`.
pub fn mask_intersection_nonhair(hair_a: &BinaryMask, hair_b: &BinaryMask) -> Result<BinaryMask> {
    hair_a.check_same(hair_b)?;
    Ok(BinaryMask {
        height: hair_a.height,
        width: hair_a.width,
        data: hair_a
            .data
            .iter()
            .zip(&hair_b.data)
            .map(|(a, b)| (1.0 - a) * (1.0 - b))
            .collect(),
    })
}
