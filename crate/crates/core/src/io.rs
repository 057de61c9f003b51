//! On-disk formats.
//!
//! * Images: 8-bit RGB PNG.
//! * Masks: 8-bit grayscale PNG, 0 or 255 (any value ≥ 128 reads as on).
//! * Feature maps: `HPFM` container, see [`write_feature_map`].
//! * Latents: `HPLT` container with an optional FS feature block, see
//!   [`write_latent`].
//!
//! All multi-byte integers and floats are little-endian. Floats are stored
//! as 32-bit, so values round-trip to `f32` precision.

use std::io::Read;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{
    BinaryMask, FeatureMap, Image, LatentFS, LatentSlice, LatentWPlus, StageId, LATENT_DIM,
    NUM_LAYERS,
};

const FEATURE_MAGIC: &[u8; 4] = b"HPFM";
const LATENT_MAGIC: &[u8; 4] = b"HPLT";
const FORMAT_VERSION: u16 = 1;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_image_png(img: &Image) -> Result<Vec<u8>> {
    let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let rgb = RgbImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .ok_or_else(|| Error::invalid("image buffer size"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes any supported raster format into an RGB image.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let rgb = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    Image::new(h as usize, w as usize, data)
}

pub fn encode_mask_png(m: &BinaryMask) -> Result<Vec<u8>> {
    let buf: Vec<u8> = m
        .data()
        .iter()
        .map(|&v| if v == 1.0 { 255 } else { 0 })
        .collect();
    let gray = GrayImage::from_raw(m.width() as u32, m.height() as u32, buf)
        .ok_or_else(|| Error::invalid("mask buffer size"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    gray.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let gray = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray
        .into_raw()
        .into_iter()
        .map(|b| if b >= 128 { 1.0 } else { 0.0 })
        .collect();
    BinaryMask::new(h as usize, w as usize, data)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    decode_image(&read_file(path)?)
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_image_png(img)?)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask(&read_file(path)?)
}

pub fn save_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write_file(path, &encode_mask_png(m)?)
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    what: &'static str,
    inner: &'a [u8],
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            what: self.what,
            reason: "unexpected end of data".into(),
        })?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        if self.bytes(4)? != expected {
            return Err(Error::Format {
                what: self.what,
                reason: "bad magic".into(),
            });
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                what: self.what,
                reason: format!("unsupported version {version}"),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if !self.inner.is_empty() {
            return Err(Error::Format {
                what: self.what,
                reason: format!("{} trailing bytes", self.inner.len()),
            });
        }
        Ok(())
    }
}

/// `HPFM` | u16 version | u8 stage-name length | stage name (ASCII) |
/// u32 height | u32 width | u32 channels | f32 × h·w·c (HWC order).
pub fn encode_feature_map(f: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + f.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    let name = f.stage().name().as_bytes();
    out.push(name.len() as u8);
    out.extend_from_slice(name);
    put_u32(&mut out, f.height() as u32);
    put_u32(&mut out, f.width() as u32);
    put_u32(&mut out, f.channels() as u32);
    put_f32s(&mut out, f.data());
    out
}

fn read_feature_map(r: &mut Reader<'_>) -> Result<FeatureMap> {
    r.magic(FEATURE_MAGIC)?;
    let len = r.u8()? as usize;
    let name = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Format {
        what: "feature map",
        reason: "stage name is not UTF-8".into(),
    })?;
    let stage = StageId::parse(&name)?;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let data = r.f32s(h * w * c)?;
    FeatureMap::new(stage, h, w, c, data)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader {
        what: "feature map",
        inner: bytes,
    };
    let f = read_feature_map(&mut r)?;
    r.finish()?;
    Ok(f)
}

/// A W+ code with an optional FS embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFile {
    pub w: LatentWPlus,
    pub fs: Option<LatentFS>,
}

/// `HPLT` | u16 version | u32 layers (18) | u32 dim (512) | f32 × 18·512 |
/// u8 has-FS flag | [embedded `HPFM` block for F₇].
///
/// The FS code's layers 8–18 are the W+ layers, so only F₇ is stored.
pub fn encode_latent(file: &LatentFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LATENT_MAGIC);
    put_u16(&mut out, FORMAT_VERSION);
    put_u32(&mut out, NUM_LAYERS as u32);
    put_u32(&mut out, LATENT_DIM as u32);
    put_f32s(&mut out, file.w.as_slice());
    match &file.fs {
        Some(fs) => {
            out.push(1);
            out.extend_from_slice(&encode_feature_map(&fs.f7));
        }
        None => out.push(0),
    }
    out
}

pub fn decode_latent(bytes: &[u8]) -> Result<LatentFile> {
    let mut r = Reader {
        what: "latent file",
        inner: bytes,
    };
    r.magic(LATENT_MAGIC)?;
    let (layers, dim) = (r.u32()? as usize, r.u32()? as usize);
    if layers != NUM_LAYERS || dim != LATENT_DIM {
        return Err(Error::Format {
            what: "latent file",
            reason: format!("expected {NUM_LAYERS}x{LATENT_DIM}, found {layers}x{dim}"),
        });
    }
    let w = LatentWPlus::from_flat(r.f32s(layers * dim)?)?;
    let fs = match r.u8()? {
        0 => None,
        1 => {
            let f7 = read_feature_map(&mut r)?;
            let s = LatentSlice::new(8, w.slice(8, 18).as_slice().to_vec())?;
            Some(LatentFS::new(f7, s)?)
        }
        flag => {
            return Err(Error::Format {
                what: "latent file",
                reason: format!("bad FS flag {flag}"),
            })
        }
    };
    r.finish()?;
    Ok(LatentFile { w, fs })
}

pub fn save_latent(path: &Path, file: &LatentFile) -> Result<()> {
    write_file(path, &encode_latent(file))
}

pub fn load_latent(path: &Path) -> Result<LatentFile> {
    decode_latent(&read_file(path)?)
}

pub fn save_feature_map(path: &Path, f: &FeatureMap) -> Result<()> {
    write_file(path, &encode_feature_map(f))
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    decode_feature_map(&read_file(path)?)
}

/// Writes text (JSON/TOML reports, curves) creating parent directories.
pub fn save_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

pub fn load_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|_| Error::Format {
        what: "text file",
        reason: format!("{} is not UTF-8", path.display()),
    })
}

/// Raw writer for callers streaming binary blobs (inverter weights).
pub fn save_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, bytes)
}

pub fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    read_file(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mask_png_is_0_or_255() {
        let m = BinaryMask::from_fn(3, 4, |y, x| (x + y) % 3 == 0);
        let png = encode_mask_png(&m).unwrap();
        let gray = image::load_from_memory(&png).unwrap().to_luma8();
        assert!(gray.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        assert_eq!(decode_mask(&png).unwrap(), m);
    }

    #[test]
    fn image_png_round_trip_at_8_bit() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 15) as f64 / 255.0).collect();
        let img = Image::new(2, 3, data).unwrap();
        let back = decode_image(&encode_image_png(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(decode_image(b"not a png").is_err());
        assert!(decode_feature_map(b"HPFM").is_err());
        assert!(decode_latent(b"XXXX\x01\x00").is_err());
    }

    #[test]
    fn feature_container_layout() {
        let f = FeatureMap::new(StageId::Color, 1, 2, 1, vec![1.5, -2.0]).unwrap();
        let bytes = encode_feature_map(&f);
        assert_eq!(&bytes[..4], b"HPFM");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6] as usize, "color".len());
        assert_eq!(&bytes[7..12], b"color");
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.0f32).to_le_bytes());
    }

    proptest! {
        #[test]
        fn latent_file_round_trips_at_f32(vals in proptest::collection::vec(-3.0f64..3.0, 8), with_fs in any::<bool>()) {
            let flat: Vec<f64> = (0..NUM_LAYERS * LATENT_DIM).map(|i| vals[i % 8] * (1.0 + (i % 5) as f64)).collect();
            let w = LatentWPlus::from_flat(flat).unwrap();
            let fs = with_fs.then(|| {
                let f7 = FeatureMap::new(StageId::Style, 2, 2, 2, vals.clone()).unwrap();
                LatentFS::new(f7, w.slice(8, 18)).unwrap()
            });
            let file = LatentFile { w, fs };
            let back = decode_latent(&encode_latent(&file)).unwrap();
            for (a, b) in file.w.as_slice().iter().zip(back.w.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
            prop_assert_eq!(file.fs.is_some(), back.fs.is_some());
            // re-encoding the decoded value is byte-stable
            prop_assert_eq!(encode_latent(&back), encode_latent(&file));
        }
    }
}
