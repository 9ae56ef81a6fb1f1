//! Weak (crop + flip) and strong (RandAugment-style) augmentation.
//!
//! Magnitudes follow the usual RandAugment ranges: an integer magnitude in
//! `0..=10` is mapped linearly onto each op's range, signed ops flip their
//! sign with probability one half.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, ImageSample};
use crate::error::{Error, Result};

pub const MAX_MAGNITUDE: u32 = 10;

const MAX_ROTATE_DEG: f32 = 30.0;
const MAX_SHEAR: f32 = 0.3;
const MAX_TRANSLATE_FRAC: f32 = 150.0 / 331.0;
const MAX_ENHANCE: f32 = 0.9;
const MAX_POSTERIZE_DROP_BITS: f32 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugOp {
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Identity,
    Contrast,
    Color,
    Brightness,
    Equalize,
    Solarize,
    Posterize,
    AutoContrast,
}

impl AugOp {
    pub const ALL: [AugOp; 14] = [
        AugOp::Rotate,
        AugOp::Sharpness,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::Identity,
        AugOp::Contrast,
        AugOp::Color,
        AugOp::Brightness,
        AugOp::Equalize,
        AugOp::Solarize,
        AugOp::Posterize,
        AugOp::AutoContrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::Rotate => "Rotate",
            AugOp::Sharpness => "Sharpness",
            AugOp::ShearX => "Shear-x",
            AugOp::ShearY => "Shear-y",
            AugOp::TranslateX => "Translate-x",
            AugOp::TranslateY => "Translate-y",
            AugOp::Identity => "Identity",
            AugOp::Contrast => "Contrast",
            AugOp::Color => "Color",
            AugOp::Brightness => "Brightness",
            AugOp::Equalize => "Equalize",
            AugOp::Solarize => "Solarize",
            AugOp::Posterize => "Posterize",
            AugOp::AutoContrast => "AutoContrast",
        }
    }

    fn signed(self) -> bool {
        matches!(
            self,
            AugOp::Rotate
                | AugOp::ShearX
                | AugOp::ShearY
                | AugOp::TranslateX
                | AugOp::TranslateY
                | AugOp::Sharpness
                | AugOp::Contrast
                | AugOp::Color
                | AugOp::Brightness
        )
    }

    /// Applies the op at `magnitude` with an explicit sign.
    pub fn apply(self, img: &Image, magnitude: u32, negate: bool) -> Image {
        let frac = magnitude.min(MAX_MAGNITUDE) as f32 / MAX_MAGNITUDE as f32;
        let sign = if negate && self.signed() { -1.0 } else { 1.0 };
        let enhance = 1.0 + sign * MAX_ENHANCE * frac;
        match self {
            AugOp::Identity => img.clone(),
            AugOp::Rotate => rotate(img, sign * MAX_ROTATE_DEG * frac),
            AugOp::ShearX => affine(img, |x, y| (x + sign * MAX_SHEAR * frac * y, y)),
            AugOp::ShearY => affine(img, |x, y| (x, y + sign * MAX_SHEAR * frac * x)),
            AugOp::TranslateX => {
                let t = sign * MAX_TRANSLATE_FRAC * frac * img.width as f32;
                affine(img, |x, y| (x - t, y))
            }
            AugOp::TranslateY => {
                let t = sign * MAX_TRANSLATE_FRAC * frac * img.height as f32;
                affine(img, |x, y| (x, y - t))
            }
            AugOp::Brightness => blend(&Image::filled(img.channels, img.height, img.width, 0.0), img, enhance),
            AugOp::Color => blend(&grayscale_like(img), img, enhance),
            AugOp::Contrast => {
                let gray = grayscale_like(img);
                let mean = gray.data.iter().sum::<f32>() / gray.data.len() as f32;
                blend(&Image::filled(img.channels, img.height, img.width, mean), img, enhance)
            }
            AugOp::Sharpness => blend(&smooth(img), img, enhance),
            AugOp::Equalize => equalize(img),
            AugOp::AutoContrast => autocontrast(img),
            AugOp::Solarize => {
                let threshold = 1.0 - frac;
                map_pixels(img, |v| if v >= threshold { 1.0 - v } else { v })
            }
            AugOp::Posterize => {
                let bits = 8 - (MAX_POSTERIZE_DROP_BITS * frac).round() as u32;
                let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
                map_pixels(img, |v| (quantize(v) & mask) as f32 / 255.0)
            }
        }
    }
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: PolicyKind,
    pub n_ops: usize,
    pub magnitude: u32,
    pub op_table: Vec<AugOp>,
}

impl AugmentPolicy {
    pub fn weak() -> Self {
        Self {
            kind: PolicyKind::Weak,
            n_ops: 0,
            magnitude: 0,
            op_table: AugOp::ALL.to_vec(),
        }
    }

    /// Strong policy drawing `n_ops` ops with replacement from `ops`
    /// (all 14 when `None`).
    pub fn strong<S: AsRef<str>>(n_ops: usize, magnitude: u32, ops: Option<&[S]>) -> Result<Self> {
        if magnitude > MAX_MAGNITUDE {
            return Err(Error::Policy(format!(
                "magnitude {magnitude} outside 0..={MAX_MAGNITUDE}"
            )));
        }
        let op_table = match ops {
            None => AugOp::ALL.to_vec(),
            Some(names) => names
                .iter()
                .map(|n| n.as_ref().parse())
                .collect::<Result<Vec<_>>>()?,
        };
        if op_table.is_empty() {
            return Err(Error::Policy("empty op table".into()));
        }
        Ok(Self {
            kind: PolicyKind::Strong,
            n_ops,
            magnitude,
            op_table,
        })
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::strong::<&str>(3, 5, None).expect("default policy is valid")
    }
}

/// Geometry of the weak pipeline. Images are first resized to
/// `working_size`, then cropped to `crop`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakConfig {
    pub working_size: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub random_crop: bool,
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self {
            working_size: 256,
            crop: 224,
            flip_prob: 0.5,
            random_crop: true,
        }
    }
}

impl WeakConfig {
    pub fn desk(working_size: usize, crop: usize) -> Self {
        Self {
            working_size,
            crop,
            ..Self::default()
        }
    }

    /// Center crop, no flip.
    pub fn deterministic(&self) -> Self {
        Self {
            flip_prob: 0.0,
            random_crop: false,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewTriple {
    pub weak1: ImageSample,
    pub weak2: ImageSample,
    pub strong: ImageSample,
    pub source_id: String,
}

/// Per-channel affine normalization applied when images enter the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Normalization {
    pub fn apply(&self, values: &mut [f32]) {
        for v in values {
            *v = (*v - self.mean) / self.std;
        }
    }
}

fn to_working_size(img: &Image, cfg: &WeakConfig) -> Result<Image> {
    let resized = if img.height == cfg.working_size && img.width == cfg.working_size {
        img.clone()
    } else {
        resize_bilinear(img, cfg.working_size, cfg.working_size)
    };
    if resized.height < cfg.crop || resized.width < cfg.crop {
        return Err(Error::ImageTooSmall {
            height: resized.height,
            width: resized.width,
            crop: cfg.crop,
        });
    }
    Ok(resized)
}

pub fn weak_augment<R: Rng + ?Sized>(img: &Image, cfg: &WeakConfig, rng: &mut R) -> Result<Image> {
    if img.height < cfg.crop || img.width < cfg.crop {
        return Err(Error::ImageTooSmall {
            height: img.height,
            width: img.width,
            crop: cfg.crop,
        });
    }
    let img = to_working_size(img, cfg)?;
    let (y0, x0) = if cfg.random_crop {
        (
            rng.gen_range(0..=img.height - cfg.crop),
            rng.gen_range(0..=img.width - cfg.crop),
        )
    } else {
        ((img.height - cfg.crop) / 2, (img.width - cfg.crop) / 2)
    };
    let flip = cfg.flip_prob > 0.0 && rng.gen::<f64>() < cfg.flip_prob;
    Ok(crop(&img, y0, x0, cfg.crop, flip))
}

/// Deterministic eval preprocessing: resize then center crop.
pub fn center_crop(img: &Image, cfg: &WeakConfig) -> Result<Image> {
    let img = to_working_size(img, cfg)?;
    Ok(crop(
        &img,
        (img.height - cfg.crop) / 2,
        (img.width - cfg.crop) / 2,
        cfg.crop,
        false,
    ))
}

pub fn strong_augment<R: Rng + ?Sized>(
    img: &Image,
    cfg: &WeakConfig,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Image> {
    if policy.kind != PolicyKind::Strong {
        return Err(Error::Policy("strong_augment needs a strong policy".into()));
    }
    let mut out = weak_augment(img, cfg, rng)?;
    for _ in 0..policy.n_ops {
        let op = policy.op_table[rng.gen_range(0..policy.op_table.len())];
        let negate = rng.gen::<bool>();
        out = op.apply(&out, policy.magnitude, negate);
    }
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn make_views<R: Rng + ?Sized>(
    sample: &ImageSample,
    cfg: &WeakConfig,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<ViewTriple> {
    let view = |image| ImageSample {
        sample_id: sample.sample_id.clone(),
        image,
        label: sample.label,
    };
    let weak1 = view(weak_augment(&sample.image, cfg, rng)?);
    let weak2 = view(weak_augment(&sample.image, cfg, rng)?);
    let strong = view(strong_augment(&sample.image, cfg, policy, rng)?);
    Ok(ViewTriple {
        weak1,
        weak2,
        strong,
        source_id: sample.sample_id.clone(),
    })
}

fn crop(img: &Image, y0: usize, x0: usize, size: usize, flip: bool) -> Image {
    let mut out = Image::filled(img.channels, size, size, 0.0);
    for c in 0..img.channels {
        for y in 0..size {
            for x in 0..size {
                let sx = if flip { x0 + size - 1 - x } else { x0 + x };
                *out.at_mut(c, y, x) = img.at(c, y0 + y, sx);
            }
        }
    }
    out
}

pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    let mut out = Image::filled(img.channels, height, width, 0.0);
    let sy = img.height as f32 / height as f32;
    let sx = img.width as f32 / width as f32;
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f32);
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f32);
            for c in 0..img.channels {
                *out.at_mut(c, y, x) = sample_bilinear(img, c, fy, fx).unwrap_or(0.0);
            }
        }
    }
    out
}

fn sample_bilinear(img: &Image, c: usize, fy: f32, fx: f32) -> Option<f32> {
    if fy < -0.5 || fx < -0.5 || fy > img.height as f32 - 0.5 || fx > img.width as f32 - 0.5 {
        return None;
    }
    let fy = fy.clamp(0.0, (img.height - 1) as f32);
    let fx = fx.clamp(0.0, (img.width - 1) as f32);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (dy, dx) = (fy - y0 as f32, fx - x0 as f32);
    let top = img.at(c, y0, x0) * (1.0 - dx) + img.at(c, y0, x1) * dx;
    let bottom = img.at(c, y1, x0) * (1.0 - dx) + img.at(c, y1, x1) * dx;
    Some(top * (1.0 - dy) + bottom * dy)
}

/// Inverse-maps each output pixel through `to_source` (coordinates relative
/// to the image center); out-of-bounds samples are filled with zero.
fn affine(img: &Image, to_source: impl Fn(f32, f32) -> (f32, f32)) -> Image {
    let cy = (img.height as f32 - 1.0) / 2.0;
    let cx = (img.width as f32 - 1.0) / 2.0;
    let mut out = Image::filled(img.channels, img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = to_source(x as f32 - cx, y as f32 - cy);
            for c in 0..img.channels {
                *out.at_mut(c, y, x) = sample_bilinear(img, c, sy + cy, sx + cx).unwrap_or(0.0);
            }
        }
    }
    out
}

fn rotate(img: &Image, degrees: f32) -> Image {
    let (s, c) = degrees.to_radians().sin_cos();
    affine(img, |x, y| (c * x + s * y, -s * x + c * y))
}

fn map_pixels(img: &Image, f: impl Fn(f32) -> f32) -> Image {
    Image {
        data: img.data.iter().map(|&v| f(v)).collect(),
        ..img.clone()
    }
}

/// `degenerate + factor * (img - degenerate)`, clamped to `[0, 1]`.
fn blend(degenerate: &Image, img: &Image, factor: f32) -> Image {
    Image {
        data: degenerate
            .data
            .iter()
            .zip(&img.data)
            .map(|(&d, &v)| (d + factor * (v - d)).clamp(0.0, 1.0))
            .collect(),
        ..img.clone()
    }
}

fn grayscale_like(img: &Image) -> Image {
    if img.channels != 3 {
        return img.clone();
    }
    let n = img.height * img.width;
    let mut out = img.clone();
    for i in 0..n {
        let g = 0.299 * img.data[i] + 0.587 * img.data[n + i] + 0.114 * img.data[2 * n + i];
        for c in 0..3 {
            out.data[c * n + i] = g;
        }
    }
    out
}

/// 3x3 smoothing with center weight 5, border pixels left untouched.
fn smooth(img: &Image) -> Image {
    let mut out = img.clone();
    if img.height < 3 || img.width < 3 {
        return out;
    }
    for c in 0..img.channels {
        for y in 1..img.height - 1 {
            for x in 1..img.width - 1 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let w = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        acc += w * img.at(c, y + dy - 1, x + dx - 1);
                    }
                }
                *out.at_mut(c, y, x) = acc / 13.0;
            }
        }
    }
    out
}

fn quantize(v: f32) -> u32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u32
}

fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        let plane = img.plane(c);
        let mut hist = [0usize; 256];
        for &v in plane {
            hist[quantize(v) as usize] += 1;
        }
        let total = plane.len();
        let mut cdf = [0usize; 256];
        let mut running = 0;
        for (i, h) in hist.iter().enumerate() {
            running += h;
            cdf[i] = running;
        }
        let cdf_min = cdf.iter().copied().find(|&x| x > 0).unwrap_or(0);
        if total == cdf_min {
            continue;
        }
        let scale = 255.0 / (total - cdf_min) as f32;
        for (dst, &v) in out.plane_mut(c).iter_mut().zip(plane) {
            let level = cdf[quantize(v) as usize].saturating_sub(cdf_min);
            *dst = (level as f32 * scale).round() / 255.0;
        }
    }
    out
}

fn autocontrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        let plane = img.plane(c);
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi - lo <= f32::EPSILON {
            continue;
        }
        for (dst, &v) in out.plane_mut(c).iter_mut().zip(plane) {
            *dst = (v - lo) / (hi - lo);
        }
    }
    out
}
