//! Synthetic 7-class image dataset.
//!
//! Each class is a parameterized motif (stripes, checkerboard, ring, cross,
//! frame, disk) drawn with random colours, phase, scale, orientation jitter
//! and pixel noise, so that class identity lives in shape and not in any
//! fixed pixel pattern. Every motif keeps its class under a horizontal
//! flip, since the weak augmentation flips.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetManifest, Image, LabelSpace, ManifestRecord, Split, DEFAULT_CLASS_NAMES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motif {
    HorizontalStripes,
    VerticalStripes,
    Ring,
    Checker,
    Cross,
    Frame,
    Disk,
}

pub const MOTIFS: [Motif; 7] = [
    Motif::HorizontalStripes,
    Motif::VerticalStripes,
    Motif::Ring,
    Motif::Checker,
    Motif::Cross,
    Motif::Frame,
    Motif::Disk,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<String>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub eval: Vec<usize>,
    pub image_size: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    /// Max orientation perturbation, in degrees.
    pub angle_jitter: f64,
    /// Relative spread of motif frequency and radius.
    pub scale_jitter: f64,
    /// Minimum luminance gap between foreground and background.
    pub min_contrast: f64,
    pub seed: u64,
}

/// Per-class shares of the training pool, in the default class order
/// (happiness, sadness, surprise, fear, anger, disgust, neutral).
pub const SKEWED_SHARES: [usize; 7] = [4772, 1982, 1290, 281, 705, 717, 2524];

/// Splits `total` into parts proportional to `weights`, largest remainders
/// first. Every part is at least 1, which can push the sum past `total`.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / sum as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|x| (x.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut i = 0;
    while parts.iter().sum::<usize>() < total {
        parts[order[i % order.len()]] += 1;
        i += 1;
    }
    parts
}

impl SynthSpec {
    /// 100 labels (10 for fear, 15 for every other class) out of a skewed
    /// 1000-image training pool, plus a balanced eval split.
    pub fn skewed_100() -> Self {
        let pool = apportion(1000, &SKEWED_SHARES);
        let labeled = vec![15, 15, 15, 10, 15, 15, 15];
        let unlabeled = pool.iter().zip(&labeled).map(|(p, l)| p.saturating_sub(*l)).collect();
        Self {
            classes: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            labeled,
            unlabeled,
            eval: vec![430; 7],
            image_size: 16,
            noise: 0.05,
            angle_jitter: 8.0,
            scale_jitter: 0.15,
            min_contrast: 0.3,
            seed: 0,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let k = self.classes.len();
        if k < 2 || k > MOTIFS.len() {
            errs.push(format!("classes: need 2..={} classes, got {k}", MOTIFS.len()));
        }
        if let Err(e) = LabelSpace::new(self.classes.iter().cloned()) {
            errs.push(format!("classes: {e}"));
        }
        for (name, counts) in [("labeled", &self.labeled), ("unlabeled", &self.unlabeled), ("eval", &self.eval)] {
            if counts.len() != k {
                errs.push(format!("{name}: {} counts for {k} classes", counts.len()));
            }
        }
        if self.labeled.contains(&0) {
            errs.push("labeled: every class needs at least 1 labeled sample".into());
        }
        if self.image_size < 8 {
            errs.push(format!("image_size: {} is below the minimum of 8", self.image_size));
        }
        for (name, v, hi) in [
            ("noise", self.noise, 1.0),
            ("angle_jitter", self.angle_jitter, 22.5),
            ("scale_jitter", self.scale_jitter, 0.5),
            ("min_contrast", self.min_contrast, 0.8),
        ] {
            if !(v.is_finite() && (0.0..=hi).contains(&v)) {
                errs.push(format!("{name}: {v} outside [0, {hi}]"));
            }
        }
        errs
    }

    /// Starts from [`SynthSpec::skewed_100`], then applies the keys of
    /// `text` (a flat TOML table) and the overrides, in that order.
    pub fn resolve(text: Option<&str>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match toml::Value::try_from(Self::skewed_100()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("spec serializes to a table"),
        };
        if let Some(text) = text {
            let file: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(vec![format!("parse error: {}", e.message())]))?;
            table.extend(file);
        }
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let spec: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn sharpen(v: f64) -> f64 {
    1.0 / (1.0 + (-8.0 * v).exp())
}

/// Draws one image of `motif`.
pub fn render<R: Rng + ?Sized>(motif: Motif, spec: &SynthSpec, rng: &mut R) -> Image {
    let s = spec.image_size;
    let (fg, bg) = loop {
        let fg = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let bg = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        if (luminance(fg) - luminance(bg)).abs() >= spec.min_contrast {
            break (fg, bg);
        }
    };
    let jitter = rng.gen_range(-spec.angle_jitter..=spec.angle_jitter).to_radians();
    let scale = 1.0 + rng.gen_range(-spec.scale_jitter..=spec.scale_jitter);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (cx, cy) = (rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25));
    // cycles across the image for stripes and checks
    let freq = 2.5 * scale;
    let stripes = |x: f64, y: f64, base_deg: f64| {
        let t = base_deg.to_radians() + jitter;
        (2.0 * PI * freq * 0.5 * (x * t.cos() + y * t.sin()) + phase).sin()
    };
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite std");
    let mut img = Image::filled(3, s, s, 0.0);
    for py in 0..s {
        for px in 0..s {
            let x = 2.0 * (px as f64 + 0.5) / s as f64 - 1.0;
            let y = 2.0 * (py as f64 + 0.5) / s as f64 - 1.0;
            // shape-local coordinates
            let (c, sn) = (jitter.cos(), jitter.sin());
            let (u, w) = ((x - cx) * c - (y - cy) * sn, (x - cx) * sn + (y - cy) * c);
            let v = match motif {
                Motif::HorizontalStripes => stripes(x, y, 90.0),
                Motif::VerticalStripes => stripes(x, y, 0.0),
                Motif::Checker => (PI * freq * u + phase).sin() * (PI * freq * w + phase).sin() * 2.0,
                Motif::Cross => {
                    let d = (u - w).abs().min((u + w).abs()) / std::f64::consts::SQRT_2;
                    (0.14 * scale - d) * 8.0
                }
                Motif::Frame => {
                    let m = u.abs().max(w.abs());
                    (0.12 - (m - 0.45 * scale).abs()) * 6.0
                }
                Motif::Ring => {
                    let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    (0.18 - (r - 0.5 * scale).abs()) * 6.0
                }
                Motif::Disk => {
                    let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    (0.45 * scale - r) * 5.0
                }
            };
            let a = sharpen(v);
            for c in 0..3 {
                let value = bg[c] + (fg[c] - bg[c]) * a + if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                *img.at_mut(c, py, px) = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Writes `images/*.png` and `manifest.tsv` under `out` and returns the
/// manifest. Identical specs produce byte-identical output.
pub fn generate_synthetic_dataset(spec: &SynthSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let label_space = LabelSpace::new(spec.classes.iter().cloned())?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(Error::io(format!("creating {}", images.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for (split, counts) in [
        (Split::Labeled, &spec.labeled),
        (Split::Unlabeled, &spec.unlabeled),
        (Split::Eval, &spec.eval),
    ] {
        for (class, &count) in counts.iter().enumerate() {
            for i in 0..count {
                let rel = format!("images/{split}-{}-{i:05}.png", label_space.names()[class]);
                render(MOTIFS[class], spec, &mut rng).save_png(&out.join(&rel))?;
                records.push(ManifestRecord {
                    path: rel,
                    label: (split != Split::Unlabeled).then_some(class),
                    split,
                });
            }
        }
    }
    let manifest = DatasetManifest::new(label_space, records, out.to_path_buf())?;
    manifest.save(&out.join("manifest.tsv"))?;
    Ok(manifest)
}
