//! Shared domain types: label spaces, probability vectors, images and the
//! dataset manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simplex membership tolerance for probability vectors.
pub const PROB_TOLERANCE: f64 = 1e-6;

/// Category names in the order used throughout the crate when no explicit
/// label space is given.
pub const DEFAULT_CLASS_NAMES: [&str; 7] = [
    "happiness",
    "sadness",
    "surprise",
    "fear",
    "anger",
    "disgust",
    "neutral",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::LabelSpace(format!(
                "need at least 2 classes, got {}",
                names.len()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name.contains(',') || name.chars().any(char::is_whitespace) {
                return Err(Error::LabelSpace(format!("invalid class name `{name}`")));
            }
            if names[..i].contains(name) {
                return Err(Error::LabelSpace(format!("duplicate class name `{name}`")));
            }
        }
        Ok(Self { names })
    }

    /// Generic names `class0..classN` for `n` classes.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("class{i}")))
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn check_label(&self, index: usize) -> Result<()> {
        if index < self.num_classes() {
            Ok(())
        } else {
            Err(Error::LabelOutOfRange {
                index,
                num_classes: self.num_classes(),
            })
        }
    }
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self {
            names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A point on the probability simplex over `C` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates simplex membership within [`PROB_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidProbability(format!(
                "need at least 2 entries, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability(format!(
                    "entry {i} = {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    /// Softmax of `logits`, shifted by the maximum before exponentiation.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLogit { index, value });
        }
        if logits.len() < 2 {
            return Err(Error::InvalidProbability(format!(
                "need at least 2 logits, got {}",
                logits.len()
            )));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(Self(exps.into_iter().map(|e| e / total).collect()))
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn one_hot(index: usize, num_classes: usize) -> Self {
        let mut v = vec![0.0; num_classes];
        v[index] = 1.0;
        Self(v)
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    /// Smallest index attaining the maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    /// Elementwise mean of two distributions over the same classes.
    pub fn average(&self, other: &Self) -> Result<Self> {
        if self.num_classes() != other.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes(),
                got: other.num_classes(),
            });
        }
        Ok(Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        ))
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.0
    }
}

pub fn make_probability_vector(logits: &[f64]) -> Result<ProbabilityVector> {
    ProbabilityVector::from_logits(logits)
}

pub fn argmax_class(p: &ProbabilityVector) -> usize {
    p.argmax()
}

pub fn average_distributions(
    p1: &ProbabilityVector,
    p2: &ProbabilityVector,
) -> Result<ProbabilityVector> {
    p1.average(p2)
}

/// Channel-major (`C x H x W`) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut img = Self::filled(3, h, w, 0.0);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                *img.at_mut(c, y as usize, x as usize) = px[c] as f32 / 255.0;
            }
        }
        Ok(img)
    }

    /// Writes an 8-bit RGB PNG; single-channel images are replicated.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            for c in 0..3 {
                let src = c.min(self.channels - 1);
                let v = self.at(src, y as usize, x as usize).clamp(0.0, 1.0);
                px[c] = (v * 255.0).round() as u8;
            }
        }
        out.save(path)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    pub image: Image,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub sample_id: String,
    pub class_index: usize,
    pub confidence: f64,
    pub accepted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: Option<usize>,
    pub split: Split,
}

/// Declarative listing of samples.
///
/// On disk the manifest is UTF-8, one record per line:
///
/// ```text
/// # classes=happiness,sadness,surprise,fear,anger,disgust,neutral
/// path	label	split
/// images/00001.png	3	labeled
/// images/00002.png		unlabeled
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub label_space: LabelSpace,
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

const MANIFEST_HEADER: &str = "path\tlabel\tsplit";

impl DatasetManifest {
    pub fn new(label_space: LabelSpace, records: Vec<ManifestRecord>, root: PathBuf) -> Result<Self> {
        let manifest = Self {
            label_space,
            records,
            root,
        };
        for (i, record) in manifest.records.iter().enumerate() {
            manifest.check_record(record).map_err(|message| Error::Manifest {
                path: manifest.root.display().to_string(),
                line: i + 1,
                message,
            })?;
        }
        Ok(manifest)
    }

    fn check_record(&self, record: &ManifestRecord) -> std::result::Result<(), String> {
        match (record.split, record.label) {
            (Split::Unlabeled, Some(_)) => Err("unlabeled record carries a label".into()),
            (Split::Labeled | Split::Eval, None) => {
                Err(format!("{} record has no label", record.split))
            }
            (_, Some(l)) if l >= self.label_space.num_classes() => Err(format!(
                "label {l} out of range for {} classes",
                self.label_space.num_classes()
            )),
            _ => Ok(()),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Fails on the first record whose file does not exist.
    pub fn check_paths(&self) -> Result<()> {
        for (i, record) in self.records.iter().enumerate() {
            if !self.resolve(record).is_file() {
                return Err(Error::Manifest {
                    path: self.root.display().to_string(),
                    line: i + 1,
                    message: format!("file `{}` not found", record.path),
                });
            }
        }
        Ok(())
    }

    /// Loads every image of `split`; the sample id is the record path.
    pub fn load_split(&self, split: Split) -> Result<Vec<ImageSample>> {
        self.split(split)
            .map(|record| {
                Ok(ImageSample {
                    sample_id: record.path.clone(),
                    image: Image::load(&self.resolve(record))?,
                    label: record.label,
                })
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# classes={}\n{MANIFEST_HEADER}\n", self.label_space.names().join(","));
        for r in &self.records {
            let label = r.label.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\n", r.path, label, r.split));
        }
        out
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let origin = root.display().to_string();
        let err = |line: usize, message: String| Error::Manifest {
            path: origin.clone(),
            line,
            message,
        };
        let mut label_space = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if let Some(classes) = line.strip_prefix("# classes=") {
                label_space = Some(
                    LabelSpace::new(classes.split(','))
                        .map_err(|e| err(lineno, e.to_string()))?,
                );
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') || line == MANIFEST_HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(lineno, format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let label = match fields[1] {
                "" => None,
                s => Some(
                    s.parse::<usize>()
                        .map_err(|_| err(lineno, format!("label `{s}` is not an integer")))?,
                ),
            };
            let split = fields[2].parse().map_err(|e| err(lineno, e))?;
            if fields[0].is_empty() {
                return Err(err(lineno, "empty path".into()));
            }
            records.push(ManifestRecord {
                path: fields[0].to_string(),
                label,
                split,
            });
        }
        let label_space = label_space.unwrap_or_default();
        Self::new(label_space, records, root)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(Error::io(format!("reading manifest {}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root)?;
        manifest.check_paths()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())
            .map_err(Error::io(format!("writing manifest {}", path.display())))
    }
}
