//! Samples, dataset indexing, region vocabularies and the manifest format.
//!
//! A manifest is UTF-8 text with one tab-separated record per line:
//!
//! ```text
//! image-path<TAB>parsing-path<TAB>identity<TAB>clothing<TAB>camera
//! ```
//!
//! Paths are relative to the dataset root. Lines starting with `#` and blank
//! lines are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image stored row-major as `height x width x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Validation(format!(
                "rgb buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-major copy (`3 x height x width`), the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    /// Mirror left-right.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, self.width - 1 - c, self.pixel(r, c));
            }
        }
        out
    }
}

/// Per-pixel region codes produced by a human parser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Validation(format!(
                "label buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.data[r * self.width + self.width - 1 - c] = self.get(r, c);
            }
        }
        out
    }
}

/// An (identity, clothing) pair: one person in one outfit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Appearance {
    pub identity: u32,
    pub clothing: u32,
}

impl Appearance {
    /// Globally unique appearance id: the identity in the high 32 bits, the
    /// identity-scoped clothing label in the low 32 bits.
    pub fn global_id(self) -> u64 {
        ((self.identity as u64) << 32) | self.clothing as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub parsing: LabelMap,
    pub identity: u32,
    /// Clothing label, scoped to `identity`.
    pub clothing: u32,
    pub camera: u32,
    /// Manifest paths relative to the dataset root; empty for in-memory samples.
    pub image_path: PathBuf,
    pub parsing_path: PathBuf,
}

impl Sample {
    pub fn new(
        image: RgbImage,
        parsing: LabelMap,
        identity: u32,
        clothing: u32,
        camera: u32,
    ) -> Result<Self> {
        if image.height != parsing.height || image.width != parsing.width {
            return Err(Error::Validation(format!(
                "image is {}x{} but parsing is {}x{}",
                image.height, image.width, parsing.height, parsing.width
            )));
        }
        Ok(Self {
            image,
            parsing,
            identity,
            clothing,
            camera,
            image_path: PathBuf::new(),
            parsing_path: PathBuf::new(),
        })
    }

    pub fn appearance(&self) -> Appearance {
        Appearance {
            identity: self.identity,
            clothing: self.clothing,
        }
    }

    pub fn appearance_id(&self) -> u64 {
        self.appearance().global_id()
    }
}

/// Immutable, ordered collection of samples with identity and appearance buckets.
#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    samples: Vec<Arc<Sample>>,
    by_identity: BTreeMap<u32, Vec<usize>>,
    by_appearance: BTreeMap<Appearance, Vec<usize>>,
}

impl DatasetIndex {
    pub fn from_samples(samples: Vec<Arc<Sample>>) -> Self {
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut by_appearance: BTreeMap<Appearance, Vec<usize>> = BTreeMap::new();
        for (pos, s) in samples.iter().enumerate() {
            by_identity.entry(s.identity).or_default().push(pos);
            by_appearance.entry(s.appearance()).or_default().push(pos);
        }
        Self {
            samples,
            by_identity,
            by_appearance,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Arc<Sample>] {
        &self.samples
    }

    pub fn get(&self, pos: usize) -> &Sample {
        &self.samples[pos]
    }

    pub fn by_identity(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.by_identity
    }

    pub fn by_appearance(&self) -> &BTreeMap<Appearance, Vec<usize>> {
        &self.by_appearance
    }

    pub fn identities(&self) -> Vec<u32> {
        self.by_identity.keys().copied().collect()
    }

    /// Appearance buckets of one identity, ordered by clothing label.
    pub fn appearances_of(&self, identity: u32) -> Vec<(Appearance, &[usize])> {
        let lo = Appearance {
            identity,
            clothing: 0,
        };
        let hi = Appearance {
            identity,
            clothing: u32::MAX,
        };
        self.by_appearance
            .range(lo..=hi)
            .map(|(a, v)| (*a, v.as_slice()))
            .collect()
    }

    /// Sub-index over the given positions, in the order given.
    pub fn subset(&self, positions: &[usize]) -> Self {
        Self::from_samples(positions.iter().map(|&p| self.samples[p].clone()).collect())
    }
}

/// Mapping from region names to parser codes, with the subset treated as clothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionVocabulary {
    pub labels: BTreeMap<String, u8>,
    pub clothing: Vec<String>,
}

/// Region names that carry head information and may never count as clothing.
pub const HEAD_REGIONS: [&str; 2] = ["hair", "face"];

impl Default for RegionVocabulary {
    fn default() -> Self {
        let labels = [
            ("background", 0u8),
            ("hair", 1),
            ("face", 2),
            ("upper-clothes", 3),
            ("pants", 4),
            ("skirt", 5),
            ("arms", 6),
            ("legs", 7),
            ("shoes", 8),
        ]
        .into_iter()
        .map(|(n, c)| (n.to_string(), c))
        .collect();
        Self {
            labels,
            clothing: vec!["upper-clothes".into(), "pants".into(), "skirt".into()],
        }
    }
}

impl RegionVocabulary {
    pub fn new(labels: BTreeMap<String, u8>, clothing: Vec<String>) -> Result<Self> {
        let v = Self { labels, clothing };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clothing.is_empty() {
            return Err(Error::Validation("clothing set is empty".into()));
        }
        for name in &self.clothing {
            if !self.labels.contains_key(name) {
                return Err(Error::Validation(format!(
                    "clothing region '{name}' is not a declared label"
                )));
            }
            if HEAD_REGIONS.contains(&name.as_str()) {
                return Err(Error::Validation(format!(
                    "head region '{name}' cannot be a clothing region"
                )));
            }
        }
        let mut codes = BTreeSet::new();
        for (name, code) in &self.labels {
            if !codes.insert(*code) {
                return Err(Error::Validation(format!(
                    "region code {code} ('{name}') is declared twice"
                )));
            }
        }
        if self.clothing_codes().len() >= self.labels.len() {
            return Err(Error::Validation(
                "clothing set must be a strict subset of the labels".into(),
            ));
        }
        Ok(())
    }

    pub fn code(&self, name: &str) -> Option<u8> {
        self.labels.get(name).copied()
    }

    pub fn clothing_codes(&self) -> BTreeSet<u8> {
        self.clothing
            .iter()
            .filter_map(|n| self.labels.get(n).copied())
            .collect()
    }

    pub fn head_codes(&self) -> BTreeSet<u8> {
        HEAD_REGIONS.iter().filter_map(|n| self.code(n)).collect()
    }

    /// 256-entry lookup: `Some(is_clothing)` for declared codes, `None` otherwise.
    pub fn lookup_table(&self) -> [Option<bool>; 256] {
        let clothing = self.clothing_codes();
        let mut table = [None; 256];
        for code in self.labels.values() {
            table[*code as usize] = Some(clothing.contains(code));
        }
        table
    }

    /// Reads a TOML vocabulary file with a `[labels]` table and a `clothing` list.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        v.validate()?;
        Ok(v)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("vocabulary serializes")
    }
}

/// One manifest record before the referenced files are read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub image_path: PathBuf,
    pub parsing_path: PathBuf,
    pub identity: u32,
    pub clothing: u32,
    pub camera: u32,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Load {
                row,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let num = |i: usize, what: &str| -> Result<u32> {
            fields[i].trim().parse::<u32>().map_err(|_| Error::Load {
                row,
                message: format!("{what} '{}' is not a non-negative integer", fields[i]),
            })
        };
        rows.push(ManifestRow {
            image_path: PathBuf::from(fields[0]),
            parsing_path: PathBuf::from(fields[1]),
            identity: num(2, "identity")?,
            clothing: num(3, "clothing")?,
            camera: num(4, "camera")?,
        });
    }
    Ok(rows)
}

pub fn format_manifest(rows: &[ManifestRow]) -> String {
    let mut out = String::from("# image\tparsing\tidentity\tclothing\tcamera\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.image_path.display(),
            r.parsing_path.display(),
            r.identity,
            r.clothing,
            r.camera
        );
    }
    out
}

pub fn manifest_rows(index: &DatasetIndex) -> Vec<ManifestRow> {
    index
        .samples()
        .iter()
        .map(|s| ManifestRow {
            image_path: s.image_path.clone(),
            parsing_path: s.parsing_path.clone(),
            identity: s.identity,
            clothing: s.clothing,
            camera: s.camera,
        })
        .collect()
}

pub fn write_manifest(index: &DatasetIndex, path: &Path) -> Result<()> {
    fs::write(path, format_manifest(&manifest_rows(index))).map_err(|e| Error::io(path, e))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    LabelMap::new(h as usize, w as usize, gray.into_raw())
}

/// Quantizes to 8 bits per channel and writes a PNG.
pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::Validation("rgb buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let buf = image::GrayImage::from_raw(
        labels.width as u32,
        labels.height as u32,
        labels.data.clone(),
    )
    .ok_or_else(|| Error::Validation("label buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads every sample referenced by `manifest`, resolving paths against `root`.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let rows = parse_manifest(&text)?;
    let mut samples = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let img_path = root.join(&row.image_path);
        let par_path = root.join(&row.parsing_path);
        for p in [&img_path, &par_path] {
            if !p.is_file() {
                return Err(Error::Load {
                    row: i + 1,
                    message: format!("missing file {}", p.display()),
                });
            }
        }
        let image = read_rgb(&img_path)?;
        let parsing = read_labels(&par_path)?;
        let mut sample = Sample::new(image, parsing, row.identity, row.clothing, row.camera)
            .map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!(
                    "record {} ({}): {m}",
                    i + 1,
                    row.image_path.display()
                )),
                other => other,
            })?;
        sample.image_path = row.image_path;
        sample.parsing_path = row.parsing_path;
        samples.push(Arc::new(sample));
    }
    Ok(DatasetIndex::from_samples(samples))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitRule {
    /// Samples from the listed cameras form the query; everything else the gallery.
    ByCamera { query_cameras: BTreeSet<u32> },
    /// From every appearance bucket, `per_appearance` samples (capped so at
    /// least one stays behind) are drawn into the query.
    PerAppearanceHoldout { per_appearance: usize, seed: u64 },
}

/// Splits into disjoint query and gallery indexes, both in manifest order.
pub fn split_query_gallery(
    index: &DatasetIndex,
    rule: &SplitRule,
) -> Result<(DatasetIndex, DatasetIndex)> {
    let mut in_query = vec![false; index.len()];
    match rule {
        SplitRule::ByCamera { query_cameras } => {
            for (pos, s) in index.samples().iter().enumerate() {
                in_query[pos] = query_cameras.contains(&s.camera);
            }
        }
        SplitRule::PerAppearanceHoldout {
            per_appearance,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for bucket in index.by_appearance().values() {
                let take = (*per_appearance).min(bucket.len().saturating_sub(1));
                let mut shuffled = bucket.clone();
                shuffled.shuffle(&mut rng);
                for &p in &shuffled[..take] {
                    in_query[p] = true;
                }
            }
        }
    }
    let query_pos: Vec<usize> = (0..index.len()).filter(|&p| in_query[p]).collect();
    let gallery_pos: Vec<usize> = (0..index.len()).filter(|&p| !in_query[p]).collect();
    let query = index.subset(&query_pos);
    let gallery = index.subset(&gallery_pos);
    let missing: Vec<u32> = query
        .identities()
        .into_iter()
        .filter(|id| !gallery.by_identity().contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!(
            "query identities absent from gallery: {missing:?}"
        )));
    }
    Ok((query, gallery))
}
