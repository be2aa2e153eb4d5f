//! Labeled image collections: the synthetic generator, on-disk ingestion,
//! stratified splitting and cohort summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::LesionMask;
use crate::error::{Error, Result};
use crate::fairmetrics::Group;
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

pub const METADATA_FILE: &str = "metadata.csv";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<T> {
    pub image: ImageTensor<T>,
    /// Malignant = true.
    pub label: bool,
    pub group: Group,
    pub mask: Option<LesionMask>,
    pub source_id: String,
    /// Carried for cohort summaries only; never a model input.
    pub age: Option<f64>,
}

impl<T: Scalar> LabeledImage<T> {
    pub fn new(
        source_id: impl Into<String>,
        image: ImageTensor<T>,
        label: bool,
        group: Group,
        mask: Option<LesionMask>,
    ) -> Result<Self> {
        if let Some(m) = &mask {
            image.check_mask_shape(m)?;
        }
        Ok(LabeledImage {
            image,
            label,
            group,
            mask,
            source_id: source_id.into(),
            age: None,
        })
    }

    /// Copy at a different resolution; the mask is resampled alongside.
    pub fn resized(&self, resolution: usize) -> Self {
        LabeledImage {
            image: self.image.resized(resolution, resolution),
            mask: self.mask.as_ref().map(|m| m.resized(resolution, resolution)),
            ..self.clone()
        }
    }
}

/// Parameters of the synthetic dermoscopy-like world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub resolution: usize,
    /// Amplitude of the label-specific texture around the lesion.
    pub lesion_signal_strength: f64,
    /// Probability that an image's background carries its group's speckle texture.
    pub shortcut_strength: f64,
    /// Share of the label texture placed in the ring just outside the mask.
    pub context_dependence: f64,
    /// `P(malignant | male) - P(malignant | female)`.
    pub group_label_correlation: f64,
    pub seed: u64,
    /// Colour shift of one speckle pixel.
    pub shortcut_contrast: f64,
    /// Fraction of background pixels turned into speckles.
    pub shortcut_density: f64,
    /// Ring width as a fraction of the resolution (at least one pixel).
    pub ring_fraction: f64,
    /// Range of the lesion semi-axes as fractions of the resolution.
    pub lesion_radius: (f64, f64),
    /// Per-pixel sensor noise.
    pub pixel_noise: f64,
    /// Probability that each texture region (lesion interior, ring) shows the
    /// sample's own class; otherwise that region shows a class drawn at random.
    pub cue_reliability: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 1000,
            resolution: 64,
            lesion_signal_strength: 0.12,
            shortcut_strength: 0.8,
            context_dependence: 0.5,
            group_label_correlation: 0.4,
            seed: 0,
            shortcut_contrast: 0.25,
            shortcut_density: 0.04,
            ring_fraction: 3.0 / 64.0,
            lesion_radius: (0.12, 0.22),
            pixel_noise: 0.03,
            cue_reliability: 0.6,
        }
    }
}

const MAX_LESION_ATTEMPTS: usize = 64;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be at least 1"));
        }
        if self.resolution < 8 {
            return Err(Error::invalid(format!("resolution {} below 8 pixels", self.resolution)));
        }
        unit("shortcut_strength", self.shortcut_strength)?;
        unit("context_dependence", self.context_dependence)?;
        unit("shortcut_density", self.shortcut_density)?;
        unit("cue_reliability", self.cue_reliability)?;
        if !(-1.0..=1.0).contains(&self.group_label_correlation) {
            return Err(Error::invalid("group_label_correlation outside [-1, 1]"));
        }
        let nonneg = [
            ("lesion_signal_strength", self.lesion_signal_strength),
            ("shortcut_contrast", self.shortcut_contrast),
            ("pixel_noise", self.pixel_noise),
            ("ring_fraction", self.ring_fraction),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        let (lo, hi) = self.lesion_radius;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid("lesion_radius must satisfy 0 < min <= max"));
        }
        Ok(())
    }

    pub fn ring_width(&self) -> usize {
        ((self.ring_fraction * self.resolution as f64).round() as usize).max(1)
    }

    pub fn positive_rate(&self, group: Group) -> f64 {
        let half = self.group_label_correlation / 2.0;
        match group {
            Group::Male => 0.5 + half,
            Group::Female => 0.5 - half,
        }
    }
}

/// Independent random streams per sample and per image component, so that
/// changing one knob leaves every other component of the image untouched.
#[derive(Clone, Copy)]
enum Stream {
    Identity = 0,
    Skin = 1,
    Geometry = 2,
    LabelTexture = 3,
    Shortcut = 4,
    LesionTone = 5,
}

fn stream(seed: u64, sample: usize, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((sample as u64) * 8 + which as u64);
    rng
}

/// Zero-mean, unit-variance noise smoothed over `cell`-pixel lattice spacing
/// by bilinear interpolation. `cell = 1` is white noise.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    let n = out.len() as f64;
    let m = out.iter().sum::<f64>() / n;
    let sd = (out.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - m) / sd);
    out
}

/// Pixels outside `mask` within Euclidean distance `width` of it.
pub fn boundary_ring(mask: &LesionMask, width: usize) -> LesionMask {
    let (h, w) = mask.shape();
    let r = width as isize;
    LesionMask::from_fn(h, w, |y, x| {
        if mask.get(y, x) {
            return false;
        }
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask.get(yy as usize, xx as usize) {
                    return true;
                }
            }
        }
        false
    })
}

/// Elliptical mask whose lesion plus ring fits inside the frame.
fn draw_lesion(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, id: &str) -> Result<LesionMask> {
    let res = spec.resolution as f64;
    let margin = spec.ring_width() as f64 + 1.0;
    for _ in 0..MAX_LESION_ATTEMPTS {
        let a = res * rng.random_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        let b = res * rng.random_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        let cy = res * rng.random_range(0.3..0.7);
        let cx = res * rng.random_range(0.3..0.7);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        // Half-extent of the rotated ellipse along each axis.
        let ey = ((a * theta.sin()).powi(2) + (b * theta.cos()).powi(2)).sqrt();
        let ex = ((a * theta.cos()).powi(2) + (b * theta.sin()).powi(2)).sqrt();
        if cy - ey < margin || cx - ex < margin || cy + ey > res - margin || cx + ex > res - margin {
            continue;
        }
        let (s, c) = theta.sin_cos();
        let mask = LesionMask::from_fn(spec.resolution, spec.resolution, |y, x| {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        });
        if mask.area() > 0 {
            return Ok(mask);
        }
    }
    Err(Error::invalid(format!(
        "{id}: could not place a lesion inside a {}px frame after {MAX_LESION_ATTEMPTS} attempts",
        spec.resolution
    )))
}

/// Speckle colour shift per group.
fn speckle_colour(group: Group) -> [f64; 3] {
    match group {
        Group::Male => [-1.0, -0.2, 1.0],
        Group::Female => [-1.0, 1.0, -0.2],
    }
}

pub fn synthetic_id(i: usize) -> String {
    format!("syn{i:06}")
}

/// One synthetic sample; deterministic in `(spec, index)`.
pub fn generate_sample<T: Scalar>(spec: &SyntheticSpec, index: usize) -> Result<LabeledImage<T>> {
    let id = synthetic_id(index);
    let res = spec.resolution;
    let hw = res * res;

    let mut rng = stream(spec.seed, index, Stream::Identity);
    let group = if rng.random_bool(0.5) { Group::Male } else { Group::Female };
    let label = rng.random_bool(spec.positive_rate(group).clamp(0.0, 1.0));
    let age = rng.random_range(25.0..85.0f64).round();

    let mut rng = stream(spec.seed, index, Stream::Skin);
    let bright: f64 = rng.random_range(0.7..0.9);
    let skin = [bright, bright * 0.78, bright * 0.66];
    let mottle = value_noise(&mut rng, res, res, (res / 4).max(1));
    let sensor: Vec<f64> = (0..3 * hw).map(|_| rng.sample::<f64, _>(StandardNormal) * spec.pixel_noise).collect();

    let mut rng = stream(spec.seed, index, Stream::Geometry);
    let mask = draw_lesion(spec, &mut rng, &id)?;
    let ring = boundary_ring(&mask, spec.ring_width());

    let mut rng = stream(spec.seed, index, Stream::LesionTone);
    let tone: f64 = rng.random_range(0.8..1.1);
    let lesion = [0.45 * tone, 0.30 * tone, 0.22 * tone];

    // Malignant lesions carry fine-grained texture, benign ones coarse mottling
    // of equal variance. Interior and ring draw their shown class separately.
    let mut rng = stream(spec.seed, index, Stream::LabelTexture);
    let coarse = (res / 16).max(3);
    let region_texture = |rng: &mut ChaCha8Rng| {
        let shown = if rng.random_bool(spec.cue_reliability) { label } else { rng.random_bool(0.5) };
        value_noise(rng, res, res, if shown { 1 } else { coarse })
    };
    let inner_texture = region_texture(&mut rng);
    let ring_texture = region_texture(&mut rng);

    let mut rng = stream(spec.seed, index, Stream::Shortcut);
    let mut speckle = vec![false; hw];
    if rng.random_bool(spec.shortcut_strength) {
        let background: Vec<usize> = (0..hw).filter(|&p| !mask.data()[p] && !ring.data()[p]).collect();
        let k = (spec.shortcut_density * background.len() as f64).round() as usize;
        for &p in background.choose_multiple(&mut rng, k) {
            speckle[p] = true;
        }
    }
    let shift = speckle_colour(group);

    let inner = spec.lesion_signal_strength * (1.0 - spec.context_dependence);
    let outer = spec.lesion_signal_strength * spec.context_dependence;
    let mut data = vec![T::zero(); 3 * hw];
    for p in 0..hw {
        let (base, tex) = if mask.data()[p] {
            (lesion, inner * inner_texture[p])
        } else if ring.data()[p] {
            (skin, outer * ring_texture[p])
        } else {
            (skin, 0.0)
        };
        let lum = 0.04 * mottle[p] + tex;
        for c in 0..3 {
            let mut v = base[c] + lum + sensor[c * hw + p];
            if speckle[p] {
                v += spec.shortcut_contrast * shift[c];
            }
            data[c * hw + p] = T::lit(v.clamp(0.0, 1.0));
        }
    }
    let image = ImageTensor::new(3, res, res, data)?;
    let mut sample = LabeledImage::new(id, image, label, group, Some(mask))?;
    sample.age = Some(age);
    Ok(sample)
}

/// The full synthetic cohort, ordered by source id.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<Vec<LabeledImage<T>>> {
    spec.validate()?;
    (0..spec.n_samples).map(|i| generate_sample(spec, i)).collect()
}

/// Which diagnoses count as malignant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalignantSet(pub BTreeSet<String>);

impl MalignantSet {
    pub fn ham() -> Self {
        Self::from_codes(&["BCC", "MEL", "AKIEC"])
    }

    pub fn bcn() -> Self {
        Self::from_codes(&["BCC", "MEL", "AK", "SCC"])
    }

    pub fn from_codes(codes: &[&str]) -> Self {
        MalignantSet(codes.iter().map(|c| c.trim().to_ascii_uppercase()).collect())
    }

    pub fn contains(&self, diagnosis: &str) -> bool {
        self.0.contains(&diagnosis.trim().to_ascii_uppercase())
    }

    /// `ham`, `bcn`, or a comma-separated list of codes.
    pub fn parse(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "ham" => Self::ham(),
            "bcn" => Self::bcn(),
            _ => Self::from_codes(&s.split(',').filter(|c| !c.trim().is_empty()).collect::<Vec<_>>()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedDataset<T> {
    pub samples: Vec<LabeledImage<T>>,
    pub dropped_missing_sex: usize,
    /// Where masks came from, if any were read.
    pub mask_source: Option<String>,
}

#[derive(Debug, Deserialize)]
struct MetadataRow {
    image_id: String,
    diagnosis: String,
    sex: String,
    age: String,
}

const REQUIRED_COLUMNS: [&str; 4] = ["image_id", "diagnosis", "sex", "age"];

fn find_file(dir: &Path, id: &str, suffixes: &[&str]) -> Option<PathBuf> {
    for suffix in suffixes {
        for ext in ["png", "jpg", "jpeg", "bmp"] {
            let p = dir.join(format!("{id}{suffix}.{ext}"));
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

/// Reads a metadata CSV plus its image (and optionally mask) files.
///
/// Rows with a blank or unrecognised sex are dropped and counted.
pub fn load_real_dataset<T: Scalar>(
    metadata_path: &Path,
    images_dir: &Path,
    masks_dir: Option<&Path>,
    malignant: &MalignantSet,
) -> Result<LoadedDataset<T>> {
    let mut reader = csv::Reader::from_path(metadata_path)?;
    let headers = reader.headers()?.clone();
    let missing: Vec<String> = REQUIRED_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h.trim() == **c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns {
            path: metadata_path.to_path_buf(),
            missing,
        });
    }
    let mut samples = Vec::new();
    let mut dropped = 0;
    for row in reader.deserialize() {
        let row: MetadataRow = row?;
        let Ok(group) = row.sex.parse::<Group>() else {
            dropped += 1;
            continue;
        };
        let image_path = find_file(images_dir, &row.image_id, &[""]).ok_or_else(|| Error::MissingImage {
            id: row.image_id.clone(),
            path: images_dir.join(&row.image_id),
        })?;
        let image = ImageTensor::load_rgb(&image_path)?;
        let mask = match masks_dir {
            Some(dir) => {
                let path = find_file(dir, &row.image_id, &["", "_segmentation", "_mask"])
                    .ok_or_else(|| Error::MissingMask(row.image_id.clone()))?;
                Some(LesionMask::load(&path)?)
            }
            None => None,
        };
        let mut sample = LabeledImage::new(row.image_id, image, malignant.contains(&row.diagnosis), group, mask)?;
        sample.age = row.age.trim().parse().ok();
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::Empty("metadata rows with a usable sex field"));
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with missing sex", metadata_path.display());
    }
    samples.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(LoadedDataset {
        samples,
        dropped_missing_sex: dropped,
        mask_source: masks_dir.map(|d| d.display().to_string()),
    })
}

/// Writes `metadata.csv`, `images/` and `masks/` under `dir`, in the layout
/// [`load_real_dataset`] reads. Malignant samples get diagnosis `MEL`,
/// benign ones `NV`.
pub fn save_dataset<T: Scalar>(samples: &[LabeledImage<T>], dir: &Path) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    let masks = dir.join(MASKS_DIR);
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut w = csv::Writer::from_path(dir.join(METADATA_FILE))?;
    w.write_record(REQUIRED_COLUMNS)?;
    for s in samples {
        let age = s.age.map(|a| a.to_string()).unwrap_or_default();
        let dx = if s.label { "MEL" } else { "NV" };
        w.write_record([s.source_id.as_str(), dx, s.group.name(), age.as_str()])?;
        s.image.save_rgb(&images.join(format!("{}.png", s.source_id)))?;
        if let Some(m) = &s.mask {
            m.save(&masks.join(format!("{}.png", s.source_id)))?;
        }
    }
    w.flush().map_err(|e| Error::io("flushing metadata", e))?;
    Ok(())
}

/// Reads a directory written by [`save_dataset`] (or laid out the same way).
pub fn load_dataset_dir<T: Scalar>(dir: &Path, malignant: &MalignantSet) -> Result<LoadedDataset<T>> {
    let masks = dir.join(MASKS_DIR);
    load_real_dataset(
        &dir.join(METADATA_FILE),
        &dir.join(IMAGES_DIR),
        masks.is_dir().then_some(masks.as_path()),
        malignant,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Validation, SplitPart::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Validation => "validation",
            SplitPart::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<LabeledImage<T>>,
    pub validation: Vec<LabeledImage<T>>,
    pub test: Vec<LabeledImage<T>>,
}

impl<T> DatasetSplit<T> {
    pub fn part(&self, p: SplitPart) -> &[LabeledImage<T>] {
        match p {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }

    /// `source_id -> part` for persistence.
    pub fn assignment(&self) -> BTreeMap<String, SplitPart> {
        SplitPart::ALL
            .iter()
            .flat_map(|&p| self.part(p).iter().map(move |s| (s.source_id.clone(), p)))
            .collect()
    }
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// Assigns shuffled indices to parts by cumulative rounded ratios.
fn allocate(n: usize, ratios: (f64, f64, f64)) -> (usize, usize) {
    let total = ratios.0 + ratios.1 + ratios.2;
    let n_train = (n as f64 * ratios.0 / total).round() as usize;
    let n_val = ((n as f64 * (ratios.0 + ratios.1) / total).round() as usize).max(n_train) - n_train;
    (n_train.min(n), n_val.min(n - n_train.min(n)))
}

/// Random split stratified jointly on (label, group).
///
/// Strata with fewer than three members are pooled and split without
/// stratification.
pub fn split_dataset<T: Scalar>(
    data: Vec<LabeledImage<T>>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit<T>> {
    if data.len() < 5 {
        return Err(Error::invalid(format!("need at least 5 samples to split, got {}", data.len())));
    }
    let ok = |r: f64| r >= 0.0 && r.is_finite();
    if !(ok(ratios.0) && ok(ratios.1) && ok(ratios.2)) || ratios.0 + ratios.1 + ratios.2 <= 0.0 {
        return Err(Error::invalid("split ratios must be non-negative with a positive sum"));
    }
    let mut ids = BTreeSet::new();
    for s in &data {
        if !ids.insert(s.source_id.as_str()) {
            return Err(Error::invalid(format!("duplicate source id {}", s.source_id)));
        }
    }

    let mut strata: BTreeMap<(bool, Group), Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        strata.entry((s.label, s.group)).or_default().push(i);
    }
    let mut small = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for ((label, group), members) in strata {
        if members.len() < 3 {
            log::warn!(
                "stratum (label={}, group={group}) has {} members; splitting it without stratification",
                u8::from(label),
                members.len()
            );
            small.extend(members);
        } else {
            groups.push(members);
        }
    }
    if !small.is_empty() {
        groups.push(small);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part = vec![SplitPart::Train; data.len()];
    for mut members in groups {
        members.shuffle(&mut rng);
        let (n_train, n_val) = allocate(members.len(), ratios);
        for (k, &i) in members.iter().enumerate() {
            part[i] = if k < n_train {
                SplitPart::Train
            } else if k < n_train + n_val {
                SplitPart::Validation
            } else {
                SplitPart::Test
            };
        }
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (s, p) in data.into_iter().zip(part) {
        match p {
            SplitPart::Train => split.train.push(s),
            SplitPart::Validation => split.validation.push(s),
            SplitPart::Test => split.test.push(s),
        }
    }
    for v in [&mut split.train, &mut split.validation, &mut split.test] {
        v.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    }
    Ok(split)
}

/// Rebuilds a split from a stored `source_id -> part` assignment.
pub fn apply_assignment<T>(data: Vec<LabeledImage<T>>, assignment: &BTreeMap<String, SplitPart>) -> Result<DatasetSplit<T>> {
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for s in data {
        match assignment.get(&s.source_id) {
            Some(SplitPart::Train) => split.train.push(s),
            Some(SplitPart::Validation) => split.validation.push(s),
            Some(SplitPart::Test) => split.test.push(s),
            None => return Err(Error::invalid(format!("{} has no split assignment", s.source_id))),
        }
    }
    Ok(split)
}

pub fn write_assignment(path: &Path, assignment: &BTreeMap<String, SplitPart>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "split"])?;
    for (id, p) in assignment {
        w.write_record([id.as_str(), p.name()])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_assignment(path: &Path) -> Result<BTreeMap<String, SplitPart>> {
    #[derive(Deserialize)]
    struct Row {
        image_id: String,
        split: SplitPart,
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Row>()
        .map(|row| row.map(|r| (r.image_id, r.split)).map_err(Error::from))
        .collect()
}

/// One row of a cohort summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `male`, `female` or `total`.
    pub cohort: String,
    pub mean_age: Option<f64>,
    pub positive_rate: Option<f64>,
    pub count: usize,
}

/// Mean age, positive rate and count per group and overall.
pub fn dataset_summary<T>(data: &[LabeledImage<T>]) -> Result<Vec<SummaryRow>> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let row = |name: &str, members: Vec<&LabeledImage<T>>| {
        let n = members.len();
        let ages: Vec<f64> = members.iter().filter_map(|s| s.age).collect();
        SummaryRow {
            cohort: name.to_string(),
            mean_age: (!ages.is_empty()).then(|| ages.iter().sum::<f64>() / ages.len() as f64),
            positive_rate: (n > 0).then(|| members.iter().filter(|s| s.label).count() as f64 / n as f64),
            count: n,
        }
    };
    let mut rows: Vec<SummaryRow> = Group::BOTH
        .iter()
        .map(|&g| row(g.name(), data.iter().filter(|s| s.group == g).collect()))
        .collect();
    rows.push(row("total", data.iter().collect()));
    Ok(rows)
}
