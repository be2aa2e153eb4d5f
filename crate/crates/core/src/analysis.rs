//! Attention-alignment analysis, heatmap overlays and ROC/PR curve output.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use imageproc::drawing::draw_line_segment_mut;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionMap, LesionMask};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::experiment::{Method, RunRecord};
use crate::fairmetrics::{aggregate_reports, sample_sd, threshold_sweep, FairnessReport, Group, Interval};
use crate::model::{InputMode, Rann};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// How an attention map becomes a binary region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinarizeMode {
    /// The `k` most attended pixels, `k` being the reference mask's area.
    #[default]
    TopK,
    /// Threshold maximising between-class variance of the attention values.
    Otsu,
}

impl fmt::Display for BinarizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinarizeMode::TopK => "topk",
            BinarizeMode::Otsu => "otsu",
        })
    }
}

impl FromStr for BinarizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "topk" | "top-k" | "top_k" => Ok(BinarizeMode::TopK),
            "otsu" => Ok(BinarizeMode::Otsu),
            other => Err(Error::Unknown {
                kind: "binarization mode",
                name: other.to_string(),
            }),
        }
    }
}

/// Marks the `k` largest values; ties go to the earlier (row-major) pixel.
pub fn top_k_mask<T: Scalar>(attn: &AttentionMap<T>, k: usize) -> LesionMask {
    let (h, w) = attn.shape();
    let mut order: Vec<usize> = (0..h * w).collect();
    let a = attn.data();
    order.sort_by(|&i, &j| a[j].partial_cmp(&a[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    let mut data = vec![false; h * w];
    for &i in order.iter().take(k) {
        data[i] = true;
    }
    LesionMask::new(h, w, data).expect("shape preserved")
}

/// Otsu threshold over a 256-bin histogram of the map's values. A constant
/// map has no split and is returned whole.
pub fn otsu_mask<T: Scalar>(attn: &AttentionMap<T>) -> LesionMask {
    let (h, w) = attn.shape();
    let vals: Vec<f64> = attn.data().iter().map(|v| v.as_f64()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return LesionMask::new(h, w, vec![true; h * w]).expect("shape preserved");
    }
    const BINS: usize = 256;
    let bin = |v: f64| (((v - lo) / (hi - lo)) * (BINS - 1) as f64).round() as usize;
    let mut hist = [0usize; BINS];
    for &v in &vals {
        hist[bin(v)] += 1;
    }
    let total = vals.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_t, mut best_var) = (0usize, -1.0);
    for (t, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_t = t;
        }
    }
    let data = vals.iter().map(|&v| bin(v) > best_t).collect();
    LesionMask::new(h, w, data).expect("shape preserved")
}

/// Binarizes `attn`; top-k takes `k` from `reference`.
pub fn binarize_attention<T: Scalar>(
    attn: &AttentionMap<T>,
    mode: BinarizeMode,
    reference: &LesionMask,
) -> Result<LesionMask> {
    if reference.shape() != attn.shape() {
        return Err(Error::Shape {
            expected: format!("{}x{} reference mask", attn.shape().0, attn.shape().1),
            actual: format!("{}x{}", reference.height(), reference.width()),
        });
    }
    Ok(match mode {
        BinarizeMode::TopK => top_k_mask(attn, reference.area()),
        BinarizeMode::Otsu => otsu_mask(attn),
    })
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn iou(a: &LesionMask, b: &LesionMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: format!("{}x{}", a.height(), a.width()),
            actual: format!("{}x{}", b.height(), b.width()),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(Error::invalid("IoU of two empty masks is undefined"));
    }
    Ok(inter as f64 / union as f64)
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        0.0
    } else {
        sample_sd(values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageIou {
    pub source_id: String,
    pub group: Group,
    pub label: bool,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub group: Group,
    pub label: bool,
    pub n: usize,
    pub median: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub mode: BinarizeMode,
    pub per_image: Vec<ImageIou>,
    pub median: f64,
    pub sd: f64,
    /// One row per non-empty (group, label) cell.
    pub strata: Vec<StratumStats>,
}

impl AlignmentStats {
    pub fn from_values(mode: BinarizeMode, per_image: Vec<ImageIou>) -> Result<Self> {
        let all: Vec<f64> = per_image.iter().map(|r| r.iou).collect();
        let overall = median(&all).ok_or(Error::Empty("alignment values"))?;
        let mut strata = Vec::new();
        for group in Group::BOTH {
            for label in [false, true] {
                let v: Vec<f64> = per_image
                    .iter()
                    .filter(|r| r.group == group && r.label == label)
                    .map(|r| r.iou)
                    .collect();
                if let Some(m) = median(&v) {
                    strata.push(StratumStats {
                        group,
                        label,
                        n: v.len(),
                        median: m,
                        sd: std_dev(&v),
                    });
                }
            }
        }
        Ok(AlignmentStats {
            mode,
            sd: std_dev(&all),
            median: overall,
            per_image,
            strata,
        })
    }

    /// Recomputes the aggregates from the stored per-image values.
    pub fn recomputed(&self) -> Result<Self> {
        Self::from_values(self.mode, self.per_image.clone())
    }
}

/// The attention map the model applies to one sample at model resolution,
/// with the sample's mask resampled to match.
pub fn model_attention<T: Scalar>(model: &Rann<T>, sample: &LabeledImage<T>) -> Result<(AttentionMap<T>, LesionMask)> {
    let r = model.config().input_resolution;
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::MissingMask(sample.source_id.clone()))?
        .resized(r, r);
    let image = if sample.image.spatial() == (r, r) {
        sample.image.clone()
    } else {
        sample.image.resized(r, r)
    };
    let fed = (model.config().input_mode == InputMode::LesionOnly).then_some(&mask);
    let out = model.forward_with_mask(&image, fed)?;
    Ok((out.attention, mask))
}

/// Per-image IoU between binarized attention and the lesion mask.
pub fn alignment_stats<T: Scalar>(model: &Rann<T>, data: &[LabeledImage<T>], mode: BinarizeMode) -> Result<AlignmentStats> {
    let mut rows = Vec::with_capacity(data.len());
    for s in data {
        let (attn, mask) = model_attention(model, s)?;
        let bin = binarize_attention(&attn, mode, &mask)?;
        rows.push(ImageIou {
            source_id: s.source_id.clone(),
            group: s.group,
            label: s.label,
            iou: iou(&bin, &mask)?,
        });
    }
    AlignmentStats::from_values(mode, rows)
}

/// Blue-to-red ramp.
fn colormap(v: f64) -> [f64; 3] {
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Heatmap of `attn` (scaled by its maximum) blended over `image`.
pub fn overlay_image<T: Scalar>(image: &ImageTensor<T>, attn: &AttentionMap<T>) -> Result<RgbImage> {
    let (h, w) = attn.shape();
    if image.spatial() != (h, w) {
        return Err(Error::Shape {
            expected: format!("{}x{} attention", image.height(), image.width()),
            actual: format!("{h}x{w}"),
        });
    }
    let max = attn.data().iter().map(|v| v.as_f64()).fold(0.0, f64::max);
    let base = image.to_rgb8();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let a = attn.data()[y as usize * w + x as usize].as_f64();
        let heat = colormap(if max > 0.0 { a / max } else { 0.0 });
        let px = base.get_pixel(x, y).0;
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = (1.0 - OVERLAY_ALPHA) * px[c] as f64 / 255.0 + OVERLAY_ALPHA * heat[c];
            out[c] = (v * 255.0).round() as u8;
        }
        Rgb(out)
    }))
}

pub fn render_overlay<T: Scalar>(image: &ImageTensor<T>, attn: &AttentionMap<T>, out_path: &Path) -> Result<()> {
    overlay_image(image, attn)?.save(out_path)?;
    Ok(())
}

/// Points of the ROC (`x` = FPR, `y` = TPR) and PR (`x` = recall,
/// `y` = precision) curves, one per distinct threshold plus the two
/// endpoints at thresholds `+inf` and `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub thresholds: Vec<f64>,
    pub roc: Vec<(f64, f64)>,
    pub pr: Vec<(f64, f64)>,
}

pub fn curves(scores: &[f64], labels: &[bool]) -> Result<Curves> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("curves need both positive and negative samples"));
    }
    let sweep = threshold_sweep(scores, labels)?;
    let (p, n) = (n_pos as f64, n_neg as f64);
    let mut c = Curves {
        thresholds: vec![f64::INFINITY],
        roc: vec![(0.0, 0.0)],
        pr: vec![(0.0, 1.0)],
    };
    for s in &sweep {
        c.thresholds.push(s.threshold);
        c.roc.push((s.fp as f64 / n, s.tp as f64 / p));
        c.pr.push((s.tp as f64 / p, s.tp as f64 / (s.tp + s.fp) as f64));
    }
    c.thresholds.push(f64::NEG_INFINITY);
    c.roc.push((1.0, 1.0));
    c.pr.push((1.0, p / (p + n)));
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveFiles {
    pub roc_png: PathBuf,
    pub pr_png: PathBuf,
    pub roc_csv: PathBuf,
    pub pr_csv: PathBuf,
}

const PLOT_SIZE: u32 = 320;
const PLOT_MARGIN: f32 = 30.0;

fn plot(points: &[(f64, f64)], reference: Option<[(f64, f64); 2]>) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, Rgb([255, 255, 255]));
    let span = PLOT_SIZE as f32 - 2.0 * PLOT_MARGIN;
    let at = |(x, y): (f64, f64)| (PLOT_MARGIN + x as f32 * span, PLOT_SIZE as f32 - PLOT_MARGIN - y as f32 * span);
    let black = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, at((0.0, 0.0)), at((1.0, 0.0)), black);
    draw_line_segment_mut(&mut img, at((0.0, 0.0)), at((0.0, 1.0)), black);
    if let Some([a, b]) = reference {
        draw_line_segment_mut(&mut img, at(a), at(b), Rgb([170, 170, 170]));
    }
    for pair in points.windows(2) {
        draw_line_segment_mut(&mut img, at(pair[0]), at(pair[1]), Rgb([200, 30, 30]));
    }
    img
}

fn write_curve_csv(path: &Path, header: [&str; 3], thresholds: &[f64], points: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (t, (x, y)) in thresholds.iter().zip(points) {
        w.write_record([t.to_string(), x.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `<stem>_roc.{png,csv}` and `<stem>_pr.{png,csv}` under `out_dir`.
pub fn plot_curves(scores: &[f64], labels: &[bool], out_dir: &Path, stem: &str) -> Result<CurveFiles> {
    let c = curves(scores, labels)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let files = CurveFiles {
        roc_png: out_dir.join(format!("{stem}_roc.png")),
        pr_png: out_dir.join(format!("{stem}_pr.png")),
        roc_csv: out_dir.join(format!("{stem}_roc.csv")),
        pr_csv: out_dir.join(format!("{stem}_pr.csv")),
    };
    write_curve_csv(&files.roc_csv, ["threshold", "fpr", "tpr"], &c.thresholds, &c.roc)?;
    write_curve_csv(&files.pr_csv, ["threshold", "recall", "precision"], &c.thresholds, &c.pr)?;
    plot(&c.roc, Some([(0.0, 0.0), (1.0, 1.0)])).save(&files.roc_png)?;
    plot(&c.pr, None).save(&files.pr_png)?;
    Ok(files)
}

/// One scored sample, as written by `evaluate` and read back by `plot`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: String,
    pub group: Group,
    pub label: u8,
    pub score: f64,
}

pub fn prediction_rows<T>(data: &[LabeledImage<T>], scores: &[f64]) -> Result<Vec<PredictionRow>> {
    if data.len() != scores.len() {
        return Err(Error::LengthMismatch(format!("{} samples, {} scores", data.len(), scores.len())));
    }
    Ok(data
        .iter()
        .zip(scores)
        .map(|(s, &score)| PredictionRow {
            image_id: s.source_id.clone(),
            group: s.group,
            label: u8::from(s.label),
            score,
        })
        .collect())
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<PredictionRow>, _>>()?;
    if let Some(bad) = rows.iter().find(|r| r.label > 1) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("label of `{}` must be 0 or 1", bad.image_id),
        });
    }
    Ok(rows)
}

/// Up to `per_stratum` sample indices from each (group, label) cell, drawn
/// with `seed` and returned in id order.
pub fn stratified_sample<T>(data: &[LabeledImage<T>], per_stratum: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for group in Group::BOTH {
        for label in [true, false] {
            let cell: Vec<usize> = (0..data.len()).filter(|&i| data[i].group == group && data[i].label == label).collect();
            picked.extend(cell.choose_multiple(&mut rng, per_stratum).copied());
        }
    }
    picked.sort_by(|&a, &b| data[a].source_id.cmp(&data[b].source_id));
    picked
}

pub const COMPARISON_RULE: &str =
    "a difference is called significant when the two 95% seed confidence intervals do not overlap";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiComparison {
    pub metric: String,
    pub method: String,
    pub reference: String,
    pub interval: Interval<f64>,
    pub reference_interval: Interval<f64>,
    pub significant: bool,
}

pub fn compare_intervals(
    metric: &str,
    method: &str,
    interval: Interval<f64>,
    reference: &str,
    reference_interval: Interval<f64>,
) -> CiComparison {
    CiComparison {
        metric: metric.to_string(),
        method: method.to_string(),
        reference: reference.to_string(),
        significant: !interval.overlaps(&reference_interval),
        interval,
        reference_interval,
    }
}

/// Hex SHA-256 of a serialized config.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Run id to hash of its training config.
    pub config_hashes: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Seconds since the Unix epoch; the only non-deterministic field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_unix: Option<u64>,
}

/// Everything a report run produced, with file references relative to the
/// working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    /// Method name to cohort name to report; seed-aggregated when a method
    /// has at least two runs.
    pub reports: BTreeMap<String, BTreeMap<String, FairnessReport<f64>>>,
    pub comparison_rule: String,
    pub comparisons: Vec<CiComparison>,
    pub alignment: BTreeMap<String, AlignmentStats>,
    pub files: Vec<PathBuf>,
    pub provenance: Provenance,
}

impl ReportBundle {
    /// Groups finished runs by method, aggregating test reports across seeds,
    /// and compares every method's EO and AUROC with the baseline.
    pub fn from_runs(records: &[RunRecord], cohort: &str) -> Result<Self> {
        let mut by_method: BTreeMap<Method, Vec<&RunRecord>> = BTreeMap::new();
        for r in records {
            by_method.entry(r.config.method).or_default().push(r);
        }
        if by_method.is_empty() {
            return Err(Error::Empty("run records"));
        }
        let mut bundle = ReportBundle {
            comparison_rule: COMPARISON_RULE.to_string(),
            ..Default::default()
        };
        for (method, runs) in &by_method {
            let tests: Vec<FairnessReport<f64>> = runs
                .iter()
                .map(|r| r.test_report.clone().ok_or_else(|| Error::invalid(format!("run {} has no test report", r.run_id))))
                .collect::<Result<_>>()?;
            let report = if tests.len() >= 2 { aggregate_reports(&tests)? } else { tests[0].clone() };
            bundle
                .reports
                .entry(method.name().to_string())
                .or_default()
                .insert(cohort.to_string(), report);
            for r in runs {
                bundle
                    .provenance
                    .config_hashes
                    .insert(r.run_id.clone(), config_hash(&r.config.to_toml()?));
                bundle.provenance.seeds.push(r.config.seed);
            }
        }
        bundle.provenance.seeds.sort_unstable();
        bundle.provenance.seeds.dedup();
        let base = Method::Baseline.name();
        if let Some(reference) = bundle.reports.get(base).and_then(|c| c.get(cohort)).cloned() {
            for (name, cohorts) in &bundle.reports {
                if name == base {
                    continue;
                }
                let r = &cohorts[cohort];
                bundle.comparisons.push(compare_intervals("eo", name, r.ci.eo, base, reference.ci.eo));
                bundle.comparisons.push(compare_intervals("auroc", name, r.ci.auroc, base, reference.ci.auroc));
            }
        }
        Ok(bundle)
    }

    /// Writes the bundle as JSON after checking that every referenced file
    /// exists under `root`.
    pub fn write(&self, root: &Path, path: &Path) -> Result<()> {
        for f in &self.files {
            if !root.join(f).exists() {
                return Err(Error::invalid(format!("report references missing file {}", f.display())));
            }
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(root.join(path), text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}
