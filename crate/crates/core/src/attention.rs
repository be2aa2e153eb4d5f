//! Soft-guidance attention loss.
//!
//! A binary lesion mask is softened to `rho + (1 - rho) * mask` and compared
//! with the model's spatial attention through cosine similarity; the loss is
//! `1 - cos`. The analytic gradient with respect to the attention entries is
//! provided for training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance on `sum(A) == 1` for a valid attention map.
pub const ATTENTION_SUM_TOLERANCE: f64 = 1e-6;

/// Grey level above which a mask image pixel counts as lesion.
pub const MASK_LESION_THRESHOLD: u8 = 127;

/// Binary lesion annotation, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl LesionMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::Shape {
                expected: format!("{height}x{width} mask"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(LesionMask { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        LesionMask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    /// Number of lesion pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// A valid annotation marks at least one pixel.
    pub fn validate_nonempty(&self) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::invalid("lesion mask has no lesion pixels"));
        }
        Ok(())
    }

    /// Area-averaged resampling to `height x width`, re-binarized at 0.5.
    pub fn resized(&self, height: usize, width: usize) -> LesionMask {
        if (height, width) == self.shape() {
            return self.clone();
        }
        let ys = axis_weights(self.height, height);
        let xs = axis_weights(self.width, width);
        let mut data = Vec::with_capacity(height * width);
        for wy in &ys {
            for wx in &xs {
                let mut covered = 0.0;
                let mut total = 0.0;
                for &(sy, fy) in wy {
                    for &(sx, fx) in wx {
                        let w = fy * fx;
                        total += w;
                        if self.get(sy, sx) {
                            covered += w;
                        }
                    }
                }
                data.push(covered / total >= 0.5);
            }
        }
        LesionMask { height, width, data }
    }

    /// Reads a single-channel (or converted-to-grey) image; pixels above
    /// 127 are lesion.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] > MASK_LESION_THRESHOLD).collect();
        LesionMask::new(h as usize, w as usize, data)
    }

    /// Writes the mask as an 8-bit grey image (lesion 255, background 0).
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer matches dimensions");
        img.save(path)?;
        Ok(())
    }
}

/// For each destination cell, the source indices it overlaps and the overlap
/// length.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut cells = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = hi.min(s as f64 + 1.0) - lo.max(s as f64);
                if overlap > 1e-12 {
                    cells.push((s, overlap));
                }
                s += 1;
            }
            cells
        })
        .collect()
}

/// Mask relaxed into `[rho, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMask<T> {
    height: usize,
    width: usize,
    rho: T,
    data: Vec<T>,
}

impl<T: Scalar> SoftMask<T> {
    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Non-negative spatial map that sums to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> AttentionMap<T> {
    /// Validates non-negativity and unit mass.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::Shape {
                expected: format!("{height}x{width} attention map"),
                actual: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::invalid("attention entries must be finite and non-negative"));
        }
        let sum: f64 = data.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > ATTENTION_SUM_TOLERANCE {
            return Err(Error::invalid(format!("attention map sums to {sum}, expected 1")));
        }
        Ok(AttentionMap { height, width, data })
    }

    /// Spatial softmax of a logit map.
    pub fn from_logits(height: usize, width: usize, logits: &[T]) -> Result<Self> {
        let mut data = vec![T::zero(); logits.len()];
        spatial_softmax(logits, &mut data);
        AttentionMap::new(height, width, data)
    }

    /// Normalizes non-negative weights to unit mass.
    pub fn from_weights(height: usize, width: usize, weights: &[T]) -> Result<Self> {
        let sum: f64 = weights.iter().map(|v| v.as_f64()).sum();
        if !(sum > 0.0) {
            return Err(Error::ZeroNorm("attention weights"));
        }
        let data = weights.iter().map(|&v| T::lit(v.as_f64() / sum)).collect();
        AttentionMap::new(height, width, data)
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let v = T::lit(1.0 / (height * width) as f64);
        AttentionMap {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// `out = softmax(logits)` over all entries, normalizer accumulated in f64.
pub fn spatial_softmax<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0.0f64;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += o.as_f64();
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o = T::lit(o.as_f64() * inv);
    }
}

/// `M_s = rho + (1 - rho) * M`.
pub fn soften_mask<T: Scalar>(mask: &LesionMask, rho: T) -> Result<SoftMask<T>> {
    if !(rho >= T::zero() && rho <= T::one()) {
        return Err(Error::invalid(format!("rho = {rho} is outside [0, 1]")));
    }
    let data = mask
        .data
        .iter()
        .map(|&m| if m { rho + (T::one() - rho) } else { rho })
        .collect();
    Ok(SoftMask {
        height: mask.height,
        width: mask.width,
        rho,
        data,
    })
}

fn check_shapes(target: (usize, usize), attn: (usize, usize)) -> Result<()> {
    if target != attn {
        return Err(Error::Shape {
            expected: format!("{}x{}", target.0, target.1),
            actual: format!("{}x{}", attn.0, attn.1),
        });
    }
    Ok(())
}

struct CosineParts {
    dot: f64,
    norm_t: f64,
    norm_a: f64,
}

fn cosine_parts<T: Scalar>(target: &[T], attn: &[T]) -> Result<CosineParts> {
    if target.len() != attn.len() {
        return Err(Error::Shape {
            expected: format!("{} entries", target.len()),
            actual: format!("{} entries", attn.len()),
        });
    }
    let (mut dot, mut tt, mut aa) = (0.0f64, 0.0f64, 0.0f64);
    for (&t, &a) in target.iter().zip(attn) {
        let (t, a) = (t.as_f64(), a.as_f64());
        dot += t * a;
        tt += t * t;
        aa += a * a;
    }
    if !(tt > 0.0) {
        return Err(Error::ZeroNorm("target mask"));
    }
    if !(aa > 0.0) {
        return Err(Error::ZeroNorm("attention map"));
    }
    Ok(CosineParts {
        dot,
        norm_t: tt.sqrt(),
        norm_a: aa.sqrt(),
    })
}

/// Cosine similarity of two flattened maps of equal length.
pub fn cosine_similarity<T: Scalar>(target: &[T], attn: &[T]) -> Result<T> {
    let p = cosine_parts(target, attn)?;
    Ok(T::lit(p.dot / (p.norm_t * p.norm_a)))
}

/// `1 - cos(target, attn)` and its gradient with respect to `attn`, written
/// into `grad`. Accepts unnormalized maps.
pub fn cosine_loss_with_grad<T: Scalar>(target: &[T], attn: &[T], grad: &mut [T]) -> Result<T> {
    let p = cosine_parts(target, attn)?;
    let cos = p.dot / (p.norm_t * p.norm_a);
    // d cos / d a = t / (|t||a|) - cos * a / |a|^2
    let ct = 1.0 / (p.norm_t * p.norm_a);
    let ca = cos / (p.norm_a * p.norm_a);
    for ((g, &t), &a) in grad.iter_mut().zip(target).zip(attn) {
        *g = T::lit(ca * a.as_f64() - ct * t.as_f64());
    }
    Ok(T::lit(1.0 - cos))
}

pub fn cosine_alignment<T: Scalar>(target: &SoftMask<T>, attn: &AttentionMap<T>) -> Result<T> {
    check_shapes(target.shape(), attn.shape())?;
    cosine_similarity(&target.data, &attn.data)
}

/// `l_A = 1 - cos(M_s, A)`.
pub fn attention_loss<T: Scalar>(target: &SoftMask<T>, attn: &AttentionMap<T>) -> Result<T> {
    Ok(T::one() - cosine_alignment(target, attn)?)
}

/// Exact gradient of [`attention_loss`] with respect to the attention
/// entries, row-major.
pub fn attention_loss_gradient<T: Scalar>(target: &SoftMask<T>, attn: &AttentionMap<T>) -> Result<Vec<T>> {
    check_shapes(target.shape(), attn.shape())?;
    let mut grad = vec![T::zero(); attn.data.len()];
    cosine_loss_with_grad(&target.data, &attn.data, &mut grad)?;
    Ok(grad)
}
