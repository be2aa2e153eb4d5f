//! Desk-scale residual attention network.
//!
//! ```text
//! X ──conv──▶ logits ──spatial softmax──▶ A
//! X_A = (H·W) · A ⊙ X            (rescale optional)
//! X_A ──residual blocks (stride 2)──▶ global average pool ──▶ dense ─relu─▶ dense ─sigmoid─▶ score
//! ```
//!
//! The lesion-only variant drops the attention block and feeds `X ⊙ M`
//! straight into the residual blocks.
//!
//! All parameters live in one flat buffer; layers address it by offset.

mod checkpoint;
pub mod conv;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
use conv::ConvGeom;

use crate::attention::{cosine_loss_with_grad, spatial_softmax, AttentionMap, LesionMask, SoftMask};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

pub const INPUT_CHANNELS: usize = 3;

/// What the residual blocks consume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Learned spatial attention over the full image.
    #[default]
    Attention,
    /// The image multiplied by its binary lesion mask; no attention block.
    LesionOnly,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub attention_kernel_size: usize,
    /// One entry per residual block; each block halves the resolution.
    pub channels_per_block: Vec<usize>,
    pub head_hidden_units: usize,
    /// Multiply `A ⊙ X` by `H·W` so uniform attention leaves the image unchanged.
    pub rescale_attention: bool,
    pub input_mode: InputMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_resolution: 64,
            attention_kernel_size: 3,
            channels_per_block: vec![16, 32, 64],
            head_hidden_units: 32,
            rescale_attention: true,
            input_mode: InputMode::Attention,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn n_residual_blocks(&self) -> usize {
        self.channels_per_block.len()
    }

    pub fn downsampling(&self) -> usize {
        1 << self.n_residual_blocks()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {m}")));
        if self.input_resolution == 0 || self.head_hidden_units == 0 {
            return bad("resolution and head width must be positive".into());
        }
        if self.channels_per_block.is_empty() || self.channels_per_block.contains(&0) {
            return bad("need at least one residual block, every width positive".into());
        }
        if self.attention_kernel_size == 0 || self.attention_kernel_size % 2 == 0 {
            return bad(format!("attention kernel {} must be odd", self.attention_kernel_size));
        }
        if self.input_resolution % self.downsampling() != 0 {
            return bad(format!(
                "resolution {} not divisible by total downsampling {}",
                self.input_resolution,
                self.downsampling()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    geom: ConvGeom,
    w: usize,
    b: usize,
}

impl ConvLayer {
    fn weight<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.w..self.w + self.geom.n_weights()]
    }

    fn bias<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.b..self.b + self.geom.cout]
    }

    /// Mutable (dW, db) views into a gradient buffer.
    fn grads<'a, T>(&self, g: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
        let (head, tail) = g.split_at_mut(self.b);
        (&mut head[self.w..self.w + self.geom.n_weights()], &mut tail[..self.geom.cout])
    }
}

#[derive(Clone, Copy, Debug)]
struct DenseLayer {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    a: ConvLayer,
    b: ConvLayer,
    proj: ConvLayer,
}

#[derive(Clone, Debug)]
struct Arch {
    attention: Option<ConvLayer>,
    blocks: Vec<Block>,
    fc1: DenseLayer,
    fc2: DenseLayer,
    n_params: usize,
}

struct Alloc(usize);

impl Alloc {
    fn take(&mut self, n: usize) -> usize {
        let at = self.0;
        self.0 += n;
        at
    }

    fn conv(&mut self, geom: ConvGeom) -> ConvLayer {
        let w = self.take(geom.n_weights());
        let b = self.take(geom.cout);
        ConvLayer { geom, w, b }
    }

    fn dense(&mut self, n_in: usize, n_out: usize) -> DenseLayer {
        let w = self.take(n_in * n_out);
        let b = self.take(n_out);
        DenseLayer { n_in, n_out, w, b }
    }
}

impl Arch {
    fn new(cfg: &ModelConfig) -> Self {
        let r = cfg.input_resolution;
        let mut alloc = Alloc(0);
        let attention = match cfg.input_mode {
            InputMode::Attention => Some(alloc.conv(ConvGeom::new(INPUT_CHANNELS, 1, cfg.attention_kernel_size, 1, r, r))),
            InputMode::LesionOnly => None,
        };
        let mut blocks = Vec::new();
        let (mut cin, mut size) = (INPUT_CHANNELS, r);
        for &cout in &cfg.channels_per_block {
            let a = alloc.conv(ConvGeom::new(cin, cout, 3, 2, size, size));
            let half = size / 2;
            let b = alloc.conv(ConvGeom::new(cout, cout, 3, 1, half, half));
            let proj = alloc.conv(ConvGeom::new(cin, cout, 1, 2, size, size));
            blocks.push(Block { a, b, proj });
            cin = cout;
            size = half;
        }
        let fc1 = alloc.dense(cin, cfg.head_hidden_units);
        let fc2 = alloc.dense(cfg.head_hidden_units, 1);
        Arch {
            attention,
            blocks,
            fc1,
            fc2,
            n_params: alloc.0,
        }
    }
}

/// Score and the attention map the network actually applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub score: T,
    pub logit: T,
    pub attention: AttentionMap<T>,
}

/// One training sample as seen by the gradient routine.
#[derive(Clone, Copy, Debug)]
pub struct TrainExample<'a, T> {
    pub image: &'a ImageTensor<T>,
    pub label: bool,
    /// Required by the lesion-only variant.
    pub mask: Option<&'a LesionMask>,
    /// Softened mask at model resolution; required when `lambda > 0`.
    pub target: Option<&'a SoftMask<T>>,
}

/// Batch-mean loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub classification: T,
    pub attention: T,
}

#[derive(Clone, Debug, Default)]
struct BlockCache<T> {
    cols_a: Vec<T>,
    h1: Vec<T>,
    cols_b: Vec<T>,
    cols_p: Vec<T>,
    out: Vec<T>,
    d_out: Vec<T>,
    d_h1: Vec<T>,
    d_in: Vec<T>,
}

/// Reusable activation and gradient buffers for one sample at a time.
#[derive(Clone, Debug, Default)]
pub struct Scratch<T> {
    att_cols: Vec<T>,
    att_logits: Vec<T>,
    att: Vec<T>,
    att_grad: Vec<T>,
    net_in: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    dcols: Vec<T>,
    gap: Vec<T>,
    z1: Vec<T>,
    a1: Vec<T>,
    logit: T,
}

fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `log(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn resize<T: Scalar>(v: &mut Vec<T>, n: usize) {
    v.clear();
    v.resize(n, T::zero());
}

/// Residual attention network over `T`.
#[derive(Clone, Debug)]
pub struct Rann<T> {
    config: ModelConfig,
    arch: Arch,
    params: Vec<T>,
}

impl<T: Scalar> Rann<T> {
    /// Fresh model with fan-in scaled normal weights drawn from `config.seed`;
    /// biases start at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let arch = Arch::new(&config);
        let mut params = vec![T::zero(); arch.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |off: usize, n: usize, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[off..off + n] {
                *p = T::lit(normal.sample(&mut rng));
            }
        };
        let convs = arch.blocks.iter().flat_map(|b| [&b.a, &b.b, &b.proj]);
        for c in convs {
            fill(c.w, c.geom.n_weights(), c.geom.patch());
        }
        for d in [arch.fc1, arch.fc2] {
            fill(d.w, d.n_in * d.n_out, d.n_in);
        }
        // Inputs are all non-negative, so first-layer filters start zero-mean:
        // otherwise each channel is dominated by image brightness and half of
        // them are dead from the first step.
        if let Some(first) = arch.blocks.first() {
            for c in [&first.a, &first.proj] {
                let patch = c.geom.patch();
                for o in 0..c.geom.cout {
                    let w = &mut params[c.w + o * patch..c.w + (o + 1) * patch];
                    let mean = w.iter().copied().sum::<T>() / T::lit(patch as f64);
                    for v in w {
                        *v = *v - mean;
                    }
                }
            }
        }
        Ok(Rann { config, arch, params })
    }

    /// Model from explicit parameters, e.g. a checkpoint.
    pub fn from_parts(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let arch = Arch::new(&config);
        if params.len() != arch.n_params {
            return Err(Error::Shape {
                expected: format!("{} parameters", arch.n_params),
                actual: format!("{}", params.len()),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite model parameter"));
        }
        Ok(Rann { config, arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params
    }

    /// Index range of the attention convolution's parameters.
    pub fn attention_param_range(&self) -> Option<std::ops::Range<usize>> {
        self.arch.attention.map(|c| c.w..c.b + c.geom.cout)
    }

    /// Overwrites the attention convolution (`1 x 3 x k x k` weights, one bias).
    pub fn set_attention_weights(&mut self, weight: &[T], bias: T) -> Result<()> {
        let conv = self
            .arch
            .attention
            .ok_or_else(|| Error::invalid("lesion-only model has no attention block"))?;
        if weight.len() != conv.geom.n_weights() {
            return Err(Error::Shape {
                expected: format!("{} attention weights", conv.geom.n_weights()),
                actual: format!("{}", weight.len()),
            });
        }
        self.params[conv.w..conv.w + weight.len()].copy_from_slice(weight);
        self.params[conv.b] = bias;
        Ok(())
    }

    /// Spatial shape after each residual block, and the pooled width.
    pub fn output_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.arch
            .blocks
            .iter()
            .map(|b| (b.a.geom.cout, b.a.geom.ho(), b.a.geom.wo()))
            .collect()
    }

    fn check_input(&self, x: &ImageTensor<T>) -> Result<()> {
        let r = self.config.input_resolution;
        if x.channels() != INPUT_CHANNELS || x.spatial() != (r, r) {
            return Err(Error::Shape {
                expected: format!("{INPUT_CHANNELS}x{r}x{r}"),
                actual: format!("{}x{}x{}", x.channels(), x.height(), x.width()),
            });
        }
        Ok(())
    }

    /// `A = softmax(conv(X))` over all spatial positions.
    pub fn attention_block(&self, x: &ImageTensor<T>) -> Result<AttentionMap<T>> {
        self.check_input(x)?;
        let conv = self
            .arch
            .attention
            .ok_or_else(|| Error::invalid("lesion-only model has no attention block"))?;
        let mut s = Scratch::default();
        self.attention_into(&conv, x, &mut s);
        let r = self.config.input_resolution;
        AttentionMap::new(r, r, s.att)
    }

    fn attention_into(&self, conv: &ConvLayer, x: &ImageTensor<T>, s: &mut Scratch<T>) {
        let g = conv.geom;
        resize(&mut s.att_cols, g.cols_len());
        resize(&mut s.att_logits, g.out_len());
        resize(&mut s.att, g.out_len());
        conv::im2col(&g, x.data(), &mut s.att_cols);
        conv::forward(&g, conv.weight(&self.params), conv.bias(&self.params), &s.att_cols, &mut s.att_logits);
        spatial_softmax(&s.att_logits, &mut s.att);
    }

    fn attention_scale(&self) -> T {
        if self.config.rescale_attention {
            T::lit((self.config.input_resolution * self.config.input_resolution) as f64)
        } else {
            T::one()
        }
    }

    fn forward_into(&self, x: &ImageTensor<T>, mask: Option<&LesionMask>, s: &mut Scratch<T>) -> Result<()> {
        self.check_input(x)?;
        let p = &self.params;
        let hw = x.height() * x.width();
        match (self.arch.attention, mask) {
            (Some(conv), _) => {
                self.attention_into(&conv, x, s);
                let scale = self.attention_scale();
                resize(&mut s.net_in, x.data().len());
                for (c, plane) in s.net_in.chunks_mut(hw).enumerate() {
                    let src = &x.data()[c * hw..(c + 1) * hw];
                    for ((o, &v), &a) in plane.iter_mut().zip(src).zip(&s.att) {
                        *o = scale * a * v;
                    }
                }
            }
            (None, Some(m)) => {
                let masked = lesion_only_input(x, m)?;
                let area = T::lit(m.area() as f64);
                s.att.clear();
                s.att.extend(m.data().iter().map(|&b| if b { T::one() / area } else { T::zero() }));
                s.net_in.clear();
                s.net_in.extend_from_slice(masked.data());
            }
            (None, None) => return Err(Error::MissingMask("lesion-only input".into())),
        }

        if s.blocks.len() != self.arch.blocks.len() {
            s.blocks = vec![BlockCache::default(); self.arch.blocks.len()];
        }
        for (i, blk) in self.arch.blocks.iter().enumerate() {
            let (before, rest) = s.blocks.split_at_mut(i);
            let input: &[T] = if i == 0 { &s.net_in } else { &before[i - 1].out };
            let c = &mut rest[0];
            resize(&mut c.cols_a, blk.a.geom.cols_len());
            resize(&mut c.h1, blk.a.geom.out_len());
            resize(&mut c.cols_b, blk.b.geom.cols_len());
            resize(&mut c.cols_p, blk.proj.geom.cols_len());
            resize(&mut c.out, blk.b.geom.out_len());
            conv::im2col(&blk.a.geom, input, &mut c.cols_a);
            conv::forward(&blk.a.geom, blk.a.weight(p), blk.a.bias(p), &c.cols_a, &mut c.h1);
            relu_inplace(&mut c.h1);
            conv::im2col(&blk.b.geom, &c.h1, &mut c.cols_b);
            conv::forward(&blk.b.geom, blk.b.weight(p), blk.b.bias(p), &c.cols_b, &mut c.out);
            conv::im2col(&blk.proj.geom, input, &mut c.cols_p);
            // out += proj(x): run the projection into d_out as a temporary
            resize(&mut c.d_out, blk.proj.geom.out_len());
            conv::forward(&blk.proj.geom, blk.proj.weight(p), blk.proj.bias(p), &c.cols_p, &mut c.d_out);
            for (o, &k) in c.out.iter_mut().zip(&c.d_out) {
                *o = *o + k;
            }
            relu_inplace(&mut c.out);
        }

        let last = s.blocks.last().expect("at least one block");
        let fc1 = self.arch.fc1;
        let spatial = last.out.len() / fc1.n_in;
        s.gap.clear();
        s.gap
            .extend(last.out.chunks(spatial).map(|ch| ch.iter().copied().sum::<T>() / T::lit(spatial as f64)));
        resize(&mut s.z1, fc1.n_out);
        resize(&mut s.a1, fc1.n_out);
        for j in 0..fc1.n_out {
            let row = &p[fc1.w + j * fc1.n_in..fc1.w + (j + 1) * fc1.n_in];
            let z = p[fc1.b + j] + row.iter().zip(&s.gap).map(|(&w, &g)| w * g).sum::<T>();
            s.z1[j] = z;
            s.a1[j] = z.max(T::zero());
        }
        let fc2 = self.arch.fc2;
        s.logit = p[fc2.b] + p[fc2.w..fc2.w + fc2.n_in].iter().zip(&s.a1).map(|(&w, &a)| w * a).sum::<T>();
        Ok(())
    }

    /// Forward pass of the attention variant.
    pub fn forward(&self, x: &ImageTensor<T>) -> Result<ForwardOutput<T>> {
        self.forward_with_mask(x, None)
    }

    /// Forward pass; the mask is read only by the lesion-only variant.
    pub fn forward_with_mask(&self, x: &ImageTensor<T>, mask: Option<&LesionMask>) -> Result<ForwardOutput<T>> {
        let mut s = Scratch::default();
        self.forward_into(x, mask, &mut s)?;
        let r = self.config.input_resolution;
        Ok(ForwardOutput {
            score: sigmoid(s.logit),
            logit: s.logit,
            attention: AttentionMap::new(r, r, std::mem::take(&mut s.att))?,
        })
    }

    /// Score only, reusing `scratch`.
    pub fn predict(&self, x: &ImageTensor<T>, mask: Option<&LesionMask>, scratch: &mut Scratch<T>) -> Result<T> {
        self.forward_into(x, mask, scratch)?;
        Ok(sigmoid(scratch.logit))
    }

    /// Mean loss over `batch` and its gradient, written into `grad`:
    /// `BCE(score, label) + lambda * (1 - cos(M_s, A))`.
    pub fn loss_and_gradient(
        &self,
        batch: &[TrainExample<'_, T>],
        lambda: T,
        grad: &mut [T],
        scratch: &mut Scratch<T>,
    ) -> Result<LossBreakdown<T>> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        if grad.len() != self.arch.n_params {
            return Err(Error::Shape {
                expected: format!("{} gradient entries", self.arch.n_params),
                actual: format!("{}", grad.len()),
            });
        }
        let use_attn_loss = lambda > T::zero() && self.arch.attention.is_some();
        grad.fill(T::zero());
        let inv_b = T::one() / T::lit(batch.len() as f64);
        let (mut cls_sum, mut att_sum) = (T::zero(), T::zero());
        for ex in batch {
            self.forward_into(ex.image, ex.mask, scratch)?;
            let y = if ex.label { T::one() } else { T::zero() };
            let logit = scratch.logit;
            cls_sum = cls_sum + softplus(logit) - y * logit;
            let dlogit = (sigmoid(logit) - y) * inv_b;

            let att_loss = if use_attn_loss {
                let target = ex
                    .target
                    .ok_or_else(|| Error::invalid("attention loss needs a softened lesion mask per sample"))?;
                let r = self.config.input_resolution;
                if target.shape() != (r, r) {
                    return Err(Error::Shape {
                        expected: format!("{r}x{r} soft mask"),
                        actual: format!("{}x{}", target.shape().0, target.shape().1),
                    });
                }
                resize(&mut scratch.att_grad, scratch.att.len());
                let l = cosine_loss_with_grad(target.data(), &scratch.att, &mut scratch.att_grad)?;
                let w = lambda * inv_b;
                for g in &mut scratch.att_grad {
                    *g = *g * w;
                }
                Some(l)
            } else {
                None
            };
            if let Some(l) = att_loss {
                att_sum = att_sum + l;
            }
            self.backward(ex.image, dlogit, att_loss.is_some(), grad, scratch);
        }
        let classification = cls_sum * inv_b;
        let attention = att_sum * inv_b;
        Ok(LossBreakdown {
            total: classification + lambda * attention,
            classification,
            attention,
        })
    }

    /// Backpropagates one sample. `scratch.att_grad` holds `dL/dA` when
    /// `with_att_grad` is set.
    fn backward(&self, x: &ImageTensor<T>, dlogit: T, with_att_grad: bool, grad: &mut [T], s: &mut Scratch<T>) {
        let p = &self.params;
        let (fc1, fc2) = (self.arch.fc1, self.arch.fc2);

        for j in 0..fc2.n_in {
            grad[fc2.w + j] = grad[fc2.w + j] + dlogit * s.a1[j];
        }
        grad[fc2.b] = grad[fc2.b] + dlogit;
        let mut dgap = vec![T::zero(); fc1.n_in];
        for j in 0..fc1.n_out {
            if s.z1[j] <= T::zero() {
                continue;
            }
            let dz = dlogit * p[fc2.w + j];
            grad[fc1.b + j] = grad[fc1.b + j] + dz;
            for i in 0..fc1.n_in {
                grad[fc1.w + j * fc1.n_in + i] = grad[fc1.w + j * fc1.n_in + i] + dz * s.gap[i];
                dgap[i] = dgap[i] + dz * p[fc1.w + j * fc1.n_in + i];
            }
        }

        let n_blocks = self.arch.blocks.len();
        {
            let last = &mut s.blocks[n_blocks - 1];
            let spatial = last.out.len() / fc1.n_in;
            let inv = T::one() / T::lit(spatial as f64);
            resize(&mut last.d_out, last.out.len());
            for (c, ch) in last.d_out.chunks_mut(spatial).enumerate() {
                ch.fill(dgap[c] * inv);
            }
        }

        let need_input_grad = self.arch.attention.is_some();
        for i in (0..n_blocks).rev() {
            let blk = self.arch.blocks[i];
            let (before, rest) = s.blocks.split_at_mut(i);
            let c = &mut rest[0];
            for (d, &o) in c.d_out.iter_mut().zip(&c.out) {
                if o <= T::zero() {
                    *d = T::zero();
                }
            }
            let want_dx = i > 0 || need_input_grad;

            let max_cols = blk.a.geom.cols_len().max(blk.b.geom.cols_len()).max(blk.proj.geom.cols_len());
            if s.dcols.len() < max_cols {
                s.dcols.resize(max_cols, T::zero());
            }

            // conv b
            let nb = blk.b.geom.cols_len();
            let (dw, db) = blk.b.grads(grad);
            conv::backward(&blk.b.geom, blk.b.weight(p), &c.cols_b, &c.d_out, dw, db, Some(&mut s.dcols[..nb]));
            resize(&mut c.d_h1, c.h1.len());
            conv::col2im_add(&blk.b.geom, &s.dcols[..nb], &mut c.d_h1);
            for (d, &h) in c.d_h1.iter_mut().zip(&c.h1) {
                if h <= T::zero() {
                    *d = T::zero();
                }
            }

            resize(&mut c.d_in, blk.a.geom.in_len());
            // conv a
            let na = blk.a.geom.cols_len();
            let (dw, db) = blk.a.grads(grad);
            let dcols = want_dx.then(|| &mut s.dcols[..na]);
            conv::backward(&blk.a.geom, blk.a.weight(p), &c.cols_a, &c.d_h1, dw, db, dcols);
            if want_dx {
                conv::col2im_add(&blk.a.geom, &s.dcols[..na], &mut c.d_in);
            }
            // projection
            let np = blk.proj.geom.cols_len();
            let (dw, db) = blk.proj.grads(grad);
            let dcols = want_dx.then(|| &mut s.dcols[..np]);
            conv::backward(&blk.proj.geom, blk.proj.weight(p), &c.cols_p, &c.d_out, dw, db, dcols);
            if want_dx {
                conv::col2im_add(&blk.proj.geom, &s.dcols[..np], &mut c.d_in);
            }
            if i > 0 {
                let prev = &mut before[i - 1];
                prev.d_out.clear();
                prev.d_out.extend_from_slice(&c.d_in);
            }
        }

        let Some(conv) = self.arch.attention else {
            return;
        };
        // d net_in -> dA, then through the softmax into the attention conv.
        let hw = s.att.len();
        let scale = self.attention_scale();
        let d_net_in = &s.blocks[0].d_in;
        let mut d_att: Vec<T> = vec![T::zero(); hw];
        for (c, dplane) in d_net_in.chunks(hw).enumerate() {
            let xplane = &x.data()[c * hw..(c + 1) * hw];
            for ((da, &d), &v) in d_att.iter_mut().zip(dplane).zip(xplane) {
                *da = *da + scale * v * d;
            }
        }
        if with_att_grad {
            for (da, &g) in d_att.iter_mut().zip(&s.att_grad) {
                *da = *da + g;
            }
        }
        let dot: T = d_att.iter().zip(&s.att).map(|(&d, &a)| d * a).sum();
        for (da, &a) in d_att.iter_mut().zip(&s.att) {
            *da = a * (*da - dot);
        }
        let (dw, db) = conv.grads(grad);
        conv::backward(&conv.geom, conv.weight(p), &s.att_cols, &d_att, dw, db, None);
    }
}

/// `X_A = A ⊙ X`, the map broadcast across channels.
pub fn apply_attention<T: Scalar>(x: &ImageTensor<T>, a: &AttentionMap<T>) -> Result<ImageTensor<T>> {
    if a.shape() != x.spatial() {
        return Err(Error::Shape {
            expected: format!("{}x{} attention", x.height(), x.width()),
            actual: format!("{}x{}", a.shape().0, a.shape().1),
        });
    }
    Ok(x.mul_spatial(a.data(), T::one()))
}

/// `X ⊙ M`: background zeroed, lesion pixels kept.
pub fn lesion_only_input<T: Scalar>(x: &ImageTensor<T>, mask: &LesionMask) -> Result<ImageTensor<T>> {
    x.check_mask_shape(mask)?;
    mask.validate_nonempty()?;
    let m: Vec<T> = mask.data().iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    Ok(x.mul_spatial(&m, T::one()))
}

#[cfg(test)]
mod tests;
