//! Algorithm-specific distillation losses and their building blocks.
//!
//! Every reduction is a per-element mean, so weights do not depend on image
//! resolution or feature sizes. Losses take graph variables so gradients
//! reach the student (and its adapters) while teacher tensors are passed as
//! constants by the caller.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vemkd_tensor::{Graph, ParamStore, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{Conv, Cost};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of `[-1, 1]` images.
pub const SSIM_RANGE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Omgd,
    Gcc,
    GanCompression,
    Cat,
    Cagc,
}

impl Algorithm {
    /// Whether the student also receives an adversarial loss.
    pub fn adversarial(self) -> bool {
        !matches!(self, Algorithm::Omgd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub algorithm: Algorithm,
    pub lambda_cd: f64,
    pub lambda_tv: f64,
    pub lambda_ssim: f64,
    pub lambda_pl: f64,
    pub lambda_recon: f64,
    pub lambda_mse: f64,
    pub lambda_style: f64,
    pub lambda_distill: f64,
    pub lambda_ka: f64,
    pub lambda_lpips: f64,
    /// Generator tap names whose features are distilled.
    pub taps: Vec<String>,
    pub adapter_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Omgd,
            lambda_cd: 1.0,
            lambda_tv: 0.01,
            lambda_ssim: 1.0,
            lambda_pl: 1.0,
            lambda_recon: 10.0,
            lambda_mse: 1.0,
            lambda_style: 10.0,
            lambda_distill: 1.0,
            lambda_ka: 1.0,
            lambda_lpips: 1.0,
            taps: vec!["down2".into(), "up1".into()],
            adapter_seed: 17,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("distill.lambda_cd", self.lambda_cd),
            ("distill.lambda_tv", self.lambda_tv),
            ("distill.lambda_ssim", self.lambda_ssim),
            ("distill.lambda_pl", self.lambda_pl),
            ("distill.lambda_recon", self.lambda_recon),
            ("distill.lambda_mse", self.lambda_mse),
            ("distill.lambda_style", self.lambda_style),
            ("distill.lambda_distill", self.lambda_distill),
            ("distill.lambda_ka", self.lambda_ka),
            ("distill.lambda_lpips", self.lambda_lpips),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be non-negative and finite"));
            }
        }
        Ok(())
    }
}

/// Feature extractor used for perceptual comparisons. Implementations must
/// keep their own parameters out of the gradient.
pub trait FeatureExtractor<T: Real> {
    fn feature_maps(&self, g: &Graph<T>, x: Var) -> Vec<Var>;
}

/// 1×1 convolutions mapping student features to teacher widths.
#[derive(Clone, Debug)]
pub struct Adapters<T: Real> {
    store: ParamStore<T>,
    convs: Vec<Conv>,
}

impl<T: Real> Adapters<T> {
    pub fn build(student_channels: &[usize], teacher_channels: &[usize], seed: u64) -> Result<Self> {
        if student_channels.len() != teacher_channels.len() {
            return Err(Error::Contract("adapters: layer counts differ".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let convs = student_channels
            .iter()
            .zip(teacher_channels)
            .enumerate()
            .map(|(i, (&cs, &ct))| Conv::new(&mut store, &format!("adapter{i}"), cs, ct, 1, 1, true, &mut rng))
            .collect();
        Ok(Self { store, convs })
    }

    /// Identity maps for equal student and teacher widths.
    pub fn identity(channels: &[usize]) -> Self {
        let mut a = Self::build(channels, channels, 0).expect("equal layer counts");
        for conv in &a.convs {
            let c = conv.cin;
            *a.store.get_mut(conv.weight) =
                Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { T::one() } else { T::zero() });
            if let Some(b) = conv.bias {
                *a.store.get_mut(b) = Tensor::zeros(&[c]);
            }
        }
        a
    }

    pub fn len(&self) -> usize {
        self.convs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.convs.is_empty()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn apply(&self, g: &Graph<T>, layer: usize, x: Var) -> Result<Var> {
        let conv = self
            .convs
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("no adapter for layer {layer}")))?;
        let c = g.shape(x)[1];
        if c != conv.cin {
            return Err(Error::Contract(format!(
                "adapter {layer} expects {} channels, got {c}",
                conv.cin
            )));
        }
        Ok(conv.forward(g, &self.store, x))
    }

    pub fn cost(&self, sizes: &[usize]) -> Cost {
        self.convs.iter().zip(sizes).map(|(c, &s)| c.cost(s)).sum()
    }
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Contract(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "l1")?;
    Ok(g.mean(g.abs(g.sub(a, b))))
}

/// Mean squared difference.
pub fn mse<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "mse")?;
    Ok(g.mean(g.square(g.sub(a, b))))
}

/// `(1/C)‖GAP(p) − GAP(q)‖²`, averaged over the batch.
pub fn attention_loss<T: Real>(g: &Graph<T>, p: Var, q: Var) -> Result<Var> {
    let (sp, sq) = (g.shape(p), g.shape(q));
    if sp.len() != 4 || sq.len() != 4 || sp[..2] != sq[..2] {
        return Err(Error::Contract(format!(
            "attention_loss: batch and channel counts must match, got {sp:?} and {sq:?}"
        )));
    }
    Ok(g.mean(g.square(g.sub(g.mean_spatial(p), g.mean_spatial(q)))))
}

/// `Σ_ℓ attention_loss(teacher_ℓ, f_ℓ(student_ℓ))`.
pub fn channel_distill_loss<T: Real>(
    g: &Graph<T>,
    teacher: &[Var],
    student: &[Var],
    adapters: &Adapters<T>,
) -> Result<Var> {
    if teacher.len() != student.len() {
        return Err(Error::Contract("channel_distill_loss: layer counts differ".into()));
    }
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for (l, (&t, &s)) in teacher.iter().zip(student).enumerate() {
        let adapted = adapters.apply(g, l, s)?;
        if g.shape(adapted)[1] != g.shape(t)[1] {
            return Err(Error::Contract(format!(
                "adapter {l} output width does not match the teacher"
            )));
        }
        total = g.add(total, attention_loss(g, t, adapted)?);
    }
    Ok(total)
}

fn gaussian_window<T: Real>(size: usize, sigma: f64) -> Vec<T> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| T::lit(v / s)).collect()
}

/// Mean structural similarity over valid window positions.
pub fn ssim<T: Real>(g: &Graph<T>, x: Var, y: Var) -> Result<Var> {
    same_shape(g, x, y, "ssim")?;
    let shape = g.shape(x);
    let size = shape[2].min(shape[3]);
    let win = if size < SSIM_WINDOW {
        warn!("ssim: {size}x{size} images are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window; shrinking it");
        size
    } else {
        SSIM_WINDOW
    };
    let k = gaussian_window::<T>(win, SSIM_SIGMA);
    let c1 = T::lit((0.01 * SSIM_RANGE).powi(2));
    let c2 = T::lit((0.03 * SSIM_RANGE).powi(2));
    let mx = g.blur(x, &k);
    let my = g.blur(y, &k);
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxy = g.mul(mx, my);
    let vx = g.sub(g.blur(g.square(x), &k), mx2);
    let vy = g.sub(g.blur(g.square(y), &k), my2);
    let cov = g.sub(g.blur(g.mul(x, y), &k), mxy);
    let two = T::lit(2.0);
    let num = g.mul(g.add_scalar(g.scale(mxy, two), c1), g.add_scalar(g.scale(cov, two), c2));
    let den = g.mul(g.add_scalar(g.add(mx2, my2), c1), g.add_scalar(g.add(vx, vy), c2));
    Ok(g.mean(g.div(num, den)))
}

/// Anisotropic L1 total variation normalized by `C·H·W`, averaged over the batch.
pub fn total_variation<T: Real>(g: &Graph<T>, x: Var) -> Var {
    let shape = g.shape(x);
    let chw = T::lit((shape[1] * shape[2] * shape[3]) as f64);
    let dh = g.sum_per_sample(g.abs(g.spatial_diff(x, 2)));
    let dw = g.sum_per_sample(g.abs(g.spatial_diff(x, 3)));
    g.scale(g.mean(g.add(dh, dw)), T::one() / chw)
}

/// Sum over extractor layers of the mean squared feature difference.
pub fn perceptual_loss<T: Real>(g: &Graph<T>, x: Var, y: Var, embedder: &dyn FeatureExtractor<T>) -> Result<Var> {
    same_shape(g, x, y, "perceptual_loss")?;
    let fx = embedder.feature_maps(g, x);
    let fy = embedder.feature_maps(g, y);
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for (a, b) in fx.into_iter().zip(fy) {
        total = g.add(total, mse(g, a, b)?);
    }
    Ok(total)
}

/// Batch-averaged channel Gram matrix `[C, C]`, each normalized by `C·H·W`.
pub fn gram<T: Real>(g: &Graph<T>, x: Var) -> Var {
    let shape = g.shape(x);
    let (n, c) = (shape[0], shape[1]);
    let per = g.reshape(g.gram(x), &[n, c * c]);
    let avg = g.constant(Tensor::full(&[1, n], T::one() / T::lit(n as f64)));
    g.reshape(g.matmul(avg, per), &[c, c])
}

/// `λ_MSE·mse(X, Y) + λ_style·mse(Gram(X), Gram(Y))` with per-sample Grams.
pub fn gcc_distance<T: Real>(g: &Graph<T>, x: Var, y: Var, lambda_mse: f64, lambda_style: f64) -> Result<Var> {
    same_shape(g, x, y, "gcc_distance")?;
    let mut total = g.scale(mse(g, x, y)?, T::lit(lambda_mse));
    if lambda_style != 0.0 {
        let style = mse(g, g.gram(x), g.gram(y))?;
        total = g.add(total, g.scale(style, T::lit(lambda_style)));
    }
    Ok(total)
}

/// Kernel alignment of two feature maps with equal batch size, in `[0, 1]`.
pub fn ka_alignment<T: Real>(g: &Graph<T>, s: Var, t: Var) -> Result<Var> {
    let (ss, st) = (g.shape(s), g.shape(t));
    if ss[0] != st[0] {
        return Err(Error::Contract("ka_alignment: batch sizes differ".into()));
    }
    let n = ss[0];
    let rs = g.reshape(s, &[n, ss[1..].iter().product()]);
    let rt = g.reshape(t, &[n, st[1..].iter().product()]);
    let ks = g.matmul(rs, g.transpose(rs));
    let kt = g.matmul(rt, g.transpose(rt));
    let ns = g.sum(g.square(ks));
    let nt = g.sum(g.square(kt));
    if g.item(ns) == T::zero() || g.item(nt) == T::zero() {
        warn!("ka_alignment: zero-norm feature map, alignment defined as 0");
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let num = g.sum(g.mul(ks, kt));
    Ok(g.div(num, g.sqrt(g.mul(ns, nt))))
}

/// Nearest-neighbour resize of a binary mask `[N, 1|C, H, W]` to `size` and `channels`.
fn resize_mask<T: Real>(mask: &Tensor<T>, channels: usize, size: usize) -> Result<Tensor<T>> {
    let s = mask.shape();
    let (n, mc, h, w) = (s[0], s[1], s[2], s[3]);
    if mc != 1 && mc != channels {
        return Err(Error::Contract(format!(
            "mask with {mc} channels cannot broadcast to {channels}"
        )));
    }
    if h % size != 0 || w % size != 0 {
        return Err(Error::Contract(format!(
            "mask of size {h}x{w} cannot be reduced to {size}"
        )));
    }
    let (fh, fw) = (h / size, w / size);
    let d = mask.data();
    Ok(Tensor::from_fn(&[n, channels, size, size], |idx| {
        let j = idx % size;
        let i = (idx / size) % size;
        let c = (idx / (size * size)) % channels;
        let b = idx / (size * size * channels);
        let mc_i = if mc == 1 { 0 } else { c };
        d[((b * mc + mc_i) * h + i * fh) * w + j * fw]
    }))
}

fn masked<T: Real>(g: &Graph<T>, x: Var, mask: &Tensor<T>) -> Result<Var> {
    let shape = g.shape(x);
    if mask.dim(0) != shape[0] {
        return Err(Error::Contract("mask batch size differs from the outputs".into()));
    }
    let m = resize_mask(mask, shape[1], shape[2])?;
    Ok(g.mul(x, g.constant(m)))
}

/// Outputs, features and optional extras consumed by the algorithm losses.
pub struct DistillInputs<'a, T> {
    pub student_out: Var,
    pub teacher_out: Var,
    pub student_feats: &'a [Var],
    pub teacher_feats: &'a [Var],
    /// Ground truth for paired data.
    pub target: Option<Var>,
    /// Teacher-discriminator taps on the student and teacher outputs.
    pub disc_feats: Option<(&'a [Var], &'a [Var])>,
    pub mask: Option<&'a Tensor<T>>,
}

fn zero<T: Real>(g: &Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

fn weighted<T: Real>(g: &Graph<T>, acc: Var, lambda: f64, term: impl FnOnce() -> Result<Var>) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(acc);
    }
    Ok(g.add(acc, g.scale(term()?, T::lit(lambda))))
}

fn check_feature_sets<T: Real>(inp: &DistillInputs<'_, T>) -> Result<()> {
    if inp.student_feats.len() != inp.teacher_feats.len() {
        return Err(Error::Contract(
            "student and teacher feature sets differ in length".into(),
        ));
    }
    Ok(())
}

/// `λ_SSIM(1 − ssim) + λ_PL·perceptual + λ_recon·L1 + λ_CD·CD + λ_TV·TV(student)`.
pub fn omgd_loss<T: Real>(
    g: &Graph<T>,
    inp: &DistillInputs<'_, T>,
    cfg: &DistillConfig,
    adapters: &Adapters<T>,
    embedder: &dyn FeatureExtractor<T>,
) -> Result<Var> {
    check_feature_sets(inp)?;
    let (s, t) = (inp.student_out, inp.teacher_out);
    let mut total = zero(g);
    total = weighted(g, total, cfg.lambda_ssim, || {
        let v = ssim(g, s, t)?;
        Ok(g.add_scalar(g.neg(v), T::one()))
    })?;
    total = weighted(g, total, cfg.lambda_pl, || perceptual_loss(g, s, t, embedder))?;
    total = weighted(g, total, cfg.lambda_recon, || l1(g, s, t))?;
    total = weighted(g, total, cfg.lambda_cd, || {
        channel_distill_loss(g, inp.teacher_feats, inp.student_feats, adapters)
    })?;
    total = weighted(g, total, cfg.lambda_tv, || Ok(total_variation(g, s)))?;
    Ok(total)
}

/// Discriminator-feature and generator-feature distances plus reconstruction.
pub fn gcc_loss<T: Real>(
    g: &Graph<T>,
    inp: &DistillInputs<'_, T>,
    cfg: &DistillConfig,
    adapters: &Adapters<T>,
) -> Result<Var> {
    check_feature_sets(inp)?;
    let (ds, dt) = inp
        .disc_feats
        .ok_or_else(|| Error::config("distill.algorithm", "gcc requires teacher discriminator taps"))?;
    if ds.len() != dt.len() {
        return Err(Error::Contract("discriminator tap sets differ in length".into()));
    }
    let mut total = zero(g);
    for (&a, &b) in ds.iter().zip(dt) {
        total = g.add(total, gcc_distance(g, a, b, cfg.lambda_mse, cfg.lambda_style)?);
    }
    for (l, (&s, &t)) in inp.student_feats.iter().zip(inp.teacher_feats).enumerate() {
        let adapted = adapters.apply(g, l, s)?;
        total = g.add(total, gcc_distance(g, adapted, t, cfg.lambda_mse, cfg.lambda_style)?);
    }
    weighted(g, total, cfg.lambda_recon, || l1(g, inp.student_out, inp.teacher_out))
}

fn recon_target<T: Real>(inp: &DistillInputs<'_, T>, paired: bool) -> Result<Var> {
    if paired {
        inp.target
            .ok_or_else(|| Error::config("schedule.mode", "paired reconstruction requires ground truth"))
    } else {
        Ok(inp.teacher_out)
    }
}

/// Reconstruction (to `y` when paired, else to the teacher) plus feature MSE.
pub fn gan_compression_loss<T: Real>(
    g: &Graph<T>,
    inp: &DistillInputs<'_, T>,
    cfg: &DistillConfig,
    adapters: &Adapters<T>,
    paired: bool,
) -> Result<Var> {
    check_feature_sets(inp)?;
    let target = recon_target(inp, paired)?;
    let mut total = weighted(g, zero(g), cfg.lambda_recon, || l1(g, inp.student_out, target))?;
    total = weighted(g, total, cfg.lambda_distill, || {
        let mut acc = zero(g);
        for (l, (&s, &t)) in inp.student_feats.iter().zip(inp.teacher_feats).enumerate() {
            acc = g.add(acc, mse(g, adapters.apply(g, l, s)?, t)?);
        }
        Ok(acc)
    })?;
    Ok(total)
}

/// Reconstruction plus the negated kernel alignment summed over layers.
pub fn cat_loss<T: Real>(g: &Graph<T>, inp: &DistillInputs<'_, T>, cfg: &DistillConfig, paired: bool) -> Result<Var> {
    check_feature_sets(inp)?;
    let target = recon_target(inp, paired)?;
    let total = weighted(g, zero(g), cfg.lambda_recon, || l1(g, inp.student_out, target))?;
    weighted(g, total, cfg.lambda_ka, || {
        let mut acc = zero(g);
        for (&s, &t) in inp.student_feats.iter().zip(inp.teacher_feats) {
            acc = g.sub(acc, ka_alignment(g, s, t)?);
        }
        Ok(acc)
    })
}

/// Masked reconstruction, feature and perceptual terms. `mask` is binary,
/// `[N, 1|C, H, W]`, and is nearest-neighbour resized per feature layer.
pub fn cagc_loss<T: Real>(
    g: &Graph<T>,
    inp: &DistillInputs<'_, T>,
    cfg: &DistillConfig,
    adapters: &Adapters<T>,
    embedder: &dyn FeatureExtractor<T>,
) -> Result<Var> {
    check_feature_sets(inp)?;
    let mask = inp
        .mask
        .ok_or_else(|| Error::config("distill.algorithm", "cagc requires a content mask"))?;
    if mask.rank() != 4 || mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Contract("cagc mask must be a binary 4-D array".into()));
    }
    let ms = masked(g, inp.student_out, mask)?;
    let mt = masked(g, inp.teacher_out, mask)?;
    let mut total = weighted(g, zero(g), cfg.lambda_recon, || l1(g, ms, mt))?;
    total = weighted(g, total, cfg.lambda_distill, || {
        let mut acc = zero(g);
        for (l, (&s, &t)) in inp.student_feats.iter().zip(inp.teacher_feats).enumerate() {
            let a = masked(g, adapters.apply(g, l, s)?, mask)?;
            let b = masked(g, t, mask)?;
            acc = g.add(acc, l1(g, a, b)?);
        }
        Ok(acc)
    })?;
    weighted(g, total, cfg.lambda_lpips, || perceptual_loss(g, ms, mt, embedder))
}

/// The configured algorithm's loss, without any adversarial term.
pub fn algorithm_loss<T: Real>(
    g: &Graph<T>,
    inp: &DistillInputs<'_, T>,
    cfg: &DistillConfig,
    adapters: &Adapters<T>,
    embedder: &dyn FeatureExtractor<T>,
    paired: bool,
) -> Result<Var> {
    match cfg.algorithm {
        Algorithm::Omgd => omgd_loss(g, inp, cfg, adapters, embedder),
        Algorithm::Gcc => gcc_loss(g, inp, cfg, adapters),
        Algorithm::GanCompression => gan_compression_loss(g, inp, cfg, adapters, paired),
        Algorithm::Cat => cat_loss(g, inp, cfg, paired),
        Algorithm::Cagc => cagc_loss(g, inp, cfg, adapters, embedder),
    }
}
