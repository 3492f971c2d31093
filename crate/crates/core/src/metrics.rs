//! Toy-FID with a fixed random embedder, plus SSIM, L1 and PSNR to targets.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vemkd_tensor::{Graph, ParamStore, Real, Tensor, Var};

use crate::distill_losses::{self, FeatureExtractor};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::layers::Conv;
use crate::nets::{count_macs, count_params, Generator};
use crate::sampler::chain_invocations;

pub const EMBEDDER_SEED: u64 = 0x5eed_e3bd;
pub const EMBED_DIM: usize = 64;
const STAGE_WIDTHS: [usize; 4] = [16, 32, 64, EMBED_DIM];
/// Peak-to-peak range of `[-1, 1]` images.
pub const PSNR_PEAK: f64 = 2.0;
pub const PSNR_CAP_DB: f64 = 100.0;

/// Fixed random-weight convolutional embedder: four stride-2 stages and a
/// global average pool.
#[derive(Clone, Debug)]
pub struct ToyEmbedder<T: Real> {
    store: ParamStore<T>,
    stages: Vec<Conv>,
}

impl<T: Real> ToyEmbedder<T> {
    /// The embedder for `channels`-channel images. Weights are drawn in
    /// double precision and cast, so every precision sees the same network.
    pub fn new(channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDER_SEED);
        let mut store = ParamStore::<f64>::new();
        let mut cin = channels;
        let stages = STAGE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&mut store, &format!("stage{i}"), cin, c, 3, 2, true, &mut rng);
                cin = c;
                conv
            })
            .collect();
        Self {
            store: store.cast(),
            stages,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Hex SHA-256 over the little-endian f32 parameter bytes.
    pub fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in self.store.entries() {
            for v in e.value.data() {
                h.update((v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn stage_maps(&self, g: &Graph<T>, x: Var) -> Vec<Var> {
        g.freeze(&self.store);
        let mut h = x;
        self.stages
            .iter()
            .map(|c| {
                h = g.leaky_relu(c.forward(g, &self.store, h), T::lit(0.2));
                h
            })
            .collect()
    }

    /// `[N, 64]` pooled features, one row per image.
    pub fn embed(&self, images: &ImageBatch<T>) -> DMatrix<f64> {
        let g = Graph::new();
        let x = g.constant(images.tensor().clone());
        let last = *self.stage_maps(&g, x).last().expect("four stages");
        let pooled = g.value(g.mean_spatial(last)).clone();
        let n = images.batch();
        DMatrix::from_row_iterator(n, EMBED_DIM, pooled.data().iter().map(|v| v.to_f64_lossy()))
    }

    /// Embeds in chunks of `batch` images.
    pub fn embed_chunked(&self, images: &ImageBatch<T>, batch: usize) -> Result<DMatrix<f64>> {
        let n = images.batch();
        let mut rows = Vec::with_capacity(n * EMBED_DIM);
        let mut start = 0;
        while start < n {
            let len = batch.max(1).min(n - start);
            let chunk = ImageBatch::new(images.tensor().slice_outer(start, len))?;
            let f = self.embed(&chunk);
            for r in 0..len {
                rows.extend(f.row(r).iter().copied());
            }
            start += len;
        }
        Ok(DMatrix::from_row_slice(n, EMBED_DIM, &rows))
    }
}

impl<T: Real> FeatureExtractor<T> for ToyEmbedder<T> {
    fn feature_maps(&self, g: &Graph<T>, x: Var) -> Vec<Var> {
        self.stage_maps(g, x)
    }
}

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Statistics of the rows of `features`.
    pub fn from_features(features: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = features.shape();
        if n < 2 {
            return Err(Error::Contract("need at least two feature rows".into()));
        }
        if n < d + 1 {
            warn!("gaussian stats from {n} samples in {d} dimensions; covariance is singular");
        }
        let mean = features.row_mean().transpose();
        let mut centered = features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric PSD square root, clipping negative eigenvalues; returns the
/// largest clipped magnitude too.
fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clipped: f64 = 0.0;
    let roots = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clipped = clipped.max(-l);
            0.0
        } else {
            l.sqrt()
        }
    });
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clipped)
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^{1/2})`. The trace term is evaluated
/// as `tr (Σa^{1/2} Σb Σa^{1/2})^{1/2}`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "frechet_distance: dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (ra, c1) = psd_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let (_, c2) = psd_sqrt(&inner);
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let clip = c1.max(c2);
    if clip > 0.0 {
        warn!("frechet_distance: clipped negative eigenvalues up to {clip:.3e}");
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        let ev = SymmetricEigen::new(a.cov.clone()).eigenvalues;
        let cond = ev.max().abs() / ev.min().abs();
        return Err(Error::Numerical(format!(
            "frechet distance is not finite; condition number {cond:.3e}"
        )));
    }
    Ok(d.max(0.0))
}

/// Toy-FID between two image sets.
pub fn toy_fid<T: Real>(embedder: &ToyEmbedder<T>, a: &ImageBatch<T>, b: &ImageBatch<T>, batch: usize) -> Result<f64> {
    let fa = GaussianStats::from_features(&embedder.embed_chunked(a, batch)?)?;
    let fb = GaussianStats::from_features(&embedder.embed_chunked(b, batch)?)?;
    frechet_distance(&fa, &fb)
}

/// Mean SSIM between paired image sets.
pub fn ssim_to_target<T: Real>(a: &ImageBatch<T>, b: &ImageBatch<T>) -> Result<f64> {
    a.same_shape(b, "ssim_to_target")?;
    let g = Graph::<f64>::new();
    let (x, y) = (g.constant(a.tensor().cast()), g.constant(b.tensor().cast()));
    Ok(g.item(distill_losses::ssim(&g, x, y)?))
}

pub fn l1_to_target<T: Real>(a: &ImageBatch<T>, b: &ImageBatch<T>) -> Result<f64> {
    a.same_shape(b, "l1_to_target")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .sum();
    Ok(s / a.data().len() as f64)
}

/// PSNR of the pooled mean squared error, capped for identical sets.
pub fn psnr<T: Real>(a: &ImageBatch<T>, b: &ImageBatch<T>) -> Result<f64> {
    a.same_shape(b, "psnr")?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub toy_fid: f64,
    pub ssim_to_target: f64,
    pub l1_to_target: f64,
    pub psnr: f64,
    pub params: usize,
    pub macs: usize,
    /// Compression relative to the reference generator, if one was given.
    pub compression_ratio: Option<f64>,
    pub sampler_invocations: u64,
}

/// Runs `generator` over `x` in chunks of `batch`.
pub fn generate_all<T: Real>(generator: &Generator<T>, x: &ImageBatch<T>, batch: usize) -> Result<ImageBatch<T>> {
    let n = x.batch();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let chunk = ImageBatch::new(x.tensor().slice_outer(start, len))?;
        parts.push(generator.generate(&chunk)?.into_tensor());
        start += len;
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    ImageBatch::new(Tensor::concat_outer(&refs))
}

/// Evaluates `student` on paired `(x, y)`; `reference` supplies the
/// compression ratio denominator.
pub fn evaluate<T: Real>(
    student: &Generator<T>,
    reference: Option<&Generator<T>>,
    x: &ImageBatch<T>,
    y: &ImageBatch<T>,
    embedder: &ToyEmbedder<T>,
    batch: usize,
) -> Result<MetricsReport> {
    let before = chain_invocations();
    let out = generate_all(student, x, batch)?;
    let params = count_params(student);
    let report = MetricsReport {
        toy_fid: toy_fid(embedder, &out, y, batch)?,
        ssim_to_target: ssim_to_target(&out, y)?,
        l1_to_target: l1_to_target(&out, y)?,
        psnr: psnr(&out, y)?,
        params,
        macs: count_macs(student, student.spec().image_size)?,
        compression_ratio: reference.map(|r| count_params(r) as f64 / params as f64),
        sampler_invocations: chain_invocations() - before,
    };
    let finite = [report.toy_fid, report.ssim_to_target, report.l1_to_target, report.psnr];
    if finite.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite metrics: {report:?}")));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn stats_1d(mu: f64, n: usize, seed: u64) -> GaussianStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n)
            .map(|_| mu + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        GaussianStats::from_features(&DMatrix::from_column_slice(n, 1, &v)).unwrap()
    }

    #[test]
    fn closed_form_1d() {
        let a = GaussianStats {
            mean: DVector::from_element(1, 0.0),
            cov: DMatrix::from_element(1, 1, 1.0),
            count: 2,
        };
        let b = GaussianStats {
            mean: DVector::from_element(1, 1.0),
            cov: DMatrix::from_element(1, 1, 4.0),
            count: 2,
        };
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn monte_carlo_unit_shift() {
        let d = frechet_distance(&stats_1d(0.0, 10_000, 1), &stats_1d(1.0, 10_000, 2)).unwrap();
        assert!((d - 1.0).abs() < 0.02, "{d}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1 = DMatrix::from_fn(40, 5, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let f2 = DMatrix::from_fn(30, 5, |i, j| ((i * j) as f64).sin() + 0.3 * i as f64 / 30.0);
        let (a, b) = (
            GaussianStats::from_features(&f1).unwrap(),
            GaussianStats::from_features(&f2).unwrap(),
        );
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8 && ab >= 0.0);
        assert!(a.cov == a.cov.transpose());
    }

    #[test]
    fn embedder_is_fixed_and_deterministic() {
        let e = ToyEmbedder::<f32>::new(3);
        assert_eq!(e.param_checksum(), ToyEmbedder::<f64>::new(3).param_checksum());
        let x = ImageBatch::new(Tensor::rand_uniform(
            &[3, 3, 32, 32],
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        ))
        .unwrap();
        let f = e.embed(&x);
        assert_eq!(f.shape(), (3, EMBED_DIM));
        assert_eq!(f, e.embed_chunked(&x, 2).unwrap());
    }

    #[test]
    fn image_metrics_identities() {
        let x: ImageBatch<f64> = ImageBatch::new(Tensor::rand_uniform(
            &[2, 3, 16, 16],
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        ))
        .unwrap();
        assert_eq!(l1_to_target(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        assert!((ssim_to_target(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let zeros: ImageBatch<f64> = ImageBatch::new(Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        let ones = ImageBatch::new(Tensor::ones(&[1, 3, 16, 16])).unwrap();
        assert!((psnr(&zeros, &ones).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    }
}
