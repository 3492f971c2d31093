//! Objectives of the variational energy-based distillation: the EBM
//! contrastive loss, the student's mutual-information surrogate, their
//! combination with an algorithm loss, and the factorized-Gaussian
//! variational baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vemkd_tensor::graph::softplus;
use vemkd_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::energy_model::EnergyFunction;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::layers::{Conv, Cost};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Real outputs for paired data, teacher outputs otherwise.
    Auto,
    TeacherOutput,
    RealOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variational {
    Ebm,
    VidGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VemConfig {
    /// When false no variational model is built and the base algorithm runs alone.
    pub enabled: bool,
    pub lambda_mi: f64,
    pub alpha_reg: f64,
    pub target_source: TargetSource,
    pub variational: Variational,
    /// Hidden width of the Gaussian head's mean network.
    pub vid_hidden: usize,
}

impl Default for VemConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda_mi: 0.1,
            alpha_reg: 1.0,
            target_source: TargetSource::Auto,
            variational: Variational::Ebm,
            vid_hidden: 16,
        }
    }
}

impl VemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mi >= 0.0 && self.lambda_mi.is_finite()) {
            return Err(Error::config("vem.lambda_mi", "must be non-negative and finite"));
        }
        if !(self.alpha_reg >= 0.0 && self.alpha_reg.is_finite()) {
            return Err(Error::config("vem.alpha_reg", "must be non-negative and finite"));
        }
        if self.vid_hidden < 1 {
            return Err(Error::config("vem.vid_hidden", "must be at least 1"));
        }
        Ok(())
    }

    /// Whether the variational model takes part in training at all.
    pub fn active(&self) -> bool {
        self.enabled && self.lambda_mi > 0.0
    }
}

/// Scalar pieces of the EBM objective, all inside one graph.
#[derive(Clone, Copy, Debug)]
pub struct EbmLossTerms {
    pub loss: Var,
    /// Mean positive-phase energy `E(t, s)`.
    pub pos: Var,
    /// Mean negative-phase energy `E(t̃, s)`.
    pub neg: Var,
    pub reg: Var,
}

/// Energies of `(t, s)` and `(t̃, s)` from a single batched evaluation.
fn paired_energies<T: Real, E: EnergyFunction<T> + ?Sized>(
    g: &Graph<T>,
    model: &E,
    t: Var,
    s: Var,
    t_neg: Var,
) -> (Var, Var) {
    let n = g.shape(t)[0];
    let e = model.energy_graph(g, g.concat_batch(t, t_neg), g.concat_batch(s, s));
    (g.slice_batch(e, 0, n), g.slice_batch(e, n, n))
}

fn check_shapes<T: Real>(g: &Graph<T>, vars: &[Var], what: &str) -> Result<()> {
    let first = g.shape(vars[0]);
    if vars.iter().any(|&v| g.shape(v) != first) {
        return Err(Error::Contract(format!("{what}: t, s and t̃ must share one shape")));
    }
    Ok(())
}

/// `mean E(t,s) − mean E(t̃,s) + α (mean E(t,s)² + mean E(t̃,s)²)`.
pub fn ebm_loss_graph<T: Real, E: EnergyFunction<T> + ?Sized>(
    g: &Graph<T>,
    model: &E,
    t: Var,
    s: Var,
    t_neg: Var,
    alpha: f64,
) -> Result<EbmLossTerms> {
    check_shapes(g, &[t, s, t_neg], "ebm_loss")?;
    let (e_pos, e_neg) = paired_energies(g, model, t, s, t_neg);
    let pos = g.mean(e_pos);
    let neg = g.mean(e_neg);
    let reg = g.add(g.mean(g.square(e_pos)), g.mean(g.square(e_neg)));
    let contrast = g.sub(pos, neg);
    let loss = if alpha == 0.0 {
        contrast
    } else {
        g.add(contrast, g.scale(reg, T::lit(alpha)))
    };
    Ok(EbmLossTerms { loss, pos, neg, reg })
}

/// Value and parameter gradients of the EBM objective.
#[derive(Clone, Debug)]
pub struct EbmLossValue<T> {
    pub loss: f64,
    pub pos_energy: f64,
    pub neg_energy: f64,
    pub regularizer: f64,
    pub grads: Vec<Option<Tensor<T>>>,
}

/// EBM objective on image batches; `t`, `s` and `t̃` enter as constants.
pub fn ebm_loss<T: Real, E: EnergyFunction<T> + ?Sized>(
    model: &E,
    t: &ImageBatch<T>,
    s: &ImageBatch<T>,
    t_neg: &ImageBatch<T>,
    alpha: f64,
) -> Result<EbmLossValue<T>> {
    let g = Graph::new();
    let terms = ebm_loss_graph(
        &g,
        model,
        g.constant(t.tensor().clone()),
        g.constant(s.tensor().clone()),
        g.constant(t_neg.tensor().clone()),
        alpha,
    )?;
    let grads = g.backward(terms.loss).for_store(model.store());
    Ok(EbmLossValue {
        loss: g.item(terms.loss).to_f64_lossy(),
        pos_energy: g.item(terms.pos).to_f64_lossy(),
        neg_energy: g.item(terms.neg).to_f64_lossy(),
        regularizer: g.item(terms.reg).to_f64_lossy(),
        grads,
    })
}

/// `mean E(t,s) − mean E(t̃,s)` with the energy model frozen. Gradients
/// reach the student only through `s`.
pub fn student_mi_surrogate<T: Real, E: EnergyFunction<T> + ?Sized>(
    g: &Graph<T>,
    model: &E,
    t: Var,
    s: Var,
    t_neg: Var,
) -> Result<Var> {
    check_shapes(g, &[t, s, t_neg], "student_mi_surrogate")?;
    g.freeze(model.store());
    let (e_pos, e_neg) = paired_energies(g, model, t, s, t_neg);
    Ok(g.sub(g.mean(e_pos), g.mean(e_neg)))
}

/// `L_algo + λ_MI · surrogate`; exactly `L_algo` when `λ_MI = 0`.
pub fn combined_student_loss<T: Real>(g: &Graph<T>, l_algo: Var, mi_surrogate: Option<Var>, lambda_mi: f64) -> Var {
    match mi_surrogate {
        Some(mi) if lambda_mi != 0.0 => g.add(l_algo, g.scale(mi, T::lit(lambda_mi))),
        _ => l_algo,
    }
}

/// The `ρ` whose softplus is exactly one in `T` arithmetic.
pub fn unit_softplus_preimage<T: Real>() -> T {
    let rho0 = T::lit((std::f64::consts::E - 1.0).ln());
    let step = rho0 * T::epsilon() / T::lit(4.0);
    for k in 0..256 {
        for sign in [1.0, -1.0] {
            let rho = rho0 + step * T::lit(sign * k as f64);
            if softplus(rho) == T::one() {
                return rho;
            }
        }
    }
    rho0
}

/// Fully factorized Gaussian `q(t | s) = Π N(t_i; μ_i(s), σ_c²)` with a
/// two-layer convolutional mean and a per-channel softplus scale.
#[derive(Clone, Debug)]
pub struct GaussianVariationalHead<T: Real> {
    store: ParamStore<T>,
    conv1: Conv,
    conv2: Conv,
    rho: ParamId,
    slope: f64,
}

impl<T: Real> GaussianVariationalHead<T> {
    /// Head with unit initial scale in every channel.
    pub fn build(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv1 = Conv::new(&mut store, "vid.conv1", channels, hidden, 3, 1, true, &mut rng);
        let conv2 = Conv::new(&mut store, "vid.conv2", hidden, channels, 3, 1, true, &mut rng);
        let rho = store.add("vid.rho", Tensor::full(&[channels], unit_softplus_preimage()));
        Self {
            store,
            conv1,
            conv2,
            rho,
            slope: 0.2,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mean(&self, g: &Graph<T>, s: Var) -> Var {
        let h = g.leaky_relu(self.conv1.forward(g, &self.store, s), T::lit(self.slope));
        self.conv2.forward(g, &self.store, h)
    }

    /// Per-channel standard deviations `[C]`.
    pub fn sigma(&self, g: &Graph<T>) -> Var {
        g.softplus(g.param(&self.store, self.rho))
    }

    pub fn cost(&self, size: usize) -> Cost {
        self.conv1.cost(size)
            + self.conv2.cost(size)
            + Cost {
                params: self.store.get(self.rho).numel(),
                macs: 0,
            }
    }
}

/// `mean over pixels of [ln σ_c + (t − μ)² / (2σ_c²)]` for a given mean and
/// per-channel `σ`.
pub fn gaussian_nll<T: Real>(g: &Graph<T>, t: Var, mu: Var, sigma: Var) -> Var {
    let r2 = g.square(g.sub(t, mu));
    let c = g.shape(sigma)[0];
    let half = g.constant(Tensor::full(&[c], T::lit(0.5)));
    let inv = g.div(half, g.square(sigma));
    let fit = g.mean(g.channel_affine(r2, Some(inv), None));
    g.add(fit, g.mean(g.ln(sigma)))
}

/// Negative log-likelihood of `t` under the head conditioned on `s`.
pub fn vid_nll<T: Real>(g: &Graph<T>, head: &GaussianVariationalHead<T>, t: Var, s: Var) -> Result<Var> {
    check_shapes(g, &[t, s], "vid_nll")?;
    let mu = head.mean(g, s);
    Ok(gaussian_nll(g, t, mu, head.sigma(g)))
}

/// Linear-Gaussian conditionals `t = a·s + b + N(0, σ²)` and a tractable
/// check that minimizing the EBM objective closes the KL gap.
pub mod gaussian1d {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    use vemkd_tensor::{Adam, AdamConfig};

    use super::*;

    #[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
    pub struct Conditional1d {
        pub a: f64,
        pub b: f64,
        pub sigma: f64,
    }

    impl Conditional1d {
        /// Draws `n` pairs with `s ~ N(0, 1)`. Returns `(t, s)`.
        pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
            let mut t = Vec::with_capacity(n);
            let mut s = Vec::with_capacity(n);
            for _ in 0..n {
                let sv: f64 = StandardNormal.sample(rng);
                let e: f64 = StandardNormal.sample(rng);
                s.push(sv);
                t.push(self.a * sv + self.b + self.sigma * e);
            }
            (t, s)
        }
    }

    /// Ordinary least squares fit of `t` on `s`, with the residual standard
    /// deviation as `σ`.
    pub fn regression_oracle(t: &[f64], s: &[f64]) -> Conditional1d {
        let n = t.len() as f64;
        let ms = s.iter().sum::<f64>() / n;
        let mt = t.iter().sum::<f64>() / n;
        let sxy: f64 = s.iter().zip(t).map(|(x, y)| (x - ms) * (y - mt)).sum();
        let sxx: f64 = s.iter().map(|x| (x - ms) * (x - ms)).sum();
        let a = sxy / sxx;
        let b = mt - a * ms;
        let rss: f64 = s.iter().zip(t).map(|(x, y)| (y - a * x - b).powi(2)).sum();
        Conditional1d {
            a,
            b,
            sigma: (rss / n).sqrt(),
        }
    }

    /// `E_{s ~ N(0,1)} KL(p(t|s) ‖ q(t|s))` between two linear-Gaussian
    /// conditionals, in nats.
    pub fn kl_gap(truth: &Conditional1d, fitted: &Conditional1d) -> f64 {
        let (da, db) = (truth.a - fitted.a, truth.b - fitted.b);
        (fitted.sigma / truth.sigma).ln() + (truth.sigma.powi(2) + da * da + db * db) / (2.0 * fitted.sigma.powi(2))
            - 0.5
    }

    /// `E(t, s) = (t − a·s − b)² / (2σ²)` on `[N, 1]` inputs.
    #[derive(Clone, Debug)]
    pub struct QuadraticEnergy1d {
        store: ParamStore<f64>,
        a: ParamId,
        b: ParamId,
        log_sigma: ParamId,
    }

    impl QuadraticEnergy1d {
        pub fn new(init: Conditional1d) -> Self {
            let mut store = ParamStore::new();
            let a = store.add("a", Tensor::scalar(init.a));
            let b = store.add("b", Tensor::scalar(init.b));
            let log_sigma = store.add("log_sigma", Tensor::scalar(init.sigma.ln()));
            Self { store, a, b, log_sigma }
        }

        pub fn params(&self) -> Conditional1d {
            Conditional1d {
                a: self.store.get(self.a).item(),
                b: self.store.get(self.b).item(),
                sigma: self.store.get(self.log_sigma).item().exp(),
            }
        }
    }

    impl EnergyFunction<f64> for QuadraticEnergy1d {
        fn store(&self) -> &ParamStore<f64> {
            &self.store
        }

        fn store_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.store
        }

        fn energy_graph(&self, g: &Graph<f64>, t: Var, s: Var) -> Var {
            let shape = g.shape(t);
            let a = g.param(&self.store, self.a);
            let b = g.param(&self.store, self.b);
            let ls = g.param(&self.store, self.log_sigma);
            let ones = g.constant(Tensor::ones(&shape));
            let r = g.sub(g.sub(t, g.mul_scalar_var(s, a)), g.mul_scalar_var(ones, b));
            let prec = g.exp(g.scale(ls, -2.0));
            let e = g.scale(g.mul_scalar_var(g.square(r), prec), 0.5);
            g.reshape(e, &[shape[0]])
        }
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct Fit1dConfig {
        pub iters: usize,
        pub lr: f64,
        pub seed: u64,
    }

    impl Default for Fit1dConfig {
        fn default() -> Self {
            Self {
                iters: 1500,
                lr: 0.05,
                seed: 0,
            }
        }
    }

    /// Fits the quadratic energy to `(t, s)` by minimizing the EBM objective
    /// (no regularizer) with exact Gaussian negative samples from the current
    /// model and a linearly decaying Adam step.
    pub fn kl_gap_estimate_1d(t: &[f64], s: &[f64], cfg: &Fit1dConfig) -> Result<Conditional1d> {
        if t.len() != s.len() || t.is_empty() {
            return Err(Error::Contract(
                "kl_gap_estimate_1d: t and s must be non-empty and equally long".into(),
            ));
        }
        let n = t.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = QuadraticEnergy1d::new(Conditional1d {
            a: 0.0,
            b: 0.0,
            sigma: 1.0,
        });
        let mut adam = Adam::new(AdamConfig {
            beta1: 0.9,
            ..AdamConfig::default()
        });
        let tt = Tensor::new(&[n, 1], t.to_vec());
        let st = Tensor::new(&[n, 1], s.to_vec());
        for i in 0..cfg.iters {
            let p = model.params();
            let neg = Tensor::from_fn(&[n, 1], |k| {
                let e: f64 = StandardNormal.sample(&mut rng);
                p.a * s[k] + p.b + p.sigma * e
            });
            let g = Graph::new();
            let terms = ebm_loss_graph(
                &g,
                &model,
                g.constant(tt.clone()),
                g.constant(st.clone()),
                g.constant(neg),
                0.0,
            )?;
            let grads = g.backward(terms.loss).for_store(model.store());
            let lr = cfg.lr * (1.0 - i as f64 / cfg.iters as f64);
            adam.step(model.store_mut(), &grads, lr);
        }
        let fitted = model.params();
        if !(fitted.a.is_finite() && fitted.b.is_finite() && fitted.sigma.is_finite()) {
            return Err(Error::Numerical("1-D Gaussian fit diverged".into()));
        }
        Ok(fitted)
    }
}
