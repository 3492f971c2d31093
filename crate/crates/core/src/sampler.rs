//! Short-run Langevin dynamics producing negative samples `t̃ ~ q(t | s)`.

use std::cell::Cell;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use vemkd_tensor::{Graph, Real, Tensor};

use crate::energy_model::EnergyFunction;
use crate::error::{Error, Result};
use crate::image::ImageBatch;

thread_local! {
    static CHAIN_INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`run_chain`] calls made on this thread so far.
pub fn chain_invocations() -> u64 {
    CHAIN_INVOCATIONS.with(|c| c.get())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    StudentOutput,
    TeacherData,
    PersistentBuffer,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Drift step size; the gradient is scaled by `step_size / 2`.
    pub step_size: f64,
    pub noise_std: f64,
    pub init: InitStrategy,
    /// Range samples are clamped to after every step. An empty array in a
    /// config file disables clamping.
    #[serde(serialize_with = "ser_clamp", deserialize_with = "de_clamp")]
    pub clamp: Option<(f64, f64)>,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
}

fn ser_clamp<S: Serializer>(v: &Option<(f64, f64)>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some((lo, hi)) => [*lo, *hi].serialize(s),
        None => Vec::<f64>::new().serialize(s),
    }
}

fn de_clamp<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<(f64, f64)>, D::Error> {
    let v = Vec::<f64>::deserialize(d)?;
    match v.as_slice() {
        [] => Ok(None),
        [lo, hi] => Ok(Some((*lo, *hi))),
        _ => Err(serde::de::Error::custom("sampler.clamp must be [] or [lo, hi]")),
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            step_size: 100.0,
            noise_std: 0.005,
            init: InitStrategy::StudentOutput,
            clamp: Some((-1.0, 1.0)),
            buffer_capacity: 256,
            reinit_prob: 0.05,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("sampler.steps", "must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("sampler.step_size", "must be positive and finite"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("sampler.noise_std", "must be non-negative and finite"));
        }
        if let Some((lo, hi)) = self.clamp {
            if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
                return Err(Error::config("sampler.clamp", "lower bound must be below upper bound"));
            }
        }
        if self.buffer_capacity < 1 {
            return Err(Error::config("sampler.buffer_capacity", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.reinit_prob) {
            return Err(Error::config("sampler.reinit_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One short-run chain: its start, end, and the mean energy at each of the
/// `K + 1` iterates.
#[derive(Clone, Debug)]
pub struct SampleChain<T> {
    pub init: ImageBatch<T>,
    pub final_samples: ImageBatch<T>,
    pub energies: Vec<f64>,
}

/// Fixed-capacity store of past chain end points.
#[derive(Clone, Debug, PartialEq)]
pub struct PersistentBuffer<T> {
    capacity: usize,
    item_shape: [usize; 3],
    entries: Vec<Tensor<T>>,
    reinit_prob: f64,
}

fn uniform_item<T: Real, R: Rng + ?Sized>(shape: &[usize; 3], rng: &mut R) -> Tensor<T> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

impl<T: Real> PersistentBuffer<T> {
    /// Buffer filled with uniform noise on `[-1, 1]`.
    pub fn uniform<R: Rng + ?Sized>(capacity: usize, item_shape: [usize; 3], reinit_prob: f64, rng: &mut R) -> Self {
        let entries = (0..capacity).map(|_| uniform_item(&item_shape, rng)).collect();
        Self {
            capacity,
            item_shape,
            entries,
            reinit_prob,
        }
    }

    /// Buffer with every entry set to `value`.
    pub fn filled(capacity: usize, item_shape: [usize; 3], value: T, reinit_prob: f64) -> Self {
        Self {
            capacity,
            item_shape,
            entries: vec![Tensor::full(&item_shape, value); capacity],
            reinit_prob,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Tensor<T>] {
        &self.entries
    }

    pub fn restore_entries(&mut self, entries: Vec<Tensor<T>>) -> Result<()> {
        if entries.len() > self.capacity || entries.iter().any(|e| e.shape() != self.item_shape) {
            return Err(Error::Contract("restored buffer entries do not fit the buffer".into()));
        }
        self.entries = entries;
        Ok(())
    }

    /// Overwrites the slots returned by [`buffer_fetch`] with chain end points.
    pub fn write_back(&mut self, slots: &[usize], samples: &ImageBatch<T>) -> Result<()> {
        if samples.batch() != slots.len() {
            return Err(Error::Contract("write_back: slot count does not match batch".into()));
        }
        for (i, &slot) in slots.iter().enumerate() {
            let item = samples.tensor().slice_outer(i, 1);
            self.entries[slot] = item.reshape(&self.item_shape);
        }
        Ok(())
    }
}

/// Draws `batch` distinct slots. Each returned entry is replaced by uniform
/// noise with probability `reinit_prob`. Returns the batch and its slots.
pub fn buffer_fetch<T: Real, R: Rng + ?Sized>(
    buf: &PersistentBuffer<T>,
    batch: usize,
    rng: &mut R,
) -> Result<(ImageBatch<T>, Vec<usize>)> {
    if batch > buf.len() {
        return Err(Error::Contract(format!(
            "cannot fetch {batch} entries from a buffer holding {}",
            buf.len()
        )));
    }
    let slots = index::sample(rng, buf.len(), batch).into_vec();
    let mut data = Vec::with_capacity(batch * buf.item_shape.iter().product::<usize>());
    for &slot in &slots {
        if rng.random::<f64>() < buf.reinit_prob {
            data.extend_from_slice(uniform_item::<T, R>(&buf.item_shape, rng).data());
        } else {
            data.extend_from_slice(buf.entries[slot].data());
        }
    }
    let [c, h, w] = buf.item_shape;
    Ok((ImageBatch::from_vec([batch, c, h, w], data)?, slots))
}

/// Where the chain starts, matching [`InitStrategy`].
pub enum InitSource<'a, T> {
    /// Start from the conditioning student output itself.
    Student,
    Teacher(&'a ImageBatch<T>),
    Buffer(&'a mut PersistentBuffer<T>),
    Uniform,
}

/// Mean energy of `t` and `∇_t Σ E(t, s)` with the model parameters frozen.
fn energy_and_grad<T: Real, E: EnergyFunction<T> + ?Sized>(
    model: &E,
    t: &Tensor<T>,
    s: &Tensor<T>,
    step: usize,
) -> Result<(f64, Tensor<T>)> {
    let g = Graph::new();
    g.freeze(model.store());
    let tv = g.variable(t.clone());
    let sv = g.constant(s.clone());
    let e = model.energy_graph(&g, tv, sv);
    let total = g.sum(e);
    let mean = g.value(e).mean().to_f64_lossy();
    let grads = g.backward(total);
    let grad = grads.wrt(tv).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
    if !grad.all_finite() {
        return Err(Error::SamplerDivergence { step });
    }
    Ok((mean, grad))
}

fn mean_energy<T: Real, E: EnergyFunction<T> + ?Sized>(model: &E, t: &Tensor<T>, s: &Tensor<T>) -> f64 {
    let g = Graph::new();
    g.freeze(model.store());
    let e = model.energy_graph(&g, g.constant(t.clone()), g.constant(s.clone()));
    let m = g.value(e).mean().to_f64_lossy();
    m
}

fn apply_step<T: Real, R: Rng + ?Sized>(
    t: &Tensor<T>,
    grad: &Tensor<T>,
    step_size: f64,
    noise_std: f64,
    clamp: Option<(f64, f64)>,
    rng: &mut R,
) -> Tensor<T> {
    let drift = T::lit(step_size / 2.0);
    let mut out = t.zip_map(grad, |x, d| x - drift * d);
    if noise_std > 0.0 {
        let noise: Tensor<T> = Tensor::randn(t.shape(), noise_std, rng);
        out.add_assign(&noise);
    }
    if let Some((lo, hi)) = clamp {
        out = out.clamp(T::lit(lo), T::lit(hi));
    }
    out
}

/// One update `t − (step_size/2)·∇_t E(t, s) + σ·ε`, optionally clamped.
/// Model parameters receive no gradient.
#[allow(clippy::too_many_arguments)]
pub fn langevin_step<T: Real, E: EnergyFunction<T> + ?Sized, R: Rng + ?Sized>(
    t: &ImageBatch<T>,
    s: &ImageBatch<T>,
    model: &E,
    step_size: f64,
    noise_std: f64,
    clamp: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<ImageBatch<T>> {
    t.same_shape(s, "langevin_step")?;
    if step_size.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::config("sampler.step_size", "must be positive"));
    }
    let (_, grad) = energy_and_grad(model, t.tensor(), s.tensor(), 0)?;
    ImageBatch::new(apply_step(t.tensor(), &grad, step_size, noise_std, clamp, rng))
}

/// Runs `cfg.steps` Langevin updates conditioned on `s`, starting from the
/// point chosen by `cfg.init`.
pub fn run_chain<T: Real, E: EnergyFunction<T> + ?Sized, R: Rng + ?Sized>(
    s: &ImageBatch<T>,
    model: &E,
    cfg: &SamplerConfig,
    init: InitSource<'_, T>,
    rng: &mut R,
) -> Result<SampleChain<T>> {
    cfg.validate()?;
    CHAIN_INVOCATIONS.with(|c| c.set(c.get() + 1));
    let missing = |what: &str| Error::config("sampler.init", format!("strategy {:?} requires {what}", cfg.init));
    let mut buffer = None;
    let start = match (cfg.init, init) {
        (InitStrategy::StudentOutput, _) => s.clone(),
        (InitStrategy::TeacherData, InitSource::Teacher(t)) => t.clone(),
        (InitStrategy::TeacherData, _) => return Err(missing("teacher outputs")),
        (InitStrategy::PersistentBuffer, InitSource::Buffer(buf)) => {
            let (batch, slots) = buffer_fetch(buf, s.batch(), rng)?;
            buffer = Some((buf, slots));
            batch
        }
        (InitStrategy::PersistentBuffer, _) => return Err(missing("a persistent buffer")),
        (InitStrategy::Uniform, _) => ImageBatch::new(Tensor::rand_uniform(&s.shape(), -1.0, 1.0, rng))?,
    };
    start.same_shape(s, "chain initialization")?;
    let mut t = start.tensor().clone();
    let mut energies = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (mean, grad) = energy_and_grad(model, &t, s.tensor(), step)?;
        energies.push(mean);
        t = apply_step(&t, &grad, cfg.step_size, cfg.noise_std, cfg.clamp, rng);
        if !t.all_finite() {
            return Err(Error::SamplerDivergence { step });
        }
    }
    energies.push(mean_energy(model, &t, s.tensor()));
    let final_samples = ImageBatch::new(t)?;
    if let Some((buf, slots)) = buffer {
        buf.write_back(&slots, &final_samples)?;
    }
    Ok(SampleChain {
        init: start,
        final_samples,
        energies,
    })
}
