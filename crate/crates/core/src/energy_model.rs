//! The energy function `E(t, s)`: a spectral-normalized residual CNN over
//! the channel-concatenated pair of images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vemkd_tensor::init::{kaiming_uniform, unit_vector};
use vemkd_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::layers::{Conv, Cost};

/// Lower clamp on the estimated spectral norm.
pub const SN_EPS: f64 = 1e-12;

/// Power iterations run once at construction so the first estimates are
/// already close to the true spectral norms.
pub const SN_WARMUP_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyModelConfig {
    pub base_channels: usize,
    pub num_res_blocks: usize,
    pub leaky_slope: f64,
    pub sn_power_iters: usize,
    /// Channels of each of the two image inputs.
    pub input_channels: usize,
}

impl Default for EnergyModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_res_blocks: 7,
            leaky_slope: 0.2,
            sn_power_iters: 1,
            input_channels: 3,
        }
    }
}

impl EnergyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(Error::config("ebm.base_channels", "must be at least 1"));
        }
        if self.num_res_blocks < 1 {
            return Err(Error::config("ebm.num_res_blocks", "must be at least 1"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("ebm.leaky_slope", "must lie in (0, 1)"));
        }
        if self.sn_power_iters < 1 {
            return Err(Error::config("ebm.sn_power_iters", "must be at least 1"));
        }
        if self.input_channels < 1 {
            return Err(Error::config("ebm.input_channels", "must be at least 1"));
        }
        Ok(())
    }

    /// Width of residual block `i`.
    pub fn block_width(&self, i: usize) -> usize {
        if i == 0 {
            2 * self.base_channels
        } else {
            4 * self.base_channels
        }
    }
}

/// Anything that maps a pair `(t, s)` to per-sample energies inside a graph.
///
/// The convolutional [`EnergyModel`] is the production implementation;
/// closed-form energies implement it for analytic checks.
pub trait EnergyFunction<T: Real> {
    fn store(&self) -> &ParamStore<T>;

    fn store_mut(&mut self) -> &mut ParamStore<T>;

    /// Energies `[N]` for batched inputs `t` and `s` of identical shape.
    fn energy_graph(&self, g: &Graph<T>, t: Var, s: Var) -> Var;

    /// Invoked once before every training-mode evaluation.
    fn begin_training_pass(&mut self) {}
}

/// Left/right singular vector estimates of one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIteration<T> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
}

fn normalize<T: Real>(x: &mut [T]) {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(SN_EPS));
    for v in x {
        *v /= n;
    }
}

/// Runs `iters` power iterations on the row-major `rows × cols` matrix `w`.
fn power_iterate<T: Real>(w: &[T], rows: usize, cols: usize, u: &mut [T], v: &mut [T], iters: usize) {
    for _ in 0..iters {
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..rows).map(|i| w[i * cols + j] * u[i]).sum();
        }
        normalize(v);
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = w[i * cols..(i + 1) * cols]
                .iter()
                .zip(v.iter())
                .map(|(&a, &b)| a * b)
                .sum();
        }
        normalize(u);
    }
}

fn sigma_estimate<T: Real>(w: &[T], rows: usize, cols: usize, u: &[T], v: &[T]) -> T {
    (0..rows)
        .map(|i| {
            u[i] * w[i * cols..(i + 1) * cols]
                .iter()
                .zip(v)
                .map(|(&a, &b)| a * b)
                .sum::<T>()
        })
        .sum()
}

/// Divides a 2-D weight by its power-iteration spectral-norm estimate,
/// refreshing `state` with `iters` iterations first.
pub fn spectral_normalize<T: Real>(
    weight: &Tensor<T>,
    state: &mut PowerIteration<T>,
    iters: usize,
) -> Result<Tensor<T>> {
    if weight.rank() != 2 {
        return Err(Error::Contract(format!(
            "spectral_normalize expects a 2-D weight, got {:?}",
            weight.shape()
        )));
    }
    if iters < 1 {
        return Err(Error::config("sn_power_iters", "must be at least 1"));
    }
    let (rows, cols) = (weight.dim(0), weight.dim(1));
    if state.u.numel() != rows || state.v.numel() != cols {
        return Err(Error::Contract(
            "power-iteration vectors do not match the weight".into(),
        ));
    }
    power_iterate(weight.data(), rows, cols, state.u.data_mut(), state.v.data_mut(), iters);
    let sigma = sigma_estimate(weight.data(), rows, cols, state.u.data(), state.v.data()).max(T::lit(SN_EPS));
    Ok(weight.map(|x| x / sigma))
}

/// Mean of squared energies.
pub fn energy_regularizer<T: Real>(g: &Graph<T>, energies: Var) -> Var {
    g.mean(g.square(energies))
}

/// Power-iteration buffers attached to one weight in a store.
#[derive(Clone, Debug)]
struct SpectralNorm {
    weight: ParamId,
    u: ParamId,
    v: ParamId,
}

impl SpectralNorm {
    fn attach<T: Real>(store: &mut ParamStore<T>, name: &str, weight: ParamId, rng: &mut ChaCha8Rng) -> Self {
        let shape = store.get(weight).shape().to_vec();
        let rows = shape[0];
        let cols = shape[1..].iter().product();
        let u = store.add_buffer(format!("{name}.sn_u"), unit_vector(rows, rng));
        let v = store.add_buffer(format!("{name}.sn_v"), unit_vector(cols, rng));
        Self { weight, u, v }
    }

    fn refresh<T: Real>(&self, store: &mut ParamStore<T>, iters: usize) {
        let w = store.get(self.weight).clone();
        let rows = w.dim(0);
        let cols = w.numel() / rows;
        let mut u = store.get(self.u).clone();
        let mut v = store.get(self.v).clone();
        power_iterate(w.data(), rows, cols, u.data_mut(), v.data_mut(), iters);
        *store.get_mut(self.u) = u;
        *store.get_mut(self.v) = v;
    }

    /// `W / σ̂` inside the graph, with `u` and `v` held constant.
    fn weight<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>) -> Var {
        let w = g.param(store, self.weight);
        let (u, v) = (store.get(self.u), store.get(self.v));
        let cols = v.numel();
        let outer = Tensor::from_fn(store.get(self.weight).shape(), |i| {
            u.data()[i / cols] * v.data()[i % cols]
        });
        let sigma = g.sum(g.mul(w, g.constant(outer)));
        g.div_scalar_var(w, g.clamp_min(sigma, T::lit(SN_EPS)))
    }
}

#[derive(Clone, Debug)]
struct SnConv {
    conv: Conv,
    sn: SpectralNorm,
}

impl SnConv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv::new(store, name, cin, cout, k, 1, true, rng);
        let sn = SpectralNorm::attach(store, name, conv.weight, rng);
        Self { conv, sn }
    }

    fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = self.sn.weight(g, store);
        self.conv.forward_with_weight(g, store, x, w)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: SnConv,
    conv2: SnConv,
    skip: Option<SnConv>,
}

/// Spectral-normalized convolutional energy network.
#[derive(Clone, Debug)]
pub struct EnergyModel<T: Real> {
    config: EnergyModelConfig,
    store: ParamStore<T>,
    stem: SnConv,
    blocks: Vec<ResBlock>,
    head_bias: ParamId,
    head: SpectralNorm,
}

impl<T: Real> EnergyModel<T> {
    pub fn build(config: &EnergyModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let stem = SnConv::new(&mut store, "stem", 2 * config.input_channels, c, 3, &mut rng);
        let mut blocks = Vec::with_capacity(config.num_res_blocks);
        let mut width = c;
        for i in 0..config.num_res_blocks {
            let out = config.block_width(i);
            let name = format!("block{i}");
            let conv1 = SnConv::new(&mut store, &format!("{name}.conv1"), width, out, 3, &mut rng);
            let conv2 = SnConv::new(&mut store, &format!("{name}.conv2"), out, out, 3, &mut rng);
            let skip =
                (out != width).then(|| SnConv::new(&mut store, &format!("{name}.skip"), width, out, 1, &mut rng));
            blocks.push(ResBlock { conv1, conv2, skip });
            width = out;
        }
        let head_w = store.add(
            "head.weight",
            kaiming_uniform(&[1, width], (1.0f64 / 3.0).sqrt(), &mut rng),
        );
        let bound = 1.0 / (width as f64).sqrt();
        let head_bias = store.add("head.bias", Tensor::rand_uniform(&[1], -bound, bound, &mut rng));
        let head = SpectralNorm::attach(&mut store, "head", head_w, &mut rng);
        let mut model = Self {
            config: config.clone(),
            store,
            stem,
            blocks,
            head_bias,
            head,
        };
        model.refresh_power_iterations(SN_WARMUP_ITERS);
        Ok(model)
    }

    pub fn config(&self) -> &EnergyModelConfig {
        &self.config
    }

    fn spectral_layers(&self) -> Vec<&SpectralNorm> {
        let mut out = vec![&self.stem.sn];
        for b in &self.blocks {
            out.push(&b.conv1.sn);
            out.push(&b.conv2.sn);
            if let Some(s) = &b.skip {
                out.push(&s.sn);
            }
        }
        out.push(&self.head);
        out
    }

    fn refresh_power_iterations(&mut self, iters: usize) {
        let layers: Vec<SpectralNorm> = self.spectral_layers().into_iter().cloned().collect();
        for sn in layers {
            sn.refresh(&mut self.store, iters);
        }
    }

    /// Per-pair energies. In training mode every normalized layer first
    /// advances its power iteration.
    pub fn energy(&mut self, t: &ImageBatch<T>, s: &ImageBatch<T>, training: bool) -> Result<Vec<T>> {
        t.same_shape(s, "energy inputs")?;
        self.check_channels(t)?;
        if training {
            self.begin_training_pass();
        }
        let g = Graph::new();
        g.freeze(&self.store);
        let tv = g.constant(t.tensor().clone());
        let sv = g.constant(s.tensor().clone());
        let e = self.energy_graph(&g, tv, sv);
        let out = g.value(e).data().to_vec();
        Ok(out)
    }

    pub fn check_channels(&self, t: &ImageBatch<T>) -> Result<()> {
        if t.channels() != self.config.input_channels {
            return Err(Error::Contract(format!(
                "energy model expects {} channels per input, got {}",
                self.config.input_channels,
                t.channels()
            )));
        }
        Ok(())
    }

    /// Parameter count and multiply-accumulates for one pair of `size × size` inputs.
    pub fn cost(&self, size: usize) -> Cost {
        let mut hw = (size + 2 - 3) / 2 + 1;
        let mut total = self.stem.conv.cost(hw);
        for b in &self.blocks {
            total = total + b.conv1.conv.cost(hw) + b.conv2.conv.cost(hw);
            if let Some(s) = &b.skip {
                total = total + s.conv.cost(hw);
                hw = hw.div_ceil(2);
            }
        }
        let width = self.store.get(self.head.weight).numel();
        total
            + Cost {
                params: width + 1,
                macs: width,
            }
    }
}

impl<T: Real> EnergyFunction<T> for EnergyModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn energy_graph(&self, g: &Graph<T>, t: Var, s: Var) -> Var {
        let slope = T::lit(self.config.leaky_slope);
        let store = &self.store;
        let x = g.concat_channels(t, s);
        let x = g.avg_pool(x, 3, 2, 1);
        let mut x = g.leaky_relu(self.stem.forward(g, store, x), slope);
        for b in &self.blocks {
            let h = g.leaky_relu(b.conv1.forward(g, store, x), slope);
            let h = b.conv2.forward(g, store, h);
            x = match &b.skip {
                Some(skip) => {
                    let sum = g.add(skip.forward(g, store, x), h);
                    let size = g.shape(sum)[2];
                    if size >= 2 {
                        g.avg_pool(sum, 2, 2, 0)
                    } else {
                        sum
                    }
                }
                None => g.add(x, h),
            };
        }
        let x = g.relu(x);
        let pooled = g.mean_spatial(x);
        let w = self.head.weight(g, store);
        let b = g.param(store, self.head_bias);
        let e = g.linear(pooled, w, Some(b));
        let n = g.shape(e)[0];
        g.reshape(e, &[n])
    }

    fn begin_training_pass(&mut self) {
        self.refresh_power_iterations(self.config.sn_power_iters);
    }
}

/// `E(t, s) = ½‖t‖²` per sample, independent of `s`. Closed-form
/// reference energy for sampler checks.
#[derive(Clone, Debug, Default)]
pub struct HalfSquaredNorm<T: Real> {
    store: ParamStore<T>,
}

impl<T: Real> HalfSquaredNorm<T> {
    pub fn new() -> Self {
        Self {
            store: ParamStore::new(),
        }
    }
}

impl<T: Real> EnergyFunction<T> for HalfSquaredNorm<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn energy_graph(&self, g: &Graph<T>, t: Var, _s: Var) -> Var {
        g.scale(g.sum_per_sample(g.square(t)), T::lit(0.5))
    }
}
