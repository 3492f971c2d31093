//! Toy generators and a patch discriminator, with named feature taps and
//! analytic parameter/MAC counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vemkd_tensor::{Graph, ParamStore, Real, Var};

use crate::error::{Error, Result};
use crate::image::{ImageBatch, SUPPORTED_SIZES};
use crate::layers::{Conv, Cost, InstanceNorm};

const LEAKY: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "unet_toy")]
    UNetToy,
    #[serde(rename = "resnet_toy")]
    ResNetToy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub family: Family,
    pub base_width: usize,
    pub width_multiplier: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub image_size: usize,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::config("model.width", "must be positive"));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::config("model.student_multiplier", "must lie in (0, 1]"));
        }
        for (name, c) in [
            ("model.in_channels", self.in_channels),
            ("model.out_channels", self.out_channels),
        ] {
            if c != 1 && c != 3 {
                return Err(Error::config(name, "must be 1 or 3"));
            }
        }
        if !SUPPORTED_SIZES.contains(&self.image_size) {
            return Err(Error::config(
                "model.image_size",
                format!("must be one of {SUPPORTED_SIZES:?}"),
            ));
        }
        Ok(())
    }

    /// Effective stem width after the multiplier, at least 1.
    pub fn width(&self) -> usize {
        ((self.base_width as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

/// Model keys of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub width: usize,
    pub student_multiplier: f64,
    pub image_size: usize,
    pub channels: usize,
    pub disc_depth: usize,
    pub disc_width: usize,
    pub disc_taps: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::UNetToy,
            width: 32,
            student_multiplier: 0.25,
            image_size: 32,
            channels: 3,
            disc_depth: 3,
            disc_width: 32,
            disc_taps: vec![0, 1, 2],
        }
    }
}

impl ModelConfig {
    pub fn teacher_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            family: self.family,
            base_width: self.width,
            width_multiplier: 1.0,
            in_channels: self.channels,
            out_channels: self.channels,
            image_size: self.image_size,
        }
    }

    pub fn student_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            width_multiplier: self.student_multiplier,
            ..self.teacher_spec()
        }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            depth: self.disc_depth,
            base_width: self.disc_width,
            in_channels: 2 * self.channels,
            taps: self.disc_taps.clone(),
            image_size: self.image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher_spec().validate()?;
        self.student_spec().validate()?;
        self.discriminator_spec().validate()
    }
}

/// Conv → optional instance norm → activation.
#[derive(Clone, Debug)]
struct Block {
    conv: Conv,
    norm: Option<InstanceNorm>,
    act: Act,
    upsample: bool,
}

#[derive(Clone, Copy, Debug)]
enum Act {
    Leaky,
    Relu,
    Tanh,
    None,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        norm: bool,
        act: Act,
        upsample: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, 3, stride, !norm, rng);
        let norm = norm.then(|| InstanceNorm::new(store, &format!("{name}.norm"), cout));
        Self {
            conv,
            norm,
            act,
            upsample,
        }
    }

    fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let x = if self.upsample { g.upsample2x(x) } else { x };
        let mut h = self.conv.forward(g, store, x);
        if let Some(n) = &self.norm {
            h = n.forward(g, store, h);
        }
        match self.act {
            Act::Leaky => g.leaky_relu(h, T::lit(LEAKY)),
            Act::Relu => g.relu(h),
            Act::Tanh => g.tanh(h),
            Act::None => h,
        }
    }

    /// Cost at input size `size`; returns it with the output size.
    fn cost(&self, size: usize) -> (Cost, usize) {
        let s = if self.upsample { size * 2 } else { size };
        let c = self.conv.cost(s) + self.norm.as_ref().map(InstanceNorm::cost).unwrap_or_default();
        (c, self.conv.out_size(s))
    }
}

#[derive(Clone, Debug)]
enum Body {
    UNet {
        stem: Block,
        down: [Block; 3],
        up: [Block; 3],
        head: Block,
    },
    ResNet {
        stem: Block,
        down: [Block; 2],
        res: Vec<(Block, Block)>,
        up: [Block; 2],
        head: Block,
    },
}

/// Output and named intermediate activations of one forward pass.
pub struct GeneratorOutput {
    pub output: Var,
    pub taps: Vec<(&'static str, Var)>,
}

impl GeneratorOutput {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    /// The requested taps in the given order.
    pub fn select(&self, names: &[String]) -> Result<Vec<Var>> {
        names
            .iter()
            .map(|n| {
                self.tap(n)
                    .ok_or_else(|| Error::config("distill.taps", format!("unknown tap {n}")))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    spec: GeneratorSpec,
    store: ParamStore<T>,
    body: Body,
}

pub const UNET_TAPS: [&str; 7] = ["stem", "down1", "down2", "down3", "up1", "up2", "up3"];
pub const RESNET_TAPS: [&str; 9] = ["stem", "down1", "down2", "res1", "res2", "res3", "res4", "up1", "up2"];

impl<T: Real> Generator<T> {
    pub fn build(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let w = spec.width();
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let body = match spec.family {
            Family::UNetToy => {
                let stem = Block::new(&mut st, "stem", cin, w, 1, true, Act::Leaky, false, &mut rng);
                let down = [
                    Block::new(&mut st, "down1", w, 2 * w, 2, true, Act::Leaky, false, &mut rng),
                    Block::new(&mut st, "down2", 2 * w, 4 * w, 2, true, Act::Leaky, false, &mut rng),
                    Block::new(&mut st, "down3", 4 * w, 4 * w, 2, true, Act::Leaky, false, &mut rng),
                ];
                let up = [
                    Block::new(&mut st, "up1", 4 * w, 4 * w, 1, true, Act::Relu, true, &mut rng),
                    Block::new(&mut st, "up2", 8 * w, 2 * w, 1, true, Act::Relu, true, &mut rng),
                    Block::new(&mut st, "up3", 4 * w, w, 1, true, Act::Relu, true, &mut rng),
                ];
                let head = Block::new(&mut st, "head", 2 * w, cout, 1, false, Act::Tanh, false, &mut rng);
                Body::UNet { stem, down, up, head }
            }
            Family::ResNetToy => {
                let stem = Block::new(&mut st, "stem", cin, w, 1, true, Act::Relu, false, &mut rng);
                let down = [
                    Block::new(&mut st, "down1", w, 2 * w, 2, true, Act::Relu, false, &mut rng),
                    Block::new(&mut st, "down2", 2 * w, 4 * w, 2, true, Act::Relu, false, &mut rng),
                ];
                let res = (1..=4)
                    .map(|i| {
                        (
                            Block::new(
                                &mut st,
                                &format!("res{i}.a"),
                                4 * w,
                                4 * w,
                                1,
                                true,
                                Act::Relu,
                                false,
                                &mut rng,
                            ),
                            Block::new(
                                &mut st,
                                &format!("res{i}.b"),
                                4 * w,
                                4 * w,
                                1,
                                true,
                                Act::None,
                                false,
                                &mut rng,
                            ),
                        )
                    })
                    .collect();
                let up = [
                    Block::new(&mut st, "up1", 4 * w, 2 * w, 1, true, Act::Relu, true, &mut rng),
                    Block::new(&mut st, "up2", 2 * w, w, 1, true, Act::Relu, true, &mut rng),
                ];
                let head = Block::new(&mut st, "head", w, cout, 1, false, Act::Tanh, false, &mut rng);
                Body::ResNet {
                    stem,
                    down,
                    res,
                    up,
                    head,
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            store: st,
            body,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn tap_names(&self) -> &'static [&'static str] {
        match self.body {
            Body::UNet { .. } => &UNET_TAPS,
            Body::ResNet { .. } => &RESNET_TAPS,
        }
    }

    /// Channel width of each named tap.
    pub fn tap_channels(&self, names: &[String]) -> Result<Vec<usize>> {
        let w = self.spec.width();
        names
            .iter()
            .map(|n| {
                let c = match (n.as_str(), &self.body) {
                    ("stem", _) => w,
                    ("down1", _) => 2 * w,
                    ("down2", _) | ("down3", Body::UNet { .. }) => 4 * w,
                    ("up1", Body::UNet { .. }) => 4 * w,
                    ("up2", Body::UNet { .. }) | ("up1", Body::ResNet { .. }) => 2 * w,
                    ("up3", Body::UNet { .. }) | ("up2", Body::ResNet { .. }) => w,
                    (r, Body::ResNet { .. }) if RESNET_TAPS[3..7].contains(&r) => 4 * w,
                    _ => return Err(Error::config("distill.taps", format!("unknown tap {n}"))),
                };
                Ok(c)
            })
            .collect()
    }

    pub fn forward(&self, g: &Graph<T>, x: Var) -> Result<GeneratorOutput> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.spec.in_channels || s[2] != self.spec.image_size || s[3] != self.spec.image_size
        {
            return Err(Error::Contract(format!(
                "generator expects [N, {}, {size}, {size}], got {s:?}",
                self.spec.in_channels,
                size = self.spec.image_size
            )));
        }
        let st = &self.store;
        let mut taps = Vec::new();
        let output = match &self.body {
            Body::UNet { stem, down, up, head } => {
                let h0 = stem.forward(g, st, x);
                let h1 = down[0].forward(g, st, h0);
                let h2 = down[1].forward(g, st, h1);
                let h3 = down[2].forward(g, st, h2);
                let u1 = up[0].forward(g, st, h3);
                let u2 = up[1].forward(g, st, g.concat_channels(u1, h2));
                let u3 = up[2].forward(g, st, g.concat_channels(u2, h1));
                let out = head.forward(g, st, g.concat_channels(u3, h0));
                taps.extend(UNET_TAPS.iter().copied().zip([h0, h1, h2, h3, u1, u2, u3]));
                out
            }
            Body::ResNet {
                stem,
                down,
                res,
                up,
                head,
            } => {
                let h0 = stem.forward(g, st, x);
                let h1 = down[0].forward(g, st, h0);
                let mut h = down[1].forward(g, st, h1);
                taps.extend([("stem", h0), ("down1", h1), ("down2", h)]);
                for (i, (a, b)) in res.iter().enumerate() {
                    let r = b.forward(g, st, a.forward(g, st, h));
                    h = g.add(h, r);
                    taps.push((RESNET_TAPS[3 + i], h));
                }
                let u1 = up[0].forward(g, st, h);
                let u2 = up[1].forward(g, st, u1);
                taps.extend([("up1", u1), ("up2", u2)]);
                head.forward(g, st, u2)
            }
        };
        Ok(GeneratorOutput { output, taps })
    }

    /// Named tap activations for `x`, in the requested order.
    pub fn features(&self, g: &Graph<T>, x: Var, names: &[String]) -> Result<Vec<Var>> {
        self.forward(g, x)?.select(names)
    }

    /// Gradient-free forward pass.
    pub fn generate(&self, x: &ImageBatch<T>) -> Result<ImageBatch<T>> {
        let g = Graph::new();
        g.freeze(&self.store);
        let xv = g.constant(x.tensor().clone());
        let out = self.forward(&g, xv)?.output;
        let t = g.value(out).clone();
        ImageBatch::new(t)
    }

    pub fn cost(&self) -> Cost {
        let s = self.spec.image_size;
        match &self.body {
            Body::UNet { stem, down, up, head } => {
                let mut total = Cost::default();
                let mut size = s;
                for b in std::iter::once(stem).chain(down).chain(up).chain(std::iter::once(head)) {
                    let (c, out) = b.cost(size);
                    total = total + c;
                    size = out;
                }
                total
            }
            Body::ResNet {
                stem,
                down,
                res,
                up,
                head,
            } => {
                let mut total = Cost::default();
                let mut size = s;
                let blocks = std::iter::once(stem)
                    .chain(down)
                    .chain(res.iter().flat_map(|(a, b)| [a, b]))
                    .chain(up)
                    .chain(std::iter::once(head));
                for b in blocks {
                    let (c, out) = b.cost(size);
                    total = total + c;
                    size = out;
                }
                total
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub depth: usize,
    pub base_width: usize,
    /// Conditioning plus image channels.
    pub in_channels: usize,
    /// Indices of stride-2 stages whose outputs are exposed.
    pub taps: Vec<usize>,
    pub image_size: usize,
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 {
            return Err(Error::config("model.disc_depth", "depth and width must be positive"));
        }
        if self.image_size >> self.depth == 0 {
            return Err(Error::config("model.disc_depth", "too deep for the image size"));
        }
        if let Some(t) = self.taps.iter().find(|&&t| t >= self.depth) {
            return Err(Error::config(
                "model.disc_taps",
                format!("tap {t} exceeds depth {}", self.depth),
            ));
        }
        Ok(())
    }
}

/// Conditional patch discriminator over `concat(x, y)`.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Real> {
    spec: DiscriminatorSpec,
    store: ParamStore<T>,
    stages: Vec<Block>,
    head: Conv,
}

pub struct DiscriminatorOutput {
    /// Patch logits `[N, 1, h, w]`.
    pub logits: Var,
    pub taps: Vec<Var>,
}

impl<T: Real> Discriminator<T> {
    pub fn build(spec: &DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = spec.in_channels;
        let stages = (0..spec.depth)
            .map(|i| {
                let cout = spec.base_width << i.min(3);
                let b = Block::new(
                    &mut store,
                    &format!("stage{i}"),
                    cin,
                    cout,
                    2,
                    i > 0,
                    Act::Leaky,
                    false,
                    &mut rng,
                );
                cin = cout;
                b
            })
            .collect();
        let head = Conv::new(&mut store, "head", cin, 1, 3, 1, true, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            store,
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn forward(&self, g: &Graph<T>, x: Var, y: Var) -> Result<DiscriminatorOutput> {
        let (sx, sy) = (g.shape(x), g.shape(y));
        if sx.len() != 4 || sx[0] != sy[0] || sx[2..] != sy[2..] || sx[1] + sy[1] != self.spec.in_channels {
            return Err(Error::Contract(format!(
                "discriminator inputs {sx:?} and {sy:?} do not fit"
            )));
        }
        let mut h = g.concat_channels(x, y);
        let mut taps = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            h = s.forward(g, &self.store, h);
            if self.spec.taps.contains(&i) {
                taps.push(h);
            }
        }
        Ok(DiscriminatorOutput {
            logits: self.head.forward(g, &self.store, h),
            taps,
        })
    }

    pub fn cost(&self) -> Cost {
        let mut size = self.spec.image_size;
        let mut total = Cost::default();
        for s in &self.stages {
            let (c, out) = s.cost(size);
            total = total + c;
            size = out;
        }
        total + self.head.cost(size)
    }
}

/// Trainable parameter count from the layer walk.
pub fn count_params<T: Real>(g: &Generator<T>) -> usize {
    g.cost().params
}

/// Convolution multiply-accumulates for one image at the configured size.
pub fn count_macs<T: Real>(g: &Generator<T>, image_size: usize) -> Result<usize> {
    if image_size != g.spec.image_size {
        let mut spec = g.spec.clone();
        spec.image_size = image_size;
        spec.validate()?;
        return Ok(Generator::<T>::build(&spec, 0)?.cost().macs);
    }
    Ok(g.cost().macs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vemkd_tensor::Tensor;

    fn spec(family: Family, mult: f64) -> GeneratorSpec {
        GeneratorSpec {
            family,
            base_width: 16,
            width_multiplier: mult,
            in_channels: 3,
            out_channels: 3,
            image_size: 32,
        }
    }

    #[test]
    fn single_conv_cost() {
        let mut st = ParamStore::<f32>::new();
        let conv = Conv::new(&mut st, "c", 1, 1, 3, 1, true, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(conv.cost(32), Cost { params: 10, macs: 9216 });
    }

    #[test]
    fn cost_walk_matches_store_and_shrinks() {
        for fam in [Family::UNetToy, Family::ResNetToy] {
            let mut last = usize::MAX;
            for m in [1.0, 0.5, 0.25] {
                let gen = Generator::<f32>::build(&spec(fam, m), 1).unwrap();
                assert_eq!(count_params(&gen), gen.store().num_trainable());
                assert!(count_params(&gen) < last);
                last = count_params(&gen);
            }
            let full = count_params(&Generator::<f32>::build(&spec(fam, 1.0), 1).unwrap()) as f64;
            let quarter = count_params(&Generator::<f32>::build(&spec(fam, 0.25), 1).unwrap()) as f64;
            let ratio = full / quarter;
            assert!(ratio > 10.0 && ratio < 17.0, "{fam:?} ratio {ratio}");
        }
        let d = Discriminator::<f32>::build(&ModelConfig::default().discriminator_spec(), 0).unwrap();
        assert_eq!(d.cost().params, d.store().num_trainable());
    }

    #[test]
    fn forward_shapes_range_and_taps() {
        for fam in [Family::UNetToy, Family::ResNetToy] {
            let gen = Generator::<f32>::build(&spec(fam, 0.5), 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x = Tensor::rand_uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng).scale(5.0);
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let out = gen.forward(&g, xv).unwrap();
            assert_eq!(g.shape(out.output), vec![2, 3, 32, 32]);
            assert!(g.value(out.output).data().iter().all(|v| v.abs() <= 1.0));
            assert_eq!(out.taps.len(), gen.tap_names().len());
            let names: Vec<String> = gen.tap_names().iter().map(|s| s.to_string()).collect();
            let widths = gen.tap_channels(&names).unwrap();
            for ((_, v), c) in out.taps.iter().zip(&widths) {
                assert_eq!(g.shape(*v)[1], *c);
            }
            let again = gen.features(&g, xv, &names).unwrap();
            for ((_, a), b) in out.taps.iter().zip(again) {
                assert_eq!(g.value(*a).data(), g.value(b).data());
            }
            let direct = gen.generate(&ImageBatch::new(x).unwrap()).unwrap();
            assert_eq!(direct.data(), g.value(out.output).data());
        }
    }

    #[test]
    fn deterministic_builds() {
        let a = Generator::<f32>::build(&spec(Family::UNetToy, 0.25), 9).unwrap();
        let b = Generator::<f32>::build(&spec(Family::UNetToy, 0.25), 9).unwrap();
        let c = Generator::<f32>::build(&spec(Family::UNetToy, 0.25), 10).unwrap();
        assert!(a.store().bitwise_eq(b.store()));
        assert!(!a.store().bitwise_eq(c.store()));
    }

    #[test]
    fn discriminator_patch_map_and_taps() {
        let cfg = ModelConfig::default();
        let d = Discriminator::<f32>::build(&cfg.discriminator_spec(), 4).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let out = d.forward(&g, x, x).unwrap();
        assert_eq!(g.shape(out.logits), vec![2, 1, 4, 4]);
        assert_eq!(out.taps.len(), 3);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(Generator::<f32>::build(&spec(Family::UNetToy, 0.0), 0).is_err());
        assert!(Generator::<f32>::build(&spec(Family::UNetToy, 1.5), 0).is_err());
        let mut s = spec(Family::ResNetToy, 1.0);
        s.image_size = 48;
        assert!(matches!(Generator::<f32>::build(&s, 0), Err(Error::Config { .. })));
        let cfg = ModelConfig {
            disc_taps: vec![5],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
