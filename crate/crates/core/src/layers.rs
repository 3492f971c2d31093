//! Parameterized building blocks shared by the generators, discriminators,
//! the energy model and the embedder.

use rand::Rng;
use vemkd_tensor::init::kaiming_uniform;
use vemkd_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Parameter and multiply-accumulate totals of a layer or network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: usize,
    pub macs: usize,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

/// Square-kernel convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[cout, cin, k, k], (1.0f64 / 3.0).sqrt(), rng),
        );
        let bias = bias.then(|| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            store.add(
                format!("{name}.bias"),
                Tensor::rand_uniform(&[cout], -bound, bound, rng),
            )
        });
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        self.forward_with_weight(g, store, x, w)
    }

    /// Applies the convolution with a substitute kernel (e.g. a normalized one).
    pub fn forward_with_weight<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, w: Var) -> Var {
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn cost(&self, in_size: usize) -> Cost {
        let per_out = self.cin * self.k * self.k;
        let out = self.out_size(in_size);
        Cost {
            params: self.cout * per_out + if self.bias.is_some() { self.cout } else { 0 },
            macs: self.cout * per_out * out * out,
        }
    }
}

/// Instance normalization with a learnable per-channel affine transform.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub channels: usize,
}

impl InstanceNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), Tensor::ones(&[channels])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels])),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = g.instance_norm(x, T::lit(Self::EPS));
        let (a, b) = (g.param(store, self.scale), g.param(store, self.shift));
        g.channel_affine(n, Some(a), Some(b))
    }

    pub fn cost(&self) -> Cost {
        Cost {
            params: 2 * self.channels,
            macs: 0,
        }
    }
}
