//! Central finite-difference checks for every differentiable op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vemkd_tensor::{Graph, Tensor, Var};

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

/// Checks d loss / d input for every input, where `build` maps leaf vars to
/// a scalar loss.
fn check(inputs: &[Tensor<f64>], build: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss);
    let h = 1e-6;
    for (k, inp) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).expect("missing gradient").clone();
        for i in 0..inp.numel() {
            let eval = |delta: f64| {
                let g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        g.constant(t)
                    })
                    .collect();
                let l = build(&g, &vars);
                g.item(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1.0f64).max(a.abs()).max(numeric.abs());
            assert!(err < 1e-5, "input {k} elem {i}: analytic {a} vs numeric {numeric}");
        }
    }
}

fn randn(shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng())
}

fn weighted_sum(g: &Graph<f64>, v: Var) -> Var {
    // a fixed non-uniform weighting so every output element matters differently
    let shape = g.shape(v);
    let w = Tensor::from_fn(&shape, |i| ((i * 7919) % 13) as f64 * 0.1 - 0.6);
    let wv = g.constant(w);
    g.sum(g.mul(v, wv))
}

#[test]
fn elementwise_ops() {
    let a = randn(&[2, 3]);
    let b = Tensor::from_fn(&[2, 3], |i| 1.5 + i as f64 * 0.1);
    check(&[a.clone(), b.clone()], |g, v| weighted_sum(g, g.add(v[0], v[1])));
    check(&[a.clone(), b.clone()], |g, v| weighted_sum(g, g.sub(v[0], v[1])));
    check(&[a.clone(), b.clone()], |g, v| weighted_sum(g, g.mul(v[0], v[1])));
    check(&[a.clone(), b.clone()], |g, v| weighted_sum(g, g.div(v[0], v[1])));
    check(std::slice::from_ref(&a), |g, v| weighted_sum(g, g.square(v[0])));
    check(std::slice::from_ref(&a), |g, v| weighted_sum(g, g.abs(v[0])));
    check(std::slice::from_ref(&a), |g, v| weighted_sum(g, g.exp(v[0])));
    check(std::slice::from_ref(&b), |g, v| weighted_sum(g, g.ln(v[0])));
    check(std::slice::from_ref(&b), |g, v| weighted_sum(g, g.sqrt(v[0])));
    check(std::slice::from_ref(&a), |g, v| weighted_sum(g, g.tanh(v[0])));
    check(std::slice::from_ref(&a), |g, v| weighted_sum(g, g.softplus(v[0])));
    check(std::slice::from_ref(&a), |g, v| {
        weighted_sum(g, g.leaky_relu(v[0], 0.2))
    });
    check(std::slice::from_ref(&a), |g, v| {
        weighted_sum(g, g.scale(g.add_scalar(v[0], 0.3), -1.7))
    });
    check(std::slice::from_ref(&a), |g, v| g.mean(g.square(v[0])));
    check(&[a.clone(), Tensor::scalar(1.3)], |g, v| {
        weighted_sum(g, g.mul_scalar_var(v[0], v[1]))
    });
    check(&[a.clone(), Tensor::scalar(1.3)], |g, v| {
        weighted_sum(g, g.div_scalar_var(v[0], v[1]))
    });
    check(&[b], |g, v| weighted_sum(g, g.clamp_min(v[0], 1.55)));
}

#[test]
fn reductions_and_reshapes() {
    let x = randn(&[2, 3, 4, 4]);
    check(std::slice::from_ref(&x), |g, v| weighted_sum(g, g.sum_per_sample(v[0])));
    check(std::slice::from_ref(&x), |g, v| {
        weighted_sum(g, g.mean_per_sample(v[0]))
    });
    check(std::slice::from_ref(&x), |g, v| weighted_sum(g, g.mean_spatial(v[0])));
    check(std::slice::from_ref(&x), |g, v| {
        weighted_sum(g, g.reshape(v[0], &[6, 16]))
    });
    check(std::slice::from_ref(&x), |g, v| {
        weighted_sum(g, g.slice_batch(v[0], 1, 1))
    });
    let y = randn(&[2, 1, 4, 4]);
    check(&[x.clone(), y.clone()], |g, v| {
        weighted_sum(g, g.concat_channels(v[0], v[1]))
    });
    check(&[x.clone(), x], |g, v| weighted_sum(g, g.concat_batch(v[0], v[1])));
}

#[test]
fn convolution_and_pooling() {
    let mut r = rng();
    let x: Tensor<f64> = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let w: Tensor<f64> = Tensor::randn(&[4, 3, k, k], 0.5, &mut r);
        let b: Tensor<f64> = Tensor::randn(&[4], 0.5, &mut r);
        check(&[x.clone(), w, b], move |g, v| {
            weighted_sum(g, g.conv2d(v[0], v[1], Some(v[2]), stride, pad))
        });
    }
    check(std::slice::from_ref(&x), |g, v| {
        weighted_sum(g, g.avg_pool(v[0], 3, 2, 1))
    });
    check(std::slice::from_ref(&x), |g, v| {
        weighted_sum(g, g.avg_pool(v[0], 2, 2, 0))
    });
    check(std::slice::from_ref(&x), |g, v| weighted_sum(g, g.upsample2x(v[0])));
    check(std::slice::from_ref(&x), |g, v| {
        weighted_sum(g, g.instance_norm(v[0], 1e-5))
    });
    let s = Tensor::new(&[3], vec![0.5, -1.0, 2.0]);
    let t = Tensor::new(&[3], vec![0.1, 0.2, -0.3]);
    check(&[x.clone(), s, t], |g, v| {
        weighted_sum(g, g.channel_affine(v[0], Some(v[1]), Some(v[2])))
    });
    let kernel = [0.25, 0.5, 0.25];
    check(std::slice::from_ref(&x), move |g, v| {
        weighted_sum(g, g.blur(v[0], &kernel))
    });
    check(std::slice::from_ref(&x), |g, v| weighted_sum(g, g.gram(v[0])));
    check(std::slice::from_ref(&x), |g, v| {
        weighted_sum(g, g.spatial_diff(v[0], 2))
    });
    check(&[x], |g, v| weighted_sum(g, g.spatial_diff(v[0], 3)));
}

#[test]
fn matrix_ops() {
    let mut r = rng();
    let a: Tensor<f64> = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b: Tensor<f64> = Tensor::randn(&[4, 2], 1.0, &mut r);
    check(&[a.clone(), b], |g, v| weighted_sum(g, g.matmul(v[0], v[1])));
    check(std::slice::from_ref(&a), |g, v| weighted_sum(g, g.transpose(v[0])));
    let w: Tensor<f64> = Tensor::randn(&[5, 4], 1.0, &mut r);
    let bias: Tensor<f64> = Tensor::randn(&[5], 1.0, &mut r);
    check(&[a, w, bias], |g, v| weighted_sum(g, g.linear(v[0], v[1], Some(v[2]))));
}

#[test]
fn frozen_stores_yield_no_parameter_gradients() {
    let mut store = vemkd_tensor::ParamStore::<f64>::new();
    let id = store.add("w", Tensor::ones(&[2]));
    let g = Graph::new();
    g.freeze(&store);
    let x = g.variable(Tensor::new(&[2], vec![1.0, 2.0]));
    let w = g.param(&store, id);
    let loss = g.sum(g.mul(x, w));
    let grads = g.backward(loss);
    assert!(grads.for_store(&store)[0].is_none());
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn parameter_bound_twice_accumulates() {
    let mut store = vemkd_tensor::ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(&[1], vec![3.0]));
    let g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    let loss = g.sum(g.mul(a, b));
    let grads = g.backward(loss);
    assert_eq!(grads.for_store(&store)[0].as_ref().unwrap().data(), &[6.0]);
}
