//! Random instances of every differentiable operator and loss, for the
//! finite-difference suite.

use ifs_core::losses::{self, AdversarialLabels};
use ifs_core::tensor::{Activation, Graph, Tensor, Var};
use ifs_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{uniform, uniform_away_from_zero};

pub type Build = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub struct Case {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Instance,
}

fn inst(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'static) -> Instance {
    Instance { inputs, build: Box::new(build) }
}

fn small(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=2);
    let h = rng.random_range(2..=3);
    let w = rng.random_range(2..=3);
    vec![n, c, h, w]
}

fn conv2d(rng: &mut ChaCha8Rng) -> Instance {
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2));
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..k);
    let h = rng.random_range(k.max(2)..=4);
    let w = rng.random_range(k.max(2)..=4);
    let x = uniform(rng, &[n, cin, h, w], -1.0, 1.0);
    let wt = uniform(rng, &[cout, cin, k, k], -1.0, 1.0);
    let b = uniform(rng, &[cout], -1.0, 1.0);
    inst(vec![x, wt, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad))
}

fn conv_transpose2d(rng: &mut ChaCha8Rng) -> Instance {
    let (cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let k = rng.random_range(2..=4);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..k / 2 + 1).min(k - 1);
    let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let x = uniform(rng, &[1, cin, h, w], -1.0, 1.0);
    let wt = uniform(rng, &[cin, cout, k, k], -1.0, 1.0);
    let b = uniform(rng, &[cout], -1.0, 1.0);
    let ok = (h - 1) * stride + k > 2 * pad && (w - 1) * stride + k > 2 * pad;
    let pad = if ok { pad } else { 0 };
    inst(vec![x, wt, b], move |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad))
}

fn reflect_pad(rng: &mut ChaCha8Rng) -> Instance {
    let (h, w) = (rng.random_range(3..=4), rng.random_range(3..=4));
    let pad = rng.random_range(1..=2);
    let c = rng.random_range(1..=2);
    let x = uniform(rng, &[1, c, h, w], -1.0, 1.0);
    inst(vec![x], move |g, v| g.reflect_pad(v[0], pad))
}

fn instance_norm(rng: &mut ChaCha8Rng) -> Instance {
    let shape = small(rng);
    let c = shape[1];
    let x = uniform(rng, &shape, -2.0, 2.0);
    let gamma = uniform(rng, &[c], 0.5, 1.5);
    let beta = uniform(rng, &[c], -1.0, 1.0);
    inst(vec![x, gamma, beta], |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5))
}

fn activation(rng: &mut ChaCha8Rng, kind: Activation) -> Instance {
    let n = rng.random_range(2..=8);
    let x = uniform_away_from_zero(rng, &[n], 2.0, 1e-3);
    inst(vec![x], move |g, v| g.activation(v[0], kind))
}

fn relu(rng: &mut ChaCha8Rng) -> Instance {
    activation(rng, Activation::Relu)
}

fn leaky_relu(rng: &mut ChaCha8Rng) -> Instance {
    activation(rng, Activation::LeakyRelu)
}

fn tanh(rng: &mut ChaCha8Rng) -> Instance {
    activation(rng, Activation::Tanh)
}

fn mean_spatial(rng: &mut ChaCha8Rng) -> Instance {
    let shape = small(rng);
    let x = uniform(rng, &shape, -1.0, 1.0);
    inst(vec![x], |g, v| g.mean_spatial(v[0]))
}

fn vector(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = rng.random_range(2..=8);
    uniform(rng, &[n], -2.0, 2.0)
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let a = vector(rng);
    let b = uniform(rng, a.shape(), -2.0, 2.0);
    vec![a, b]
}

fn add(rng: &mut ChaCha8Rng) -> Instance {
    inst(pair(rng), |g, v| g.add(v[0], v[1]))
}

fn sub(rng: &mut ChaCha8Rng) -> Instance {
    inst(pair(rng), |g, v| g.sub(v[0], v[1]))
}

fn mul(rng: &mut ChaCha8Rng) -> Instance {
    inst(pair(rng), |g, v| g.mul(v[0], v[1]))
}

fn scale(rng: &mut ChaCha8Rng) -> Instance {
    let f = rng.random_range(-3.0..3.0);
    inst(vec![vector(rng)], move |g, v| g.scale(v[0], f))
}

fn add_scalar(rng: &mut ChaCha8Rng) -> Instance {
    let f = rng.random_range(-3.0..3.0);
    inst(vec![vector(rng)], move |g, v| g.add_scalar(v[0], f))
}

fn square(rng: &mut ChaCha8Rng) -> Instance {
    inst(vec![vector(rng)], |g, v| g.square(v[0]))
}

fn mean(rng: &mut ChaCha8Rng) -> Instance {
    inst(vec![vector(rng)], |g, v| g.mean(v[0]))
}

fn sum(rng: &mut ChaCha8Rng) -> Instance {
    inst(vec![vector(rng)], |g, v| g.sum(v[0]))
}

fn mse(rng: &mut ChaCha8Rng) -> Instance {
    inst(pair(rng), |g, v| g.mse(v[0], v[1]))
}

fn select_channels(rng: &mut ChaCha8Rng) -> Instance {
    let c = rng.random_range(2..=4);
    let n = rng.random_range(1..=2);
    let x = uniform(rng, &[n, c, 2, 2], -1.0, 1.0);
    let start = rng.random_range(0..c);
    let len = rng.random_range(1..=c - start);
    inst(vec![x], move |g, v| g.select_channels(v[0], start, len))
}

fn reshape(rng: &mut ChaCha8Rng) -> Instance {
    let k = rng.random_range(1..=4);
    let x = uniform(rng, &[2, k], -1.0, 1.0);
    let n = x.numel();
    inst(vec![x], move |g, v| g.reshape(v[0], &[n]))
}

fn linear(rng: &mut ChaCha8Rng) -> Instance {
    let (n, i, o) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    let x = uniform(rng, &[n, i], -1.0, 1.0);
    let w = uniform(rng, &[o, i], -1.0, 1.0);
    let b = uniform(rng, &[o], -1.0, 1.0);
    inst(vec![x, w, b], |g, v| g.linear(v[0], v[1], v[2]))
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Instance {
    let (n, k) = (rng.random_range(1..=2), rng.random_range(2..=4));
    let logits = uniform(rng, &[n, k], -2.0, 2.0);
    let y = labels(rng, n, k);
    inst(vec![logits], move |g, v| g.cross_entropy(v[0], &y))
}

fn appearance_loss(rng: &mut ChaCha8Rng) -> Instance {
    let shape = small(rng);
    let a = uniform(rng, &shape, -1.0, 1.0);
    let b = uniform(rng, &shape, -1.0, 1.0);
    inst(vec![a, b], |g, v| losses::appearance_loss(g, v[0], v[1]))
}

fn categorization_loss(rng: &mut ChaCha8Rng) -> Instance {
    let (n, k) = (rng.random_range(1..=2), rng.random_range(2..=4));
    let logits = uniform(rng, &[n, k], -2.0, 2.0);
    let y = labels(rng, n, k);
    inst(vec![logits], move |g, v| losses::categorization_loss(g, v[0], &y))
}

fn motion_loss(rng: &mut ChaCha8Rng) -> Instance {
    let steps = rng.random_range(1..=2);
    let c = rng.random_range(1..=2);
    let shape = [1, steps * (2 + c), 2, 2];
    let p = uniform(rng, &shape, -1.0, 1.0);
    let t = uniform(rng, &shape, -1.0, 1.0);
    inst(vec![p, t], move |g, v| losses::motion_loss(g, v[0], v[1], c))
}

fn score_maps(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let shape = [rng.random_range(1..=2), 1, rng.random_range(1..=2), rng.random_range(1..=2)];
    vec![uniform(rng, &shape, -1.0, 2.0), uniform(rng, &shape, -1.0, 2.0)]
}

fn discriminator_loss(rng: &mut ChaCha8Rng) -> Instance {
    let swap = rng.random_bool(0.5);
    inst(score_maps(rng), move |g, v| losses::discriminator_loss(g, v[0], v[1], AdversarialLabels::new(swap)))
}

fn generator_adversarial_loss(rng: &mut ChaCha8Rng) -> Instance {
    let swap = rng.random_bool(0.5);
    let mut maps = score_maps(rng);
    maps.truncate(1);
    inst(maps, move |g, v| losses::generator_adversarial_loss(g, v[0], AdversarialLabels::new(swap)))
}

fn color_consistency_loss(rng: &mut ChaCha8Rng) -> Instance {
    let shape = small(rng);
    let (n, c) = (shape[0], shape[1]);
    let frames = rng.random_range(2..=3);
    let means: Vec<Tensor<f64>> = (0..frames).map(|_| uniform(rng, &[n, c], -1.0, 1.0)).collect();
    let x = uniform(rng, &shape, -1.0, 1.0);
    inst(vec![x], move |g, v| losses::color_consistency_loss(g, &means, v[0]))
}

pub const OPERATORS: &[Case] = &[
    Case { name: "conv2d", make: conv2d },
    Case { name: "conv_transpose2d", make: conv_transpose2d },
    Case { name: "reflect_pad", make: reflect_pad },
    Case { name: "instance_norm", make: instance_norm },
    Case { name: "relu", make: relu },
    Case { name: "leaky_relu", make: leaky_relu },
    Case { name: "tanh", make: tanh },
    Case { name: "reduce_mean_spatial", make: mean_spatial },
    Case { name: "add", make: add },
    Case { name: "sub", make: sub },
    Case { name: "mul", make: mul },
    Case { name: "scale", make: scale },
    Case { name: "add_scalar", make: add_scalar },
    Case { name: "square", make: square },
    Case { name: "mean", make: mean },
    Case { name: "sum", make: sum },
    Case { name: "mse", make: mse },
    Case { name: "select_channels", make: select_channels },
    Case { name: "reshape", make: reshape },
    Case { name: "linear", make: linear },
    Case { name: "cross_entropy", make: cross_entropy },
];

pub const LOSSES: &[Case] = &[
    Case { name: "appearance_loss", make: appearance_loss },
    Case { name: "categorization_loss", make: categorization_loss },
    Case { name: "motion_loss", make: motion_loss },
    Case { name: "discriminator_loss", make: discriminator_loss },
    Case { name: "generator_adversarial_loss", make: generator_adversarial_loss },
    Case { name: "color_consistency_loss", make: color_consistency_loss },
];

/// Worst relative error of each case over `instances` random draws.
pub fn run_suite(cases: &[Case], instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut rng = super::rng(seed + i as u64);
            let worst = (0..instances)
                .map(|_| {
                    let inst = (case.make)(&mut rng);
                    super::grad_check(&inst.inputs, &mut rng, &inst.build)
                })
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}
