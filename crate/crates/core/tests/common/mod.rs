//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod cases;

use ifs_core::codec::{FrameShape, RawClip};
use ifs_core::tensor::{Graph, Tensor, Var};
use ifs_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Like [`uniform`] but keeps every value at least `gap` away from zero, so
/// kinks at the origin stay outside a finite-difference stencil.
pub fn uniform_away_from_zero(rng: &mut impl Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn random_frame(rng: &mut impl Rng, shape: FrameShape) -> Vec<u8> {
    (0..shape.len()).map(|_| rng.random()).collect()
}

pub fn random_clip(rng: &mut impl Rng, frames: usize, shape: FrameShape) -> RawClip {
    let pixels = (0..frames * shape.len()).map(|_| rng.random()).collect();
    RawClip::new(frames, shape, pixels).unwrap()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y, floor)).fold(0.0, f64::max)
}

/// Cross-correlation with zero padding, six nested loops plus batch.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wt) = (x.data(), w.data());
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((s * cin + c) * h + iy as usize) * wd + ix as usize];
                                acc += xv * wt[((o * cin + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

/// Transposed convolution as a scatter: every input pixel stamps the
/// kernel, scaled, onto the output at `stride` spacing, then the border of
/// width `pad` is cropped.
pub fn scatter_conv_transpose2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (_, cout, kh, kw) = w.dims4().unwrap();
    let (fh, fw) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
    let (ho, wo) = (fh - 2 * pad, fw - 2 * pad);
    let mut full = vec![0.0; n * cout * fh * fw];
    for s in 0..n {
        for c in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.data()[((s * cin + c) * h + iy) * wd + ix];
                    for o in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let k = w.data()[((c * cout + o) * kh + ky) * kw + kx];
                                full[((s * cout + o) * fh + iy * stride + ky) * fw + ix * stride + kx] += v * k;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for x in 0..wo {
                    out[((s * cout + o) * ho + y) * wo + x] =
                        full[((s * cout + o) * fh + y + pad) * fw + x + pad] + b.map_or(0.0, |b| b.data()[o]);
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

/// Exhaustive block matching written from the definition: total SAD over
/// channels with clamped source pixels, minimum by
/// `(sad, |dy| + |dx|, scan index)`.
pub fn brute_force_motion(reference: &[u8], target: &[u8], shape: FrameShape, bs: usize, range: i32) -> Vec<(i32, i32)> {
    let (h, w) = (shape.height as i64, shape.width as i64);
    let mut field = Vec::new();
    for by in 0..shape.height / bs {
        for bx in 0..shape.width / bs {
            let mut candidates = Vec::new();
            let mut scan = 0;
            for dy in -range..=range {
                for dx in -range..=range {
                    let mut sad = 0i64;
                    for c in 0..shape.channels {
                        for y in by * bs..(by + 1) * bs {
                            for x in bx * bs..(bx + 1) * bs {
                                let sy = (y as i64 + dy as i64).clamp(0, h - 1) as usize;
                                let sx = (x as i64 + dx as i64).clamp(0, w - 1) as usize;
                                let t = target[c * shape.pixels() + y * shape.width + x] as i64;
                                let r = reference[c * shape.pixels() + sy * shape.width + sx] as i64;
                                sad += (t - r).abs();
                            }
                        }
                    }
                    candidates.push((sad, dy.abs() + dx.abs(), scan, (dy, dx)));
                    scan += 1;
                }
            }
            field.push(candidates.into_iter().min().unwrap().3);
        }
    }
    field
}

/// Checks reverse-mode gradients of `build` against central differences.
///
/// The scalar under test is `Σ build(inputs) ⊙ R` for a fixed random `R`,
/// so every output element contributes with a distinct weight. Returns the
/// largest relative error over all input elements, with relative error
/// floored at `1e-3` in the denominator.
pub fn grad_check<F>(inputs: &[Tensor<f64>], rng: &mut impl Rng, build: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-5;
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&mut g, &vars).unwrap();
        g.value(y).shape().to_vec()
    };
    let weights = uniform(rng, &probe_shape, -1.0, 1.0);
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&mut g, &vars).unwrap();
        g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = build(&mut g, &vars).unwrap();
    let r = g.input(weights.clone());
    let weighted = g.mul(y, r).unwrap();
    let loss = g.sum(weighted).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))).collect();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric, 1e-3));
        }
    }
    worst
}
