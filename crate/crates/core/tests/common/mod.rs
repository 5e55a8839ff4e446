//! Reference implementations shared by the integration tests. Nothing here
//! goes through the im2col/gemm kernels.

#![allow(dead_code)]

use fccgan::{ConvGeometry, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Direct quadruple loop cross-correlation; `pad_extra` only enlarges the
/// output range, out-of-range taps read zero.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: &ConvGeometry) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let f = w.shape()[0];
    let k = g.kernel;
    let oh = (h + 2 * g.pad + g.pad_extra - k) / g.stride + 1;
    let ow = (wd + 2 * g.pad + g.pad_extra - k) / g.stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for bi in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (oy * g.stride + ki) as isize - g.pad as isize;
                                let xx = (ox * g.stride + kj) as isize - g.pad as isize;
                                if y < 0 || xx < 0 || y as usize >= h || xx as usize >= wd {
                                    continue;
                                }
                                acc += x.data()
                                    [((bi * c + ci) * h + y as usize) * wd + xx as usize]
                                    * w.data()[((fi * c + ci) * k + ki) * k + kj];
                            }
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new([n, f, oh, ow], out).unwrap()
}

/// Scatter form of the transposed convolution, weights `[C_in, F, k, k]`.
pub fn naive_conv_transpose2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    g: &ConvGeometry,
) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let f = w.shape()[1];
    let k = g.kernel;
    let total = (2 * g.pad + g.pad_extra) as isize;
    let oh = ((h - 1) * g.stride + k + g.output_pad) as isize - total;
    let ow = ((wd - 1) * g.stride + k + g.output_pad) as isize - total;
    let (oh, ow) = (oh as usize, ow as usize);
    let mut out = vec![0.0; n * f * oh * ow];
    for bi in 0..n {
        for fi in 0..f {
            for p in 0..oh * ow {
                out[(bi * f + fi) * oh * ow + p] = b[fi];
            }
        }
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.data()[((bi * c + ci) * h + iy) * wd + ix];
                    for fi in 0..f {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (iy * g.stride + ki) as isize - g.pad as isize;
                                let xx = (ix * g.stride + kj) as isize - g.pad as isize;
                                if y < 0 || xx < 0 || y as usize >= oh || xx as usize >= ow {
                                    continue;
                                }
                                out[((bi * f + fi) * oh + y as usize) * ow + xx as usize] +=
                                    v * w.data()[((ci * f + fi) * k + ki) * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, f, oh, ow], out).unwrap()
}

pub fn naive_matmul(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b[j];
            for p in 0..d {
                acc += x.data()[i * d + p] * w.data()[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new([n, m], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` with respect to the listed coordinates.
pub fn numeric_grad(
    x: &Tensor<f64>,
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

use fccgan::{Tape, Var};

/// Checks every gradient of `loss = Σ r ⊙ build(inputs)` against central
/// differences, probing at most `max_coords` coordinates per input. Returns
/// the worst relative error over the inputs.
pub fn gradcheck(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor<f64>],
    max_coords: usize,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let probe_shape = {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let r = random_tensor(rng, &probe_shape);
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).dot(&r)
    };

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let rv = tape.constant(r.clone());
    let weighted = tape.mul(out, rv).unwrap();
    let loss = tape.sum(weighted);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if input.len() <= max_coords {
            (0..input.len()).collect()
        } else {
            (0..max_coords)
                .map(|_| rng.random_range(0..input.len()))
                .collect()
        };
        let analytic: Vec<f64> = match tape.grad(vars[i]) {
            Some(g) => coords.iter().map(|&c| g.data()[c]).collect(),
            None => vec![0.0; coords.len()],
        };
        let numeric = numeric_grad(input, &coords, 1e-5, |perturbed| {
            let mut vals = inputs.to_vec();
            vals[i] = perturbed.clone();
            eval(&vals)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
