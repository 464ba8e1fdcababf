//! Finite-difference gradient checks against naive f64 forward implementations.

use stainkit::tensor::{Tape, Tensor, Var};
use stainkit::Result;

use super::rng;

pub const STEP: f64 = 1e-3;
pub const MAX_REL_ERR: f64 = 1e-3;
pub const MAX_ELEMENTS: usize = 64;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    build: Build,
    reference: Reference,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
        reference: Box::new(reference),
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = (0..shape.len()).map(|i| shape[i + 1..].iter().product()).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut src = 0;
        for (d, &ext) in out_shape.iter().enumerate().rev() {
            let idx = rem % ext;
            rem /= ext;
            src += idx * strides[axes[d]];
        }
        out.push(x[src]);
    }
    out
}

fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let z: f64 = (0..len).map(|a| x[at(a)].exp()).sum();
            for a in 0..len {
                out[at(a)] = x[at(a)].exp() / z;
            }
        }
    }
    out
}

fn conv2d(x: &[f64], w: &[f64], xs: [usize; 4], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Scatter form: every input pixel paints a weighted copy of the kernel into the output.
fn conv_transpose2d(x: &[f64], w: &[f64], xs: [usize; 4], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [b, cin, h, wd] = xs;
    let [_, cout, kh, kw] = ws;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for ic in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x[((bi * cin + ic) * h + iy) * wd + ix];
                    for oc in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((bi * cout + oc) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w[((ic * cout + oc) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|e| e * e).sum::<f64>().sqrt()
}

/// Every differentiable tape operation, with a naive f64 forward pass.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]), |x| zip(&x[0], &x[1], |a, b| a + b)),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1]), |x| zip(&x[0], &x[1], |a, b| a - b)),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]), |x| zip(&x[0], &x[1], |a, b| a * b)),
        case("scale", &[&[2, 5]], |t, v| t.scale(v[0], -0.7), |x| x[0].iter().map(|a| a * -0.7).collect()),
        case("add_scalar", &[&[2, 5]], |t, v| t.add_scalar(v[0], 0.3), |x| x[0].iter().map(|a| a + 0.3).collect()),
        case("square", &[&[7]], |t, v| t.square(v[0]), |x| x[0].iter().map(|a| a * a).collect()),
        case("sum", &[&[2, 3, 2]], |t, v| t.sum(v[0]), |x| vec![x[0].iter().sum()]),
        case("mean", &[&[2, 3, 2]], |t, v| t.mean(v[0]), |x| vec![x[0].iter().sum::<f64>() / 12.0]),
        case("mean_axis", &[&[2, 3, 4]], |t, v| t.mean_axis(v[0], 1), |x| {
            let mut out = vec![0.0; 8];
            for o in 0..2 {
                for i in 0..4 {
                    out[o * 4 + i] = (0..3).map(|a| x[0][(o * 3 + a) * 4 + i]).sum::<f64>() / 3.0;
                }
            }
            out
        }),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]), |x| matmul(&x[0], &x[1], 3, 4, 2)),
        case("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.matmul(v[0], v[1]), |x| {
            let mut out = matmul(&x[0][..12], &x[1][..8], 3, 4, 2);
            out.extend(matmul(&x[0][12..], &x[1][8..], 3, 4, 2));
            out
        }),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]), |x| permute(&x[0], &[2, 3, 4], &[2, 0, 1])),
        case("transpose", &[&[2, 3, 4]], |t, v| t.transpose(v[0]), |x| permute(&x[0], &[2, 3, 4], &[0, 2, 1])),
        case("reshape", &[&[3, 4]], |t, v| t.reshape(v[0], &[2, 6]), |x| x[0].clone()),
        case("add_bias", &[&[2, 3, 4], &[3]], |t, v| t.add_bias(v[0], v[1], 1), |x| {
            (0..24).map(|i| x[0][i] + x[1][(i / 4) % 3]).collect()
        }),
        case("conv2d", &[&[1, 2, 5, 5], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], 1, 1), |x| {
            conv2d(&x[0], &x[1], [1, 2, 5, 5], [3, 2, 3, 3], 1, 1)
        }),
        case("conv2d_strided", &[&[1, 2, 5, 5], &[2, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], 2, 1), |x| {
            conv2d(&x[0], &x[1], [1, 2, 5, 5], [2, 2, 3, 3], 2, 1)
        }),
        case("conv_transpose2d", &[&[1, 2, 3, 3], &[2, 2, 4, 4]], |t, v| t.conv_transpose2d(v[0], v[1], 2, 1), |x| {
            conv_transpose2d(&x[0], &x[1], [1, 2, 3, 3], [2, 2, 4, 4], 2, 1)
        }),
        case("conv2d_batched", &[&[2, 2, 4, 4], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], 2, 1), |x| {
            conv2d(&x[0], &x[1], [2, 2, 4, 4], [3, 2, 3, 3], 2, 1)
        }),
        case("conv_transpose2d_batched", &[&[2, 2, 2, 2], &[2, 2, 4, 4]], |t, v| t.conv_transpose2d(v[0], v[1], 2, 1), |x| {
            conv_transpose2d(&x[0], &x[1], [2, 2, 2, 2], [2, 2, 4, 4], 2, 1)
        }),
        case("softmax_last", &[&[3, 4]], |t, v| t.softmax(v[0], 1), |x| softmax(&x[0], 3, 4, 1)),
        case("softmax_first", &[&[3, 4]], |t, v| t.softmax(v[0], 0), |x| softmax(&x[0], 1, 3, 4)),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2]), |x| {
            let mut out = Vec::new();
            for row in x[0].chunks(5) {
                let mean = row.iter().sum::<f64>() / 5.0;
                let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 5.0;
                for j in 0..5 {
                    out.push((row[j] - mean) / (var + 1e-5).sqrt() * x[1][j] + x[2][j]);
                }
            }
            out
        }),
        case("gelu", &[&[12]], |t, v| t.gelu(v[0]), |x| x[0].iter().map(|&a| gelu(a)).collect()),
        case("sigmoid", &[&[12]], |t, v| t.sigmoid(v[0]), |x| x[0].iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect()),
        case("cosine_similarity", &[&[2, 5], &[2, 5]], |t, v| t.cosine_similarity(v[0], v[1]), |x| {
            let dot: f64 = x[0].iter().zip(&x[1]).map(|(a, b)| a * b).sum();
            vec![dot / (norm(&x[0]) * norm(&x[1]) + 1e-8)]
        }),
        case("row_norms", &[&[4, 3]], |t, v| t.row_norms(v[0]), |x| x[0].chunks(3).map(norm).collect()),
        case("gather_rows", &[&[5, 3]], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]), |x| {
            [4, 0, 4, 2].iter().flat_map(|&i| x[0][i * 3..i * 3 + 3].to_vec()).collect()
        }),
        case("mse", &[&[3, 4], &[3, 4]], |t, v| t.mse(v[0], v[1]), |x| {
            vec![x[0].iter().zip(&x[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0]
        }),
    ]
}

/// Outcome of one op at one seed.
#[derive(Debug)]
pub struct Check {
    pub forward_err: f64,
    pub rel_err: f64,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = zip(analytic, numeric, |a, b| a - b);
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Checks the analytic gradient of `Σ op(x)·r` for a random cotangent `r`
/// against central differences of the f64 reference.
pub fn check(case: &OpCase, seed: u64) -> Check {
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = case
        .shapes
        .iter()
        .map(|s| {
            assert!(s.iter().product::<usize>() <= MAX_ELEMENTS, "{} input too large", case.name);
            Tensor::uniform(s, -1.0, 1.0, &mut r).unwrap().with_requires_grad(true)
        })
        .collect();
    let xs: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.watch(t)).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let out_shape = tape.shape(out).to_vec();
    let expected = (case.reference)(&xs);
    let got: Vec<f64> = tape.value(out).data().iter().map(|&v| v as f64).collect();
    assert_eq!(got.len(), expected.len(), "{}: output size", case.name);
    let forward_err = zip(&got, &expected, |a, b| (a - b).abs() / (1.0 + b.abs())).into_iter().fold(0.0, f64::max);

    let cot = Tensor::uniform(&out_shape, -1.0, 1.0, &mut r).unwrap();
    let cot64: Vec<f64> = cot.data().iter().map(|&v| v as f64).collect();
    let cv = tape.constant(cot);
    let prod = tape.mul(out, cv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let objective = |xs: &[Vec<f64>]| -> f64 { (case.reference)(xs).iter().zip(&cot64).map(|(a, b)| a * b).sum() };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = xs.clone();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; xs[k].len()]);
        analytic.extend(g.iter().map(|&e| e as f64));
        for j in 0..xs[k].len() {
            probe[k][j] = xs[k][j] + STEP;
            let up = objective(&probe);
            probe[k][j] = xs[k][j] - STEP;
            let down = objective(&probe);
            probe[k][j] = xs[k][j];
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Check {
        forward_err,
        rel_err: relative_error(&analytic, &numeric),
    }
}

/// Worst relative gradient error of every op over `seeds`, as `(name, worst forward error, worst gradient error)`.
pub fn sweep(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64, f64)> {
    op_cases()
        .iter()
        .map(|c| {
            let (mut fwd, mut grad) = (0.0f64, 0.0f64);
            for s in seeds.clone() {
                let r = check(c, s);
                fwd = fwd.max(r.forward_err);
                grad = grad.max(r.rel_err);
            }
            (c.name, fwd, grad)
        })
        .collect()
}

/// Gradients through `stop_gradient`: `(x, d/dx Σ sg(x)·x, d/dx Σ sg(x)²)` for a random `x`.
pub fn stop_gradient_grads(seed: u64) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut r = rng(seed);
    let x = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r).unwrap().with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.watch(&x);
    let sg = tape.stop_gradient(v).unwrap();
    let prod = tape.mul(sg, v).unwrap();
    let loss = tape.sum(prod).unwrap();
    let g1 = tape.backward(loss).unwrap().get(v).unwrap().to_vec();

    let mut tape = Tape::new();
    let v = tape.watch(&x);
    let sg = tape.stop_gradient(v).unwrap();
    let sq = tape.square(sg).unwrap();
    let s = tape.sum(sq).unwrap();
    // a second, live path keeps the loss attached to the tape
    let live = tape.scale(v, 0.0).unwrap();
    let live = tape.sum(live).unwrap();
    let loss = tape.add(s, live).unwrap();
    let g2 = tape.backward(loss).unwrap().get(v).unwrap().to_vec();
    (x.data().to_vec(), g1, g2)
}
