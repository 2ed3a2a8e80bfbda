#![allow(dead_code)]

pub mod oracles;

use mvnas::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Naive direct convolution, one output element at a time.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    dil: (usize, usize),
    groups: usize,
) -> Tensor {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let cout_g = cout / groups;
    let oh = (h + 2 * pad.0 - dil.0 * (kh - 1) - 1) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - dil.1 * (kw - 1) - 1) / stride.1 + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride.0 + ki * dil.0) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kj * dil.1) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[n, g * cin_g + ci, iy as usize, ix as usize]) * w.at(&[co, ci, ki, kj]);
                            }
                        }
                    }
                    out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    let _ = cin;
    Tensor::new(vec![b, cout, oh, ow], out).unwrap()
}

/// Naive pooling; `max == false` averages over the full window area.
pub fn naive_pool2d(x: &Tensor, k: usize, stride: usize, pad: usize, max: bool) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut vals = Vec::new();
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                vals.push(x.at(&[n, ch, iy as usize, ix as usize]));
                            }
                        }
                    }
                    out.push(if max {
                        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / (k * k) as f64
                    });
                }
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Compare tape gradients of `f` against central finite differences (h = 1e-5).
/// The op output is contracted with a fixed random tensor to get a scalar.
/// Returns the worst norm-wise relative error over all inputs.
pub fn fd_check<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let h = 1e-5;
    let mut probe: Option<Tensor> = None;
    let eval = |vals: &[Tensor], probe: &mut Option<Tensor>, grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), grads)).collect();
        let out = f(&mut tape, &vars);
        let p = probe
            .get_or_insert_with(|| random_tensor(&mut rng(seed ^ 0x5eed), tape.shape(out)))
            .clone();
        let prod = tape.mul_const(out, &p).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.item(loss);
        let mut gs = Vec::new();
        if grads {
            tape.backward(loss).unwrap();
            for v in &vars {
                gs.push(
                    tape.grad(*v)
                        .map(|g| g.data().to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.value(*v).numel()]),
                );
            }
        }
        (value, gs)
    };
    let (_, analytic) = eval(inputs, &mut probe, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fp = eval(&plus, &mut probe, false).0;
            let fm = eval(&minus, &mut probe, false).0;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(rel_error(&analytic[i], &numeric));
    }
    worst
}
