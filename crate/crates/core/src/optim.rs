//! First-order optimizers and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Scales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn check(param: &Tensor, grad: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(shape_err!(
            "gradient shape {:?} does not match parameter {:?}",
            grad.shape(),
            param.shape()
        ));
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// Updates `params[i]` with `grads[i]`; parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            check(p, g)?;
            let wd = self.weight_decay;
            let data = p.data_mut();
            if self.momentum == 0.0 {
                for (w, &gi) in data.iter_mut().zip(g.data()) {
                    *w -= self.lr * (gi + wd * *w);
                }
                continue;
            }
            let buf = self.buffers[i].get_or_insert_with(Vec::new);
            let first = buf.is_empty();
            if first {
                buf.resize(data.len(), 0.0);
            }
            for ((w, &gi), b) in data.iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let d = gi + wd * *w;
                *b = if first { d } else { self.momentum * *b + d };
                *w -= self.lr * *b;
            }
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            betas,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            ));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            check(p, g)?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let d = gi + self.weight_decay * *w;
                m[j] = b1 * m[j] + (1.0 - b1) * d;
                v[j] = b2 * v[j] + (1.0 - b2) * d * d;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
