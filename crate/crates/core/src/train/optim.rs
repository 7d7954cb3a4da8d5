use std::f64::consts::PI;

use crate::archive::{Archive, Entry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
///
/// Decay applies to matrices and kernels (rank >= 2) only; norms, biases and
/// per-channel scan vectors are left undecayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[Tensor<f32>], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!("optimizer tracks {} tensors, got {} params / {} grads", self.m.len(), params.len(), grads.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.rank() >= 2 { (lr * self.weight_decay) as f32 } else { 0.0 };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if g.len() != m.len() {
                return Err(Error::Shape(format!("gradient {i} has {} values, parameter {}", g.len(), m.len())));
            }
            for (((w, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                *w -= decay * *w;
                *w -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }

    /// Moments and step count as an archive.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.push(Entry::tensor("step", &Tensor::<f64>::scalar(self.step as f64))).expect("fresh archive");
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            a.push(Entry::tensor(format!("m.{i}"), &Tensor::new(&[m.len().max(1)], m.clone()).expect("non-empty"))).expect("unique");
            a.push(Entry::tensor(format!("v.{i}"), &Tensor::new(&[v.len().max(1)], v.clone()).expect("non-empty"))).expect("unique");
        }
        a
    }

    /// Restores state saved by [`AdamW::to_archive`] for the same parameters.
    pub fn load_archive(&mut self, a: &Archive) -> Result<()> {
        let get = |name: &str| a.get(name).ok_or_else(|| Error::Format(format!("optimizer state lacks {name}")));
        let step = get("step")?.to_tensor::<f64>()?.item();
        for i in 0..self.m.len() {
            let m = get(&format!("m.{i}"))?.to_tensor::<f32>()?;
            let v = get(&format!("v.{i}"))?.to_tensor::<f32>()?;
            if m.numel() != self.m[i].len() || v.numel() != self.v[i].len() {
                return Err(Error::Format(format!("optimizer state {i} does not match the model")));
            }
            self.m[i] = m.into_data();
            self.v[i] = v.into_data();
        }
        self.step = step as u64;
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
/// `step` counts from 0.
pub fn lr_at(step: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = (max_norm / (norm + 1e-12)) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
