use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::{ModelParams, Tensor};

/// `peak · min(step/warmup, sqrt(warmup/step))`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// `ema ← decay·ema + (1−decay)·w` for every tensor of `ema`.
pub fn ema_update(ema: &mut ModelParams, current: &ModelParams, decay: f64) -> Result<()> {
    for name in ema.names().map(String::from).collect::<Vec<_>>() {
        let w = current.get(&name).ok_or_else(|| {
            Error::dim("ema_update", format!("{name} missing from current weights"))
        })?;
        let e = ema.get_mut(&name).unwrap();
        if e.shape() != w.shape() {
            return Err(Error::dim(
                "ema_update",
                format!("{name}: {:?} vs {:?}", e.shape(), w.shape()),
            ));
        }
        let (a, b) = (decay as f32, (1.0 - decay) as f32);
        for (x, &y) in e.data_mut().iter_mut().zip(w.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(String, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.sum_squares())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(c);
        }
    }
    norm
}

pub fn global_norm(grads: &[(String, Tensor<f32>)]) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.sum_squares())
        .sum::<f64>()
        .sqrt()
}

/// Adam with bias correction; moments are created lazily per parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: IndexMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.98, 1e-9)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[(String, Tensor<f32>)],
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::arg(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("{name}: {:?} vs {:?}", p.shape(), g.shape()),
                ));
            }
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= step * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}
