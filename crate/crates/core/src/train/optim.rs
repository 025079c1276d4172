use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
}

impl Default for OptimConfig {
    /// Desk-scale profile.
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            max_grad_norm: 1.0,
            peak_lr: 3e-4,
            warmup_ratio: 0.1,
            steps: 500,
        }
    }
}

impl OptimConfig {
    /// Hyper-parameters used for fine-tuning 7B backbones; too timid for the
    /// toy model but kept for reference.
    pub fn paper() -> Self {
        OptimConfig {
            peak_lr: 3e-6,
            ..Default::default()
        }
    }

    /// `"desk"` or `"paper"`.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown optimizer profile {other:?}; valid: desk, paper"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.beta1)
            || !open(self.beta2)
            || !(self.eps > 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.max_grad_norm > 0.0)
            || !(self.peak_lr >= 0.0)
            || !(0.0..1.0).contains(&self.warmup_ratio)
            || self.steps == 0
        {
            return Err(Error::Config(format!("invalid optimizer config {self:?}")));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.steps as f64).round() as usize
    }

    /// Linear warmup to `peak_lr`, then linear decay to zero at `steps`.
    pub fn lr(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step <= w {
            if w == 0 {
                self.peak_lr
            } else {
                self.peak_lr * step as f64 / w as f64
            }
        } else if step >= self.steps {
            0.0
        } else {
            self.peak_lr * (self.steps - step) as f64 / (self.steps - w) as f64
        }
    }
}

/// One AdamW update of a parameter tensor.
///
/// `t` is the 1-based step used for bias correction. Weight decay is
/// decoupled: the parameter shrinks by `lr·wd` before the adaptive step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<S: Scalar>(
    p: &mut [S],
    g: &[S],
    m: &mut [S],
    v: &mut [S],
    t: usize,
    lr: f64,
    cfg: &OptimConfig,
    decay: bool,
) {
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let one = S::one();
    let c1 = one - S::lit(cfg.beta1.powi(t as i32));
    let c2 = one - S::lit(cfg.beta2.powi(t as i32));
    let lr = S::lit(lr);
    let eps = S::lit(cfg.eps);
    let shrink = if decay {
        one - lr * S::lit(cfg.weight_decay)
    } else {
        one
    };
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] = p[i] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [&mut [S]], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * c;
            }
        }
    }
    norm
}
