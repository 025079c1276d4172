use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the multimodal term relative to the visual term.
    pub alpha: f64,
    /// Initial log-scale of the shared learnable temperature.
    pub tau_init: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 9.0,
            tau_init: 3.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !self.tau_init.is_finite() {
            return Err(Error::Config(format!(
                "loss config needs alpha > 0 and finite tau_init, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// In-batch contrastive loss of `emb` (`2B × d`) with cosine similarity
/// scaled by `e^τ`; `tau` is a one-element node.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    emb: Var,
    partner: &[usize],
    tau: Var,
) -> Result<Var> {
    cross_contrastive_loss(tape, emb, emb, partner, tau)
}

/// Contrastive loss with anchors from `x` and candidates from `y`: row `i`
/// has positive `y[partner(i)]` and negatives `y[j]`, `j ∉ {i, partner(i)}`.
/// With `x == y` this is the ordinary in-batch loss.
pub fn cross_contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    y: Var,
    partner: &[usize],
    tau: Var,
) -> Result<Var> {
    let xn = tape.normalize_rows(x)?;
    let yn = if x == y { xn } else { tape.normalize_rows(y)? };
    let sims = tape.matmul_nt(xn, yn)?;
    let scale = tape.exp(tau);
    let logits = tape.scale_by(sims, scale)?;
    tape.contrastive(logits, partner)
}

/// `(L_v + α·L_m) / (1 + α)` as plain numbers.
pub fn final_loss(l_v: f64, l_m: f64, alpha: f64) -> f64 {
    (l_v + alpha * l_m) / (1.0 + alpha)
}

fn final_loss_node<S: Scalar>(tape: &mut Tape<S>, l_v: Var, l_m: Var, alpha: f64) -> Result<Var> {
    let a = tape.scale(l_v, S::lit(1.0 / (1.0 + alpha)));
    let b = tape.scale(l_m, S::lit(alpha / (1.0 + alpha)));
    tape.add(a, b)
}

/// Stacked `2B × d` embeddings of a batch, as nodes of the loss tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchEmbeddings {
    pub out_v: Option<Var>,
    pub out_m: Option<Var>,
    pub out_img: Option<Var>,
    pub out_txt: Option<Var>,
}

fn need(v: Option<Var>, what: &str, mode: Mode) -> Result<Var> {
    v.ok_or_else(|| Error::Mode(format!("{mode} loss needs {what} embeddings")))
}

/// The training objective of `mode`.
pub fn variant_loss<S: Scalar>(
    tape: &mut Tape<S>,
    emb: &BatchEmbeddings,
    mode: Mode,
    partner: &[usize],
    tau: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let m = need(emb.out_m, "multimodal", mode)?;
    match mode {
        Mode::Basic | Mode::LateFusion | Mode::OnlyLateFusion => {
            contrastive_loss(tape, m, partner, tau)
        }
        Mode::Micl | Mode::Notellm2 => {
            let v = need(emb.out_v, "visual", mode)?;
            let l_v = contrastive_loss(tape, v, partner, tau)?;
            let l_m = contrastive_loss(tape, m, partner, tau)?;
            final_loss_node(tape, l_v, l_m, cfg.alpha)
        }
        Mode::Omni => {
            let img = need(emb.out_img, "image-only", mode)?;
            let txt = need(emb.out_txt, "text-only", mode)?;
            let mut terms = Vec::with_capacity(6);
            for e in [img, txt, m] {
                terms.push(contrastive_loss(tape, e, partner, tau)?);
            }
            for (a, b) in [(img, txt), (img, m), (txt, m)] {
                let ab = cross_contrastive_loss(tape, a, b, partner, tau)?;
                let ba = cross_contrastive_loss(tape, b, a, partner, tau)?;
                let s = tape.add(ab, ba)?;
                terms.push(tape.scale(s, S::lit(0.5)));
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t)?;
            }
            Ok(tape.scale(total, S::lit(1.0 / 6.0)))
        }
    }
}
