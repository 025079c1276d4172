//! Attention saliency and how information reaches the compressed word.
//!
//! For layer `l`, `I_l = Σ_h |A_{h,l} ⊙ ∂L/∂A_{h,l}|`. Its entries are then
//! averaged over three position sets of the causal sequence:
//! * `P_v`: the compressed position reading visual rows,
//! * `P_t`: the compressed position reading earlier text rows,
//! * `P_o`: every other strictly-lower-triangular entry.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Mode, Model, NoteGraph, NoteInput, SequenceInfo};
use crate::scalar::Scalar;
use crate::train::{batch_pass, LossConfig};

/// Index sets of one sequence, as `(row, column)` entries of `I_l`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionSets {
    pub len: usize,
    pub compressed: usize,
    /// Whether the visual compressed word counts as a visual position.
    pub folded: bool,
    pub p_v: Vec<(usize, usize)>,
    pub p_t: Vec<(usize, usize)>,
    pub p_o: Vec<(usize, usize)>,
}

/// Partitions the strict lower triangle of a `seq.len`-long sequence.
///
/// With `fold`, the `<IMG_EMB>` position joins the visual rows.
pub fn position_sets(seq: &SequenceInfo, fold: bool) -> PositionSets {
    let c = seq.compressed;
    let mut visual = vec![false; seq.len];
    if let Some(r) = &seq.visual {
        for j in r.clone() {
            visual[j] = true;
        }
    }
    let folded = fold && seq.visual_word.is_some();
    if folded {
        visual[seq.visual_word.unwrap()] = true;
    }
    let (mut p_v, mut p_t, mut p_o) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..seq.len {
        for j in 0..i {
            if i == c && visual[j] {
                p_v.push((i, j));
            } else if i == c {
                p_t.push((i, j));
            } else {
                p_o.push((i, j));
            }
        }
    }
    PositionSets {
        len: seq.len,
        compressed: c,
        folded,
        p_v,
        p_t,
        p_o,
    }
}

/// Flow scores of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub s_v: f64,
    pub s_t: f64,
    pub s_o: f64,
}

impl Flow {
    /// `(S_v, S_t, S_o) / (S_v + S_t + S_o)`; all zero when the total is.
    pub fn shares(&self) -> [f64; 3] {
        let total = self.s_v + self.s_t + self.s_o;
        if total == 0.0 {
            return [0.0; 3];
        }
        [self.s_v / total, self.s_t / total, self.s_o / total]
    }
}

/// `I_l` for every layer of a graph recorded with retained attention and
/// backpropagated loss; row-major `len × len`.
pub fn saliency_matrices<S: Scalar>(graph: &NoteGraph<S>) -> Result<Vec<Vec<f64>>> {
    if graph.attention.is_empty() {
        return Err(Error::Contract(
            "attention was not retained in this forward pass".into(),
        ));
    }
    let mut out = Vec::with_capacity(graph.attention.len());
    for heads in &graph.attention {
        let mut acc = vec![0.0; graph.seq.len * graph.seq.len];
        for &a in heads {
            let g = graph.tape.grad(a).ok_or_else(|| {
                Error::Contract("attention has no gradient; run backward first".into())
            })?;
            let v = graph.tape.value(a);
            if v.len() != acc.len() {
                return Err(Error::shape("saliency", &[v.len()], &[acc.len()]));
            }
            for ((s, &x), &dx) in acc.iter_mut().zip(v).zip(g) {
                *s += (x * dx).as_f64().abs();
            }
        }
        out.push(acc);
    }
    Ok(out)
}

fn mean_over(i_l: &[f64], len: usize, set: &[(usize, usize)], name: &'static str) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySet(name));
    }
    let mut vals: Vec<f64> = set.iter().map(|&(i, j)| i_l[i * len + j]).collect();
    Ok(sorted_sum(&mut vals) / set.len() as f64)
}

/// Sum in ascending order, so the result does not depend on input order.
fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum()
}

/// Mean saliency of one layer over each position set.
pub fn decompose(i_l: &[f64], sets: &PositionSets) -> Result<Flow> {
    if i_l.len() != sets.len * sets.len {
        return Err(Error::shape(
            "decompose",
            &[i_l.len()],
            &[sets.len, sets.len],
        ));
    }
    Ok(Flow {
        s_v: mean_over(i_l, sets.len, &sets.p_v, "P_v")?,
        s_t: mean_over(i_l, sets.len, &sets.p_t, "P_t")?,
        s_o: mean_over(i_l, sets.len, &sets.p_o, "P_o")?,
    })
}

/// Whether `mode` treats the `<IMG_EMB>` word as visual.
pub fn folds_visual_word(mode: Mode) -> bool {
    mode.prompt_kind() == crate::text::PromptKind::Micl
}

/// Per-layer flows of one note.
pub fn note_flows<S: Scalar>(graph: &NoteGraph<S>, mode: Mode) -> Result<Vec<Flow>> {
    let sets = position_sets(&graph.seq, folds_visual_word(mode));
    saliency_matrices(graph)?
        .iter()
        .map(|i_l| decompose(i_l, &sets))
        .collect()
}

/// Per-layer flows of a batch, averaged over its notes.
pub fn batch_flows<S: Scalar>(
    model: &Model<S>,
    tau: S,
    inputs: &[&NoteInput<S>],
    partner: &[usize],
    loss: &LossConfig,
) -> Result<Vec<Flow>> {
    let opts = ForwardOptions {
        retain_attention: true,
        grads: true,
    };
    let pass = batch_pass(model, tau, inputs, partner, loss, opts)?;
    let per_note = pass
        .graphs
        .iter()
        .map(|g| note_flows(g, model.mode()))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_flows(&per_note))
}

/// Elementwise mean of equally long per-layer flow lists.
pub fn mean_flows(items: &[Vec<Flow>]) -> Vec<Flow> {
    let layers = items.first().map_or(0, Vec::len);
    (0..layers)
        .map(|l| {
            let col = |f: fn(&Flow) -> f64| {
                let mut v: Vec<f64> = items.iter().map(|x| f(&x[l])).collect();
                sorted_sum(&mut v) / items.len() as f64
            };
            Flow {
                s_v: col(|f| f.s_v),
                s_t: col(|f| f.s_t),
                s_o: col(|f| f.s_o),
            }
        })
        .collect()
}

/// One line of the saliency report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub s_v: f64,
    pub s_t: f64,
    pub s_o: f64,
    pub share_v: f64,
    pub share_t: f64,
    pub share_o: f64,
}

/// Saliency averaged over analysed batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub mode: Mode,
    pub folded_visual_word: bool,
    pub batches: usize,
    pub notes: usize,
    pub layers: Vec<LayerRow>,
}

impl SaliencyReport {
    /// Averages per-batch flows (each already a per-note mean).
    pub fn from_batches(mode: Mode, batches: &[Vec<Flow>], notes: usize) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::Contract(
                "saliency report needs at least one batch".into(),
            ));
        }
        let layers = mean_flows(batches)
            .into_iter()
            .enumerate()
            .map(|(layer, f)| {
                let [share_v, share_t, share_o] = f.shares();
                LayerRow {
                    layer,
                    s_v: f.s_v,
                    s_t: f.s_t,
                    s_o: f.s_o,
                    share_v,
                    share_t,
                    share_o,
                }
            })
            .collect();
        Ok(SaliencyReport {
            mode,
            folded_visual_word: folds_visual_word(mode),
            batches: batches.len(),
            notes,
            layers,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,S_v,S_t,S_o,share_v,share_t,share_o\n");
        for r in &self.layers {
            writeln!(
                s,
                "{},{:e},{:e},{:e},{},{},{}",
                r.layer, r.s_v, r.s_t, r.s_o, r.share_v, r.share_t, r.share_o
            )
            .unwrap();
        }
        s
    }
}
