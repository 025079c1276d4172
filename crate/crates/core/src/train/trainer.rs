use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::loss::{variant_loss, BatchEmbeddings, LossConfig};
use super::optim::{adamw_update, clip_global_norm};
use crate::autodiff::{Tape, Var};
use crate::data::{make_batches, Batch, BatchStream, Note, NoteId, Pair};
use crate::error::{Error, Result};
use crate::model::{
    ForwardOptions, Group, ImageInput, Modality, Model, NoteGraph, NoteInput, RepVars,
};
use crate::scalar::Scalar;
use crate::text::Vocab;

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub model: Model<S>,
    /// Log-scale of the contrastive temperature.
    pub tau: S,
    /// First and second AdamW moments, one buffer per parameter.
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub m_tau: S,
    pub v_tau: S,
    /// Completed optimizer steps.
    pub step: usize,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: Model<S>, tau_init: f64) -> Self {
        let zeros: Vec<Vec<S>> = model
            .params
            .iter()
            .map(|p| vec![S::zero(); p.value.len()])
            .collect();
        TrainState {
            model,
            tau: S::lit(tau_init),
            m: zeros.clone(),
            v: zeros,
            m_tau: S::zero(),
            v_tau: S::zero(),
            step: 0,
        }
    }

    /// Whether parameter `i` receives updates.
    pub fn trainable(&self, i: usize) -> bool {
        !(self.model.config.freeze_vision && self.model.params.param(i).group == Group::Vision)
    }
}

/// Forward graphs of a batch after the loss has been backpropagated.
pub struct BatchPass<S> {
    pub graphs: Vec<NoteGraph<S>>,
    pub loss: S,
    pub tau_grad: S,
}

impl<S: Scalar> BatchPass<S> {
    /// Sum of parameter gradients over the batch, in note order.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Vec<S>>> {
        let mut out: Vec<Option<Vec<S>>> = vec![None; n_params];
        for g in &self.graphs {
            for (i, grad) in g.param_grads() {
                match &mut out[i] {
                    Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(grad.to_vec()),
                }
            }
        }
        out
    }
}

fn pick(r: &RepVars, k: usize) -> Option<Var> {
    [r.out_v, r.out_m, r.out_img, r.out_txt][k]
}

/// Runs every note of a batch, evaluates the variant loss on a separate
/// tape and pushes its gradient back into each note's graph.
pub fn batch_pass<S: Scalar>(
    model: &Model<S>,
    tau: S,
    inputs: &[&NoteInput<S>],
    partner: &[usize],
    loss_cfg: &LossConfig,
    opts: ForwardOptions,
) -> Result<BatchPass<S>> {
    let mut graphs = inputs
        .iter()
        .map(|inp| model.forward(inp, opts))
        .collect::<Result<Vec<_>>>()?;

    let mut tape = Tape::new();
    let mut stacked: [Option<Var>; 4] = [None; 4];
    for (k, slot) in stacked.iter_mut().enumerate() {
        let present = graphs.iter().filter(|g| pick(&g.reps, k).is_some()).count();
        if present == 0 {
            continue;
        }
        if present != graphs.len() {
            return Err(Error::Mode(
                "notes of one batch produced different representations".into(),
            ));
        }
        let mut data = Vec::new();
        let mut d = 0;
        for g in &graphs {
            let v = g.tape.value(pick(&g.reps, k).unwrap());
            d = v.len();
            data.extend_from_slice(v);
        }
        *slot = Some(tape.input(&[graphs.len(), d], data, true)?);
    }
    let emb = BatchEmbeddings {
        out_v: stacked[0],
        out_m: stacked[1],
        out_img: stacked[2],
        out_txt: stacked[3],
    };
    let tau_var = tape.input(&[1], vec![tau], true)?;
    let loss = variant_loss(&mut tape, &emb, model.mode(), partner, tau_var, loss_cfg)?;
    if let Err(e) = tape.ensure_finite(loss) {
        // Prefer pointing at the first note graph that went non-finite.
        for g in &graphs {
            if let Some((node, op)) = g.tape.first_non_finite() {
                return Err(Error::NonFinite {
                    node: node.id(),
                    op,
                });
            }
        }
        return Err(e);
    }
    tape.backward(loss)?;

    for (i, g) in graphs.iter_mut().enumerate() {
        let mut seeds = Vec::new();
        for (k, s) in stacked.iter().enumerate() {
            if let (Some(s), Some(v)) = (s, pick(&g.reps, k)) {
                let grad = tape.grad(*s).expect("stacked embeddings require grad");
                let d = grad.len() / inputs.len();
                seeds.push((v, grad[i * d..(i + 1) * d].to_vec()));
            }
        }
        g.tape.backward_seeded(&seeds)?;
    }
    Ok(BatchPass {
        graphs,
        loss: tape.value(loss)[0],
        tau_grad: tape.grad(tau_var).map_or(S::zero(), |g| g[0]),
    })
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
}

/// Drives training over a pair list.
pub struct Trainer<S> {
    pub state: TrainState<S>,
    pub config: RunConfig,
    pub vocab: Vocab,
    notes: HashMap<NoteId, Note>,
    cache: HashMap<NoteId, NoteInput<S>>,
    stream: BatchStream,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh run; the model vocabulary size is taken from `vocab`.
    pub fn new(
        mut config: RunConfig,
        notes: Vec<Note>,
        pairs: &[Pair],
        vocab: Vocab,
    ) -> Result<Self> {
        config.model.vocab_size = vocab.len();
        config.validate()?;
        let model = Model::new(config.model.clone(), config.init_seed())?;
        let state = TrainState::new(model, config.loss.tau_init);
        Self::from_state(state, config, notes, pairs, vocab)
    }

    /// Continues from `state`, replaying the batch stream up to `state.step`.
    pub fn from_state(
        state: TrainState<S>,
        config: RunConfig,
        notes: Vec<Note>,
        pairs: &[Pair],
        vocab: Vocab,
    ) -> Result<Self> {
        config.validate()?;
        if state.model.config != config.model {
            return Err(Error::Config(
                "model config does not match the training state".into(),
            ));
        }
        if config.model.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model expects {} tokens but the vocabulary has {}",
                config.model.vocab_size,
                vocab.len()
            )));
        }
        let notes: HashMap<NoteId, Note> = notes.into_iter().map(|n| (n.id, n)).collect();
        if let Some(p) = pairs
            .iter()
            .find(|p| !notes.contains_key(&p.query) || !notes.contains_key(&p.related))
        {
            return Err(Error::Data(format!(
                "pair ({}, {}) references an unknown note",
                p.query, p.related
            )));
        }
        let mut stream = make_batches(pairs, config.data.batch_size, config.batch_seed())?;
        for _ in 0..state.step {
            stream.next_batch()?;
        }
        Ok(Trainer {
            state,
            config,
            vocab,
            notes,
            cache: HashMap::new(),
            stream,
        })
    }

    fn ensure_input(&mut self, id: NoteId) -> Result<()> {
        if self.cache.contains_key(&id) {
            return Ok(());
        }
        let model = &self.state.model;
        let note = self
            .notes
            .get(&id)
            .ok_or_else(|| Error::Data(format!("unknown note {id}")))?;
        let mut input = model.prepare(note, &self.vocab, Modality::Multimodal)?;
        if model.config.freeze_vision {
            if let ImageInput::Patches(p) = &input.image {
                input.image = ImageInput::Features(model.encode_image(p)?);
            }
        }
        self.cache.insert(id, input);
        Ok(())
    }

    /// Forward and backward over `batch` with the current parameters.
    pub fn pass(&mut self, batch: &Batch, opts: ForwardOptions) -> Result<BatchPass<S>> {
        for &id in &batch.notes {
            self.ensure_input(id)?;
        }
        let inputs: Vec<&NoteInput<S>> = batch.notes.iter().map(|id| &self.cache[id]).collect();
        batch_pass(
            &self.state.model,
            self.state.tau,
            &inputs,
            &batch.partner,
            &self.config.loss,
            opts,
        )
    }

    /// Loss of `batch` under the current parameters, without updating.
    pub fn batch_loss(&mut self, batch: &Batch) -> Result<S> {
        Ok(self.pass(batch, ForwardOptions::default())?.loss)
    }

    /// The batch the next call to [`Trainer::step`] will consume.
    pub fn peek_batch(&self) -> Result<Batch> {
        self.stream.clone().next_batch()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.stream.next_batch()?;
        let opts = ForwardOptions {
            grads: true,
            retain_attention: false,
        };
        let pass = self.pass(&batch, opts)?;
        let n = self.state.model.params.len();
        let mut grads = pass.param_grads(n);
        let mut tau_grad = [pass.tau_grad];
        let loss = pass.loss;
        drop(pass);

        for (i, g) in grads.iter_mut().enumerate() {
            if !self.state.trainable(i) {
                *g = None;
            }
        }
        let mut views: Vec<&mut [S]> = grads
            .iter_mut()
            .flatten()
            .map(|g| g.as_mut_slice())
            .collect();
        views.push(&mut tau_grad);
        let grad_norm = clip_global_norm(&mut views, self.config.optim.max_grad_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                node: 0,
                op: "gradient norm",
            });
        }

        let t = self.state.step + 1;
        let lr = self.config.optim.lr(t);
        let optim = &self.config.optim;
        let st = &mut self.state;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let param = st.model.params.param_mut(i);
            let decay = param.decays();
            adamw_update(
                param.value.values_mut(),
                g,
                &mut st.m[i],
                &mut st.v[i],
                t,
                lr,
                optim,
                decay,
            );
        }
        let mut tau = [st.tau];
        let (mut mt, mut vt) = ([st.m_tau], [st.v_tau]);
        adamw_update(&mut tau, &tau_grad, &mut mt, &mut vt, t, lr, optim, false);
        st.tau = tau[0];
        st.m_tau = mt[0];
        st.v_tau = vt[0];
        st.step = t;

        Ok(StepMetrics {
            step: t,
            loss: loss.as_f64(),
            lr,
            tau: st.tau.as_f64(),
            grad_norm,
        })
    }
}
