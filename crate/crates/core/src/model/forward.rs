use std::ops::Range;

use super::config::{Modality, Mode, ModelConfig};
use super::params::{Group, ParamSet};
use crate::autodiff::{Tape, Var};
use crate::data::Note;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{build_prompt, truncate_note, PromptLayout, Vocab};

/// Picture fed to one forward pass.
#[derive(Clone, Debug)]
pub enum ImageInput<S> {
    /// Raw `[P × d_raw]` patches.
    Patches(Tensor<S>),
    /// Precomputed vision features `Z_v` (valid while the encoder is frozen).
    Features(Tensor<S>),
    /// The learned null image.
    Null,
}

/// A note ready for the model: prompt layout(s) and image.
#[derive(Clone, Debug)]
pub struct NoteInput<S> {
    pub layout: PromptLayout,
    pub image: ImageInput<S>,
    /// Prompt with empty text fields; used by the extra omni pass.
    pub image_only_layout: Option<PromptLayout>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Keep attention matrices and their gradients (saliency).
    pub retain_attention: bool,
    /// Record gradients for trainable parameters.
    pub grads: bool,
}

/// Tape handles of every representation produced for one note.
#[derive(Clone, Copy, Debug, Default)]
pub struct RepVars {
    pub v: Option<Var>,
    pub n_v: Option<Var>,
    pub n_m: Option<Var>,
    pub fused_v: Option<Var>,
    pub fused_m: Option<Var>,
    pub out_v: Option<Var>,
    pub out_m: Option<Var>,
    /// Omni image-only and text-only embeddings.
    pub out_img: Option<Var>,
    pub out_txt: Option<Var>,
}

/// Values of [`RepVars`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Representations<S> {
    pub v: Option<Vec<S>>,
    pub n_v: Option<Vec<S>>,
    pub n_m: Option<Vec<S>>,
    pub fused_v: Option<Vec<S>>,
    pub fused_m: Option<Vec<S>>,
    pub out_v: Option<Vec<S>>,
    pub out_m: Option<Vec<S>>,
    pub out_img: Option<Vec<S>>,
    pub out_txt: Option<Vec<S>>,
}

impl<S: Scalar> Representations<S> {
    /// The note embedding used for retrieval.
    pub fn embedding(&self) -> &[S] {
        self.out_m.as_deref().expect("every mode produces out_m")
    }
}

/// Where things sit in the LM input sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceInfo {
    pub len: usize,
    /// Rows holding spliced visual embeddings.
    pub visual: Option<Range<usize>>,
    /// Position of `<IMG_EMB>` in the sequence (mICL prompts).
    pub visual_word: Option<usize>,
    /// Final compressed position.
    pub compressed: usize,
}

/// One note's recorded forward pass.
pub struct NoteGraph<S> {
    pub tape: Tape<S>,
    pub reps: RepVars,
    /// Attention probabilities of the main LM pass, `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
    pub seq: SequenceInfo,
    bound: Vec<Option<Var>>,
}

impl<S: Scalar> NoteGraph<S> {
    pub fn representations(&self) -> Representations<S> {
        let get = |v: Option<Var>| v.map(|v| self.tape.value(v).to_vec());
        let r = &self.reps;
        Representations {
            v: get(r.v),
            n_v: get(r.n_v),
            n_m: get(r.n_m),
            fused_v: get(r.fused_v),
            fused_m: get(r.fused_m),
            out_v: get(r.out_v),
            out_m: get(r.out_m),
            out_img: get(r.out_img),
            out_txt: get(r.out_txt),
        }
    }

    /// Parameter gradients after backward, as `(param index, grad)`.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[S])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.tape.grad(v)).map(|g| (i, g)))
    }
}

struct Ctx<'a, S> {
    tape: Tape<S>,
    params: &'a ParamSet<S>,
    cfg: &'a ModelConfig,
    bound: Vec<Option<Var>>,
    grads: bool,
}

impl<S: Scalar> Ctx<'_, S> {
    fn p(&mut self, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let param = self.params.param(i);
        let frozen = param.group == Group::Vision && self.cfg.freeze_vision;
        let v = self.tape.leaf(&param.value, self.grads && !frozen);
        self.bound[i] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.tape.linear(x, w, Some(b))
    }

    fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.tape.layer_norm(x, g, b)
    }

    fn ffn(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.up"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{name}.down"))
    }

    /// Multi-head attention of `xq` over `xkv`; returns output and the
    /// per-head probability matrices.
    fn attention(
        &mut self,
        name: &str,
        xq: Var,
        xkv: Var,
        heads: usize,
        causal: bool,
        retain: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.linear(xq, &format!("{name}.q"))?;
        let k = self.linear(xkv, &format!("{name}.k"))?;
        let v = self.linear(xkv, &format!("{name}.v"))?;
        let dim = self.tape.shape(q)[1];
        let d = dim / heads;
        let scale = S::one() / S::from_usize(d).unwrap().sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * d, d)?;
            let kh = self.tape.slice_cols(k, h * d, d)?;
            let vh = self.tape.slice_cols(v, h * d, d)?;
            let s = self.tape.matmul_nt_scaled(qh, kh, scale)?;
            let a = if causal {
                self.tape.causal_softmax(s)?
            } else {
                self.tape.softmax(s)?
            };
            if retain {
                self.tape.retain(a);
            }
            probs.push(a);
            outs.push(self.tape.matmul(a, vh)?);
        }
        let o = if heads == 1 {
            outs[0]
        } else {
            self.tape.concat_cols(&outs)?
        };
        Ok((self.linear(o, &format!("{name}.o"))?, probs))
    }

    /// Pre-LN transformer block.
    fn block(
        &mut self,
        name: &str,
        x: Var,
        heads: usize,
        causal: bool,
        retain: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let h = self.layer_norm(x, &format!("{name}.ln1"))?;
        let (a, probs) = self.attention(&format!("{name}.attn"), h, h, heads, causal, retain)?;
        let x = self.tape.add(x, a)?;
        let h = self.layer_norm(x, &format!("{name}.ln2"))?;
        let f = self.ffn(h, &format!("{name}.ffn"))?;
        Ok((self.tape.add(x, f)?, probs))
    }

    fn encode_image(&mut self, patches: &Tensor<S>) -> Result<Var> {
        let want = [self.cfg.patches, self.cfg.d_raw];
        if patches.shape() != want {
            return Err(Error::shape("encode_image", patches.shape(), &want));
        }
        let x = self.tape.constant(patches);
        let x = self.linear(x, "vision.patch")?;
        let cls = self.p("vision.cls");
        let x = self.tape.concat_rows(&[cls, x])?;
        let pos = self.p("vision.pos");
        let mut x = self.tape.add(x, pos)?;
        for i in 0..self.cfg.vision_layers {
            x = self
                .block(
                    &format!("vision.blocks.{i}"),
                    x,
                    self.cfg.vision_heads,
                    false,
                    false,
                )?
                .0;
        }
        self.layer_norm(x, "vision.ln_f")
    }

    fn connect(&mut self, z_v: Var) -> Result<Var> {
        let want = [self.cfg.vision_len(), self.cfg.h_v];
        if self.tape.shape(z_v) != want {
            return Err(Error::shape("connect", self.tape.shape(z_v), &want));
        }
        let heads = self.cfg.connector_heads;
        let mut q = self.p("conn.queries");
        for i in 0..self.cfg.connector_layers {
            let b = format!("conn.blocks.{i}");
            let h = self.layer_norm(q, &format!("{b}.ln_self"))?;
            let (a, _) = self.attention(&format!("{b}.self_attn"), h, h, heads, false, false)?;
            q = self.tape.add(q, a)?;
            let h = self.layer_norm(q, &format!("{b}.ln_cross"))?;
            let (a, _) = self.attention(&format!("{b}.cross_attn"), h, z_v, heads, false, false)?;
            q = self.tape.add(q, a)?;
            let h = self.layer_norm(q, &format!("{b}.ln_ffn"))?;
            let f = self.ffn(h, &format!("{b}.ffn"))?;
            q = self.tape.add(q, f)?;
        }
        let q = self.layer_norm(q, "conn.ln_out")?;
        self.linear(q, "conn.out")
    }

    fn null_rows(&mut self) -> Result<Var> {
        let null = self.p("null_image");
        self.tape.concat_rows(&vec![null; self.cfg.l_c])
    }

    /// Word embeddings with `e_v` spliced over `<IMG>`, plus positions.
    fn assemble(&mut self, e_v: Option<Var>, layout: &PromptLayout) -> Result<Var> {
        let t = layout.len();
        let s = layout.img_slot;
        if s >= t {
            return Err(Error::Layout("layout has no <IMG> slot".into()));
        }
        let len = t - 1 + e_v.map_or(1, |e| self.tape.shape(e)[0]);
        if len > self.cfg.max_positions {
            return Err(Error::Length {
                len,
                max: self.cfg.max_positions,
            });
        }
        let tok = self.p("lm.tok");
        let e_t = self.tape.embedding(tok, &layout.token_ids)?;
        let e_m = match e_v {
            None => e_t,
            Some(e_v) => {
                let mut parts = Vec::with_capacity(3);
                if s > 0 {
                    parts.push(self.tape.slice_rows(e_t, 0, s)?);
                }
                parts.push(e_v);
                if s + 1 < t {
                    parts.push(self.tape.slice_rows(e_t, s + 1, t - s - 1)?);
                }
                self.tape.concat_rows(&parts)?
            }
        };
        let pos = self.p("lm.pos");
        let pos = self.tape.slice_rows(pos, 0, len)?;
        self.tape.add(e_m, pos)
    }

    fn forward_llm(&mut self, e_m: Var, retain: bool) -> Result<(Var, Vec<Vec<Var>>)> {
        let n = self.tape.shape(e_m)[0];
        if n > self.cfg.max_positions {
            return Err(Error::Length {
                len: n,
                max: self.cfg.max_positions,
            });
        }
        let mut x = e_m;
        let mut attn = Vec::with_capacity(self.cfg.lm_layers);
        for i in 0..self.cfg.lm_layers {
            let (y, probs) = self.block(
                &format!("lm.blocks.{i}"),
                x,
                self.cfg.lm_heads,
                true,
                retain,
            )?;
            x = y;
            attn.push(probs);
        }
        Ok((self.layer_norm(x, "lm.ln_f")?, attn))
    }

    fn gate(&mut self, name: &str, v: Var, n: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        gate_fuse(&mut self.tape, v, n, w, b)
    }

    fn project(&mut self, x: Var) -> Result<Var> {
        self.linear(x, "proj")
    }

    /// One LM pass over `layout`; returns `(n_v, n_m, attention, seq)`.
    fn lm_pass(
        &mut self,
        e_v: Option<Var>,
        layout: &PromptLayout,
        retain: bool,
    ) -> Result<(Option<Var>, Var, Vec<Vec<Var>>, SequenceInfo)> {
        let e_m = self.assemble(e_v, layout)?;
        let (h, attn) = self.forward_llm(e_m, retain)?;
        let seq = sequence_info(layout, e_v.map(|_| self.cfg.l_c));
        let n_m = self.tape.slice_rows(h, seq.compressed, 1)?;
        let n_v = match seq.visual_word {
            Some(p) => Some(self.tape.slice_rows(h, p - 1, 1)?),
            None => None,
        };
        Ok((n_v, n_m, attn, seq))
    }
}

/// `z = σ(W[v; n] + b)`, returns `z ⊙ v + (1 − z) ⊙ n`.
///
/// `v` and `n` are `[1 × h]` rows, `w` is `[h × 2h]`.
pub fn gate_fuse<S: Scalar>(tape: &mut Tape<S>, v: Var, n: Var, w: Var, b: Var) -> Result<Var> {
    if tape.shape(v) != tape.shape(n) {
        return Err(Error::shape("gate_fuse", tape.shape(v), tape.shape(n)));
    }
    let vn = tape.concat_cols(&[v, n])?;
    let pre = tape.linear(vn, w, Some(b))?;
    let z = tape.sigmoid(pre);
    let diff = tape.sub(v, n)?;
    let step = tape.mul(z, diff)?;
    tape.add(n, step)
}

/// Positions in the LM input for `layout` when `l_c` visual rows replace
/// `<IMG>` (or none when the image is not spliced).
pub fn sequence_info(layout: &PromptLayout, l_c: Option<usize>) -> SequenceInfo {
    let shift = l_c.map_or(0, |l| l - 1);
    let at = |p: usize| if p > layout.img_slot { p + shift } else { p };
    SequenceInfo {
        len: layout.len() + shift,
        visual: l_c.map(|l| layout.img_slot..layout.img_slot + l),
        visual_word: layout.img_emb_pos.map(at),
        compressed: at(layout.compressed_pos()),
    }
}

/// The toy MLRM: parameters plus architecture.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamSet::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    fn ctx(&self, grads: bool) -> Ctx<'_, S> {
        Ctx {
            tape: Tape::new(),
            params: &self.params,
            cfg: &self.config,
            bound: vec![None; self.params.len()],
            grads,
        }
    }

    /// Converts a note's image to a patch tensor.
    pub fn image_tensor(&self, note: &Note) -> Result<Tensor<S>> {
        let want = [self.config.patches, self.config.d_raw];
        let rows = note.image.len();
        let cols = note.image.first().map_or(0, Vec::len);
        if rows != want[0] || note.image.iter().any(|r| r.len() != want[1]) {
            return Err(Error::shape("note image", &[rows, cols], &want));
        }
        let data = note.image.iter().flatten().map(|&x| S::lit(x)).collect();
        Tensor::new(want.to_vec(), data)
    }

    /// Builds the model input for `note` under `modality`.
    pub fn prepare(&self, note: &Note, vocab: &Vocab, modality: Modality) -> Result<NoteInput<S>> {
        let note = truncate_note(note);
        let kind = self.mode().prompt_kind();
        let text_note = match modality {
            Modality::ImageOnly => note.image_only(),
            _ => note.clone(),
        };
        let layout = build_prompt(kind, &text_note, vocab)?;
        let image = match modality {
            Modality::TextOnly => ImageInput::Null,
            _ => ImageInput::Patches(self.image_tensor(&note)?),
        };
        let image_only_layout = if self.mode() == Mode::Omni && modality == Modality::Multimodal {
            Some(build_prompt(kind, &note.image_only(), vocab)?)
        } else {
            None
        };
        Ok(NoteInput {
            layout,
            image,
            image_only_layout,
        })
    }

    /// Vision features `Z_v` for raw patches, outside any training graph.
    pub fn encode_image(&self, patches: &Tensor<S>) -> Result<Tensor<S>> {
        let mut ctx = self.ctx(false);
        let z = ctx.encode_image(patches)?;
        Ok(ctx.tape.tensor(z))
    }

    /// Connector output `E_v` for given vision features.
    pub fn connect(&self, z_v: &Tensor<S>) -> Result<Tensor<S>> {
        let mut ctx = self.ctx(false);
        let z = ctx.tape.constant(z_v);
        let e = ctx.connect(z)?;
        Ok(ctx.tape.tensor(e))
    }

    /// Spliced LM input `E_m` (positions included).
    pub fn assemble(&self, e_v: Option<&Tensor<S>>, layout: &PromptLayout) -> Result<Tensor<S>> {
        let mut ctx = self.ctx(false);
        let e = e_v.map(|t| ctx.tape.constant(t));
        let m = ctx.assemble(e, layout)?;
        Ok(ctx.tape.tensor(m))
    }

    /// Causal LM hidden states `H` for an assembled sequence.
    pub fn forward_llm(&self, e_m: &Tensor<S>) -> Result<Tensor<S>> {
        let mut ctx = self.ctx(false);
        let e = ctx.tape.constant(e_m);
        let (h, _) = ctx.forward_llm(e, false)?;
        Ok(ctx.tape.tensor(h))
    }

    /// Records the full per-mode pipeline for one note.
    pub fn forward(&self, input: &NoteInput<S>, opts: ForwardOptions) -> Result<NoteGraph<S>> {
        input.layout.validate_shape()?;
        let mode = self.mode();
        let mut ctx = self.ctx(opts.grads);
        let z_v = match &input.image {
            ImageInput::Patches(p) => Some(ctx.encode_image(p)?),
            ImageInput::Features(z) => Some(ctx.tape.constant(z)),
            ImageInput::Null => None,
        };

        let mut reps = RepVars::default();
        if mode.late_fusion() {
            reps.v = Some(match z_v {
                Some(z) => {
                    let cls = ctx.tape.slice_rows(z, 0, 1)?;
                    ctx.linear(cls, "vis_proj")?
                }
                None => ctx.p("null_image"),
            });
        }
        let e_v = if mode.splices_image() {
            Some(match z_v {
                Some(z) => ctx.connect(z)?,
                None => ctx.null_rows()?,
            })
        } else {
            None
        };

        let (n_v, n_m, attention, seq) = ctx.lm_pass(e_v, &input.layout, opts.retain_attention)?;
        reps.n_m = Some(n_m);
        if mode.visual_embedding() {
            reps.n_v = Some(n_v.ok_or_else(|| {
                Error::Mode(format!("{mode} needs an mICL prompt with <IMG_EMB>"))
            })?);
        }

        match mode {
            Mode::Basic => {
                reps.out_m = Some(ctx.project(n_m)?);
            }
            Mode::Micl => {
                reps.out_v = Some(ctx.project(reps.n_v.unwrap())?);
                reps.out_m = Some(ctx.project(n_m)?);
            }
            Mode::LateFusion | Mode::OnlyLateFusion => {
                let fused = ctx.gate("gate_m", reps.v.unwrap(), n_m)?;
                reps.fused_m = Some(fused);
                reps.out_m = Some(ctx.project(fused)?);
            }
            Mode::Notellm2 => {
                let v = reps.v.unwrap();
                let fv = ctx.gate("gate_v", v, reps.n_v.unwrap())?;
                let fm = ctx.gate("gate_m", v, n_m)?;
                reps.fused_v = Some(fv);
                reps.fused_m = Some(fm);
                reps.out_v = Some(ctx.project(fv)?);
                reps.out_m = Some(ctx.project(fm)?);
            }
            Mode::Omni => {
                reps.out_m = Some(ctx.project(n_m)?);
                if let Some(img_layout) = &input.image_only_layout {
                    let (_, n_img, _, _) = ctx.lm_pass(e_v, img_layout, false)?;
                    reps.out_img = Some(ctx.project(n_img)?);
                    let null = ctx.null_rows()?;
                    let (_, n_txt, _, _) = ctx.lm_pass(Some(null), &input.layout, false)?;
                    reps.out_txt = Some(ctx.project(n_txt)?);
                }
            }
        }

        Ok(NoteGraph {
            tape: ctx.tape,
            reps,
            attention,
            seq,
            bound: ctx.bound,
        })
    }

    /// Representations without recording gradients.
    pub fn embed(&self, input: &NoteInput<S>) -> Result<Representations<S>> {
        Ok(self
            .forward(input, ForwardOptions::default())?
            .representations())
    }

    /// Truncates, prompts and embeds `note` under `modality`.
    pub fn embed_note(
        &self,
        note: &Note,
        vocab: &Vocab,
        modality: Modality,
    ) -> Result<Representations<S>> {
        let input = self.prepare(note, vocab, modality)?;
        self.embed(&input)
    }
}

impl PromptLayout {
    fn validate_shape(&self) -> Result<()> {
        if self.img_slot >= self.len() {
            return Err(Error::Layout("layout has no <IMG> slot".into()));
        }
        if let Some(p) = self.img_emb_pos {
            if p <= self.img_slot || p >= self.len() {
                return Err(Error::Layout("misplaced <IMG_EMB>".into()));
            }
        }
        Ok(())
    }
}
