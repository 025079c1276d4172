//! The toy multimodal representation model.
//!
//! Pipeline per note: a small bidirectional vision encoder produces `Z_v`
//! (`[CLS]` first), a Q-Former-style connector maps it to `L_c` visual
//! embeddings `E_v`, which replace the `<IMG>` token of the prompt. A causal
//! transformer LM reads the spliced sequence; the hidden state at the last
//! position is the multimodal note embedding and, for mICL prompts, the state
//! just before `<IMG_EMB>` is the visual note embedding. Late-fusion modes gate
//! the projected `[CLS]` summary into those embeddings before the shared
//! output projector.

mod config;
mod forward;
mod params;

pub use config::{Modality, Mode, ModelConfig};
pub use forward::{
    gate_fuse, sequence_info, ForwardOptions, ImageInput, Model, NoteGraph, NoteInput, RepVars,
    Representations, SequenceInfo,
};
pub use params::{Group, Param, ParamSet};
