use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{PromptKind, RESERVED};

/// Training/evaluation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Basic,
    Micl,
    LateFusion,
    Notellm2,
    OnlyLateFusion,
    Omni,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Basic,
        Mode::Micl,
        Mode::LateFusion,
        Mode::Notellm2,
        Mode::OnlyLateFusion,
        Mode::Omni,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Basic => "basic",
            Mode::Micl => "micl",
            Mode::LateFusion => "late_fusion",
            Mode::Notellm2 => "notellm2",
            Mode::OnlyLateFusion => "only_late_fusion",
            Mode::Omni => "omni",
        }
    }

    pub fn prompt_kind(self) -> PromptKind {
        match self {
            Mode::Micl | Mode::Notellm2 | Mode::Omni => PromptKind::Micl,
            Mode::Basic | Mode::LateFusion | Mode::OnlyLateFusion => PromptKind::Basic,
        }
    }

    /// Whether connector outputs replace the `<IMG>` token before the LM.
    pub fn splices_image(self) -> bool {
        self != Mode::OnlyLateFusion
    }

    /// Whether the `[CLS]` summary is gated into the LM embeddings.
    pub fn late_fusion(self) -> bool {
        matches!(
            self,
            Mode::LateFusion | Mode::Notellm2 | Mode::OnlyLateFusion
        )
    }

    /// Whether a visual note embedding is trained alongside the multimodal one.
    pub fn visual_embedding(self) -> bool {
        matches!(self, Mode::Micl | Mode::Notellm2)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Which inputs feed an embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Image with empty text fields.
    ImageOnly,
    /// Text with the learned null image in place of the picture.
    TextOnly,
    Multimodal,
}

impl Modality {
    pub const ALL: [Modality; 3] = [
        Modality::ImageOnly,
        Modality::TextOnly,
        Modality::Multimodal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::ImageOnly => "image",
            Modality::TextOnly => "text",
            Modality::Multimodal => "multimodal",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" | "image_only" => Ok(Modality::ImageOnly),
            "text" | "text_only" => Ok(Modality::TextOnly),
            "multimodal" | "mm" => Ok(Modality::Multimodal),
            _ => Err(Error::Config(format!(
                "unknown modality {s:?}; expected image, text or multimodal"
            ))),
        }
    }
}

/// Architecture dimensions of the toy MLRM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Vision (and connector) hidden size.
    pub h_v: usize,
    /// LM hidden size.
    pub h_t: usize,
    /// Image patches; the vision sequence is `patches + 1` with `[CLS]`.
    pub patches: usize,
    /// Raw features per patch.
    pub d_raw: usize,
    /// Connector query count.
    pub l_c: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub connector_layers: usize,
    pub connector_heads: usize,
    /// Feed-forward width as a multiple of the hidden size.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub out_dim: usize,
    pub freeze_vision: bool,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h_v: 64,
            h_t: 64,
            patches: 16,
            d_raw: 32,
            l_c: 16,
            lm_layers: 2,
            lm_heads: 4,
            vision_layers: 2,
            vision_heads: 4,
            connector_layers: 2,
            connector_heads: 4,
            ffn_mult: 2,
            vocab_size: 0,
            max_positions: 320,
            out_dim: 64,
            freeze_vision: true,
            mode: Mode::Notellm2,
        }
    }
}

impl ModelConfig {
    /// Vision sequence length `L` (patches plus `[CLS]`).
    pub fn vision_len(&self) -> usize {
        self.patches + 1
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(
            self.h_t > 0 && self.h_v > 0,
            "hidden sizes must be positive",
        )?;
        check(
            self.lm_heads > 0 && self.h_t % self.lm_heads == 0,
            "h_t must be divisible by lm_heads",
        )?;
        check(
            self.vision_heads > 0 && self.h_v % self.vision_heads == 0,
            "h_v must be divisible by vision_heads",
        )?;
        check(
            self.connector_heads > 0 && self.h_v % self.connector_heads == 0,
            "h_v must be divisible by connector_heads",
        )?;
        check(self.l_c >= 1, "l_c must be at least 1")?;
        check(self.out_dim >= 1, "out_dim must be at least 1")?;
        check(
            self.patches >= 1 && self.d_raw >= 1,
            "image shape must be positive",
        )?;
        check(self.ffn_mult >= 1, "ffn_mult must be at least 1")?;
        check(
            self.vocab_size >= RESERVED.len(),
            "vocab_size smaller than the reserved tokens",
        )?;
        check(self.max_positions >= 3, "max_positions too small")?;
        Ok(())
    }
}
