use super::sequence::{Element, FlatBuilder, FlatSequence, InterleavedSequence};
use super::vocab::{SpecialToken, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metadata {
    pub source_id: String,
    pub domain: Option<String>,
    /// Human-readable instruction, when the token ids came from real text.
    pub instruction_text: Option<String>,
}

/// One instruction-tuning example: instruction, optional interleaved
/// context, and the interleaved response the model should produce.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInstance {
    pub instruction: Vec<TokenId>,
    pub context: InterleavedSequence,
    pub target: InterleavedSequence,
    pub metadata: Metadata,
}

impl DatasetInstance {
    /// Flat length of the training sequence (instruction, context, target, `</s>`).
    pub fn flat_len(&self) -> usize {
        self.instruction.len() + self.context.flat_len() + self.target.flat_len() + 1
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.instruction.is_empty() {
            return Err(Error::Structural("instruction is empty".into()));
        }
        if self.target.is_empty() {
            return Err(Error::Structural("target is empty".into()));
        }
        if self.flat_len() > max_seq_len {
            return Err(Error::Structural(format!(
                "flattened length {} exceeds max_seq_len {max_seq_len}",
                self.flat_len()
            )));
        }
        Ok(())
    }

    /// Prompt seen at generation time: instruction followed by context.
    pub fn prompt(&self) -> Result<FlatSequence> {
        let mut b = FlatBuilder::new();
        b.push_tokens(&self.instruction)?;
        b.push_sequence(&self.context);
        Ok(b.finish())
    }
}

/// A flattened training sequence with the positions that carry loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub flat: FlatSequence,
    /// `loss_mask[p]` is true when the prediction made at position `p`
    /// (of element `p + 1`) contributes to the objective.
    pub loss_mask: Vec<bool>,
    pub prompt_len: usize,
}

impl Example {
    /// Response positions carry loss; with `loss_on_context` the instruction
    /// and context do too. `</IMG>` is appended deterministically and is
    /// never a prediction target.
    pub fn from_instance(inst: &DatasetInstance, loss_on_context: bool) -> Result<Self> {
        if inst.instruction.is_empty() {
            return Err(Error::Structural("instruction is empty".into()));
        }
        let mut b = FlatBuilder::new();
        b.push_tokens(&inst.instruction)?;
        b.push_sequence(&inst.context);
        let prompt_len = b.len();
        b.push_sequence(&inst.target);
        b.push_eos();
        let flat = b.finish();
        let first_target = if loss_on_context { 1 } else { prompt_len };
        let loss_mask = (0..flat.len())
            .map(|p| {
                let next = p + 1;
                next < flat.len()
                    && next >= first_target
                    && !matches!(
                        &flat.elements()[next],
                        Element::Token(t) if *t == SpecialToken::ImgEnd.id() || *t == SpecialToken::Pad.id()
                    )
            })
            .collect();
        Ok(Self {
            flat,
            loss_mask,
            prompt_len,
        })
    }
}
