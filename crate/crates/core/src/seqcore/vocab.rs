use crate::error::{Error, Result};

/// Opaque text token id. Ids below [`SpecialToken::COUNT`] are reserved.
pub type TokenId = u32;

/// Reserved control tokens. Their ids are fixed at the bottom of every vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum SpecialToken {
    Pad = 0,
    ImgStart = 1,
    ImgEnd = 2,
    EndOfSeq = 3,
}

impl SpecialToken {
    pub const COUNT: u32 = 4;
    pub const ALL: [SpecialToken; 4] = [
        SpecialToken::Pad,
        SpecialToken::ImgStart,
        SpecialToken::ImgEnd,
        SpecialToken::EndOfSeq,
    ];

    pub fn id(self) -> TokenId {
        self as TokenId
    }

    pub fn from_id(id: TokenId) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.id() == id)
    }

    pub fn marker(self) -> &'static str {
        match self {
            SpecialToken::Pad => "<pad>",
            SpecialToken::ImgStart => "<IMG>",
            SpecialToken::ImgEnd => "</IMG>",
            SpecialToken::EndOfSeq => "</s>",
        }
    }
}

pub fn is_special(id: TokenId) -> bool {
    id < SpecialToken::COUNT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    pub fn new(size: u32) -> Result<Self> {
        if size <= SpecialToken::COUNT {
            return Err(Error::Config(format!(
                "vocab_size {size} leaves no room for ordinary tokens"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.size
    }

    /// First id usable for ordinary text.
    pub fn first_ordinary(&self) -> TokenId {
        SpecialToken::COUNT
    }

    pub fn ordinary_count(&self) -> u32 {
        self.size - SpecialToken::COUNT
    }
}

/// Byte-level codec used where real text has to pass through token ids
/// (curated instructions and sentences). Byte `b` maps to id `b + 4`.
pub struct ByteCodec;

impl ByteCodec {
    pub const VOCAB_SIZE: u32 = 256 + SpecialToken::COUNT;

    pub fn encode(text: &str) -> Vec<TokenId> {
        text.bytes()
            .map(|b| b as TokenId + SpecialToken::COUNT)
            .collect()
    }

    pub fn decode(tokens: &[TokenId]) -> Result<String> {
        let bytes = tokens
            .iter()
            .map(|&t| {
                t.checked_sub(SpecialToken::COUNT)
                    .filter(|b| *b < 256)
                    .map(|b| b as u8)
                    .ok_or_else(|| Error::Decode(format!("token {t} is not a byte token")))
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|e| Error::Decode(e.to_string()))
    }
}
