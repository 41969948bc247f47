//! Uncurated source documents and their line-delimited file format.

use super::heuristics::split_sentences;
use crate::error::{Error, Result};
use crate::seqcore::corpus::{decode_lines, encode_lines, CorpusKind, Header, WireGrid};
use crate::seqcore::{ByteCodec, DatasetInstance, PatchGrid, Segment};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One element of a raw document, in reading order.
#[derive(Debug, Clone, PartialEq)]
pub enum RawItem {
    /// A single sentence.
    Sentence(String),
    Image(PatchGrid),
}

/// A sentence-segmented document with images interleaved in reading order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInstance {
    pub source_id: String,
    pub domain: Option<String>,
    pub items: Vec<RawItem>,
}

impl RawInstance {
    /// Build from free text blocks and images; each text block is split into
    /// sentences.
    pub fn from_blocks(source_id: impl Into<String>, blocks: Vec<Segment>) -> Result<Self> {
        let mut items = Vec::new();
        for b in blocks {
            match b {
                Segment::Text(t) => {
                    let text = ByteCodec::decode(&t)?;
                    items.extend(split_sentences(&text).into_iter().map(RawItem::Sentence));
                }
                Segment::Image(g) => items.push(RawItem::Image(g)),
            }
        }
        let inst = Self {
            source_id: source_id.into(),
            domain: None,
            items,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Recover the raw form of a curated instance from its byte-coded target.
    pub fn from_dataset_instance(inst: &DatasetInstance) -> Result<Self> {
        let mut raw = Self::from_blocks(
            inst.metadata.source_id.clone(),
            inst.target.segments().to_vec(),
        )?;
        raw.domain = inst.metadata.domain.clone();
        Ok(raw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Structural(format!(
                "{}: no text and no images",
                self.source_id
            )));
        }
        for item in &self.items {
            if let RawItem::Sentence(s) = item {
                if s.trim().is_empty() || s.contains('\n') {
                    return Err(Error::Structural(format!(
                        "{}: sentences must be non-empty single lines",
                        self.source_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.items.iter().filter_map(|i| match i {
            RawItem::Sentence(s) => Some(s.as_str()),
            RawItem::Image(_) => None,
        })
    }

    pub fn images(&self) -> impl Iterator<Item = &PatchGrid> {
        self.items.iter().filter_map(|i| match i {
            RawItem::Image(g) => Some(g),
            RawItem::Sentence(_) => None,
        })
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences().count()
    }

    pub fn image_count(&self) -> usize {
        self.images().count()
    }

    /// Sentences joined by single spaces, as handed to text judges.
    pub fn text(&self) -> String {
        self.sentences().collect::<Vec<_>>().join(" ")
    }

    /// Interleaved byte-coded target: consecutive sentences form one text
    /// segment, separated by newlines so that sentence boundaries survive
    /// a round trip.
    pub fn to_segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut run: Vec<&str> = Vec::new();
        let flush = |run: &mut Vec<&str>, out: &mut Vec<Segment>| {
            if !run.is_empty() {
                out.push(Segment::Text(ByteCodec::encode(&run.join("\n"))));
                run.clear();
            }
        };
        for item in &self.items {
            match item {
                RawItem::Sentence(s) => run.push(s),
                RawItem::Image(g) => {
                    flush(&mut run, &mut out);
                    out.push(Segment::Image(g.clone()));
                }
            }
        }
        flush(&mut run, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum WireItem {
    Text { text: String },
    Image(WireGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRaw {
    source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    items: Vec<WireItem>,
}

pub fn encode_raw_corpus(instances: &[RawInstance]) -> Vec<u8> {
    let records: Vec<WireRaw> = instances
        .iter()
        .map(|r| WireRaw {
            source_id: r.source_id.clone(),
            domain: r.domain.clone(),
            items: r
                .items
                .iter()
                .map(|i| match i {
                    RawItem::Sentence(s) => WireItem::Text { text: s.clone() },
                    RawItem::Image(g) => WireItem::Image(WireGrid::encode(g, None)),
                })
                .collect(),
        })
        .collect();
    encode_lines(&Header::new(CorpusKind::Raw, None), &records)
}

/// Decode a raw corpus. A `text` item holding several sentences is split.
pub fn decode_raw_corpus(bytes: &[u8]) -> Result<Vec<RawInstance>> {
    let (_, lines) = decode_lines(bytes, CorpusKind::Raw)?;
    lines
        .into_iter()
        .enumerate()
        .map(|(n, line)| {
            let ctx = |e: Error| Error::Decode(format!("record {}: {e}", n + 1));
            let wire: WireRaw = serde_json::from_str(line).map_err(|e| ctx(e.into()))?;
            let mut items = Vec::new();
            for item in wire.items {
                match item {
                    WireItem::Text { text } => {
                        items.extend(split_sentences(&text).into_iter().map(RawItem::Sentence))
                    }
                    WireItem::Image(g) => items.push(RawItem::Image(g.decode(None).map_err(ctx)?)),
                }
            }
            let inst = RawInstance {
                source_id: wire.source_id,
                domain: wire.domain,
                items,
            };
            inst.validate().map_err(ctx)?;
            Ok(inst)
        })
        .collect()
}

pub fn write_raw_corpus(path: &Path, instances: &[RawInstance]) -> Result<()> {
    crate::io::write_atomic(path, &encode_raw_corpus(instances))
}

pub fn read_raw_corpus(path: &Path) -> Result<Vec<RawInstance>> {
    decode_raw_corpus(&std::fs::read(path)?)
}
