//! Line-delimited corpus format.
//!
//! The first line is a JSON header naming the format, version and record
//! kind. Every following line is one record. Patch grids are stored inline
//! as nested arrays (f64, bit-exact) or, when a sidecar is requested, as
//! offsets into a little-endian f32 binary next to the corpus file.

use super::grid::PatchGrid;
use super::instance::{DatasetInstance, Metadata};
use super::sequence::{InterleavedSequence, Segment};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT_NAME: &str = "lateral-corpus";
pub const FORMAT_VERSION: u32 = 1;
const SIDECAR_MAGIC: &[u8; 4] = b"LLPB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Instances,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Header {
    format: String,
    version: u32,
    kind: CorpusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<String>,
}

impl Header {
    pub(crate) fn new(kind: CorpusKind, sidecar: Option<String>) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            kind,
            sidecar,
        }
    }

    pub(crate) fn sidecar(&self) -> Option<&str> {
        self.sidecar.as_deref()
    }

    pub(crate) fn check(&self, kind: CorpusKind) -> Result<()> {
        if self.format != FORMAT_NAME {
            return Err(Error::Decode(format!("unknown format `{}`", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Decode(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        if self.kind != kind {
            return Err(Error::Decode(format!(
                "corpus holds {:?} records, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Patch grid on the wire. Exactly one of `patches` / `offset` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct WireGrid {
    height: usize,
    width: usize,
    channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patches: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<u64>,
}

/// Accumulates sidecar values during encoding, or serves them during decoding.
#[derive(Debug, Default)]
pub(crate) struct Sidecar {
    values: Vec<f32>,
}

impl Sidecar {
    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != SIDECAR_MAGIC {
            return Err(Error::Decode("sidecar magic missing".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Decode(format!(
                "sidecar version {version} unsupported"
            )));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload = &bytes[16..];
        if count.checked_mul(4) != Some(payload.len() as u64) {
            return Err(Error::Decode(format!(
                "sidecar declares {count} values but carries {} bytes",
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { values })
    }
}

impl WireGrid {
    pub(crate) fn encode(grid: &PatchGrid, sidecar: Option<&mut Sidecar>) -> Self {
        let (patches, offset) = match sidecar {
            None => (Some(grid.patches().map(<[f64]>::to_vec).collect()), None),
            Some(sc) => {
                let offset = sc.values.len() as u64;
                sc.values.extend(grid.data().iter().map(|&v| v as f32));
                (None, Some(offset))
            }
        };
        Self {
            height: grid.height(),
            width: grid.width(),
            channels: grid.channels(),
            patches,
            offset,
        }
    }

    pub(crate) fn decode(self, sidecar: Option<&Sidecar>) -> Result<PatchGrid> {
        let n = self
            .height
            .checked_mul(self.width)
            .and_then(|hw| hw.checked_mul(self.channels))
            .ok_or_else(|| Error::Decode("grid dimensions overflow".into()))?;
        let data: Vec<f64> = match (self.patches, self.offset) {
            (Some(patches), None) => {
                if patches.len() != self.height * self.width
                    || patches.iter().any(|p| p.len() != self.channels)
                {
                    return Err(Error::Decode(format!(
                        "grid header {}x{}x{} does not match its payload",
                        self.height, self.width, self.channels
                    )));
                }
                patches.concat()
            }
            (None, Some(offset)) => {
                let sc = sidecar
                    .ok_or_else(|| Error::Decode("grid refers to a missing sidecar".into()))?;
                let start = usize::try_from(offset)
                    .map_err(|_| Error::Decode("sidecar offset overflow".into()))?;
                let slice = start
                    .checked_add(n)
                    .and_then(|end| sc.values.get(start..end))
                    .ok_or_else(|| Error::Decode("grid runs past the end of the sidecar".into()))?;
                slice.iter().map(|&v| f64::from(v)).collect()
            }
            _ => {
                return Err(Error::Decode(
                    "grid must carry exactly one of `patches` or `offset`".into(),
                ))
            }
        };
        PatchGrid::new(self.height, self.width, self.channels, data)
            .map_err(|e| Error::Decode(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum WireSegment {
    Text { tokens: Vec<u32> },
    Image(WireGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireInstance {
    instruction: Vec<u32>,
    context: Vec<WireSegment>,
    target: Vec<WireSegment>,
    source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instruction_text: Option<String>,
}

fn encode_seq(seq: &InterleavedSequence, mut sc: Option<&mut Sidecar>) -> Vec<WireSegment> {
    seq.segments()
        .iter()
        .map(|s| match s {
            Segment::Text(t) => WireSegment::Text { tokens: t.clone() },
            Segment::Image(g) => WireSegment::Image(WireGrid::encode(g, sc.as_deref_mut())),
        })
        .collect()
}

fn decode_seq(segs: Vec<WireSegment>, sc: Option<&Sidecar>) -> Result<InterleavedSequence> {
    let segments = segs
        .into_iter()
        .map(|s| match s {
            WireSegment::Text { tokens } => Ok(Segment::Text(tokens)),
            WireSegment::Image(g) => g.decode(sc).map(Segment::Image),
        })
        .collect::<Result<Vec<_>>>()?;
    InterleavedSequence::new(segments).map_err(|e| Error::Decode(e.to_string()))
}

impl WireInstance {
    fn encode(inst: &DatasetInstance, mut sc: Option<&mut Sidecar>) -> Self {
        Self {
            instruction: inst.instruction.clone(),
            context: encode_seq(&inst.context, sc.as_deref_mut()),
            target: encode_seq(&inst.target, sc),
            source_id: inst.metadata.source_id.clone(),
            domain: inst.metadata.domain.clone(),
            instruction_text: inst.metadata.instruction_text.clone(),
        }
    }

    fn decode(self, sc: Option<&Sidecar>) -> Result<DatasetInstance> {
        let inst = DatasetInstance {
            instruction: self.instruction,
            context: decode_seq(self.context, sc)?,
            target: decode_seq(self.target, sc)?,
            metadata: Metadata {
                source_id: self.source_id,
                domain: self.domain,
                instruction_text: self.instruction_text,
            },
        };
        if inst.target.is_empty() {
            return Err(Error::Decode("instance has an empty target".into()));
        }
        Ok(inst)
    }
}

/// Encode records of any wire type behind a header line.
pub(crate) fn encode_lines<T: Serialize>(header: &Header, records: &[T]) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Split a corpus into its header and raw record lines.
pub(crate) fn decode_lines(bytes: &[u8], kind: CorpusKind) -> Result<(Header, Vec<&str>)> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    let mut lines = text.split('\n');
    let header_line = lines
        .next()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| Error::Decode("missing header line".into()))?;
    let header: Header = serde_json::from_str(header_line)?;
    header.check(kind)?;
    if !text.ends_with('\n') {
        return Err(Error::Decode(
            "truncated payload: missing final newline".into(),
        ));
    }
    let records: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    Ok((header, records))
}

/// Encode a corpus. Returns the line file and, if requested, the sidecar bytes.
/// `sidecar_name` is recorded in the header and resolved relative to the corpus file.
pub fn encode_corpus(
    instances: &[DatasetInstance],
    sidecar_name: Option<&str>,
) -> (Vec<u8>, Option<Vec<u8>>) {
    let mut sc = sidecar_name.map(|_| Sidecar::default());
    let records: Vec<WireInstance> = instances
        .iter()
        .map(|i| WireInstance::encode(i, sc.as_mut()))
        .collect();
    let header = Header::new(CorpusKind::Instances, sidecar_name.map(str::to_owned));
    (encode_lines(&header, &records), sc.map(|s| s.to_bytes()))
}

pub fn decode_corpus(bytes: &[u8], sidecar: Option<&[u8]>) -> Result<Vec<DatasetInstance>> {
    let (header, lines) = decode_lines(bytes, CorpusKind::Instances)?;
    let sc = match (header.sidecar(), sidecar) {
        (Some(_), Some(b)) => Some(Sidecar::from_bytes(b)?),
        (Some(name), None) => {
            return Err(Error::Decode(format!("sidecar `{name}` was not provided")))
        }
        (None, _) => None,
    };
    lines
        .into_iter()
        .enumerate()
        .map(|(i, line)| {
            let wire: WireInstance = serde_json::from_str(line)
                .map_err(|e| Error::Decode(format!("record {}: {e}", i + 1)))?;
            wire.decode(sc.as_ref())
                .map_err(|e| Error::Decode(format!("record {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_corpus(path: &Path, instances: &[DatasetInstance], sidecar: bool) -> Result<()> {
    let sidecar_path = path.with_extension("bin");
    let sidecar_name = sidecar.then(|| {
        sidecar_path
            .file_name()
            .expect("corpus path has a file name")
            .to_string_lossy()
            .into_owned()
    });
    let (lines, bin) = encode_corpus(instances, sidecar_name.as_deref());
    match bin {
        Some(bin) => crate::io::write_all_atomic(&[(&sidecar_path, &bin), (path, &lines)]),
        None => crate::io::write_atomic(path, &lines),
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<DatasetInstance>> {
    let bytes = std::fs::read(path)?;
    let (header, _) = decode_lines(&bytes, CorpusKind::Instances)?;
    let side = match header.sidecar() {
        Some(name) => {
            let dir = path.parent().unwrap_or(Path::new("."));
            Some(std::fs::read(dir.join(name))?)
        }
        None => None,
    };
    decode_corpus(&bytes, side.as_deref())
}

/// A single instance as a self-contained one-record corpus.
pub fn serialize_instance(inst: &DatasetInstance) -> Vec<u8> {
    encode_corpus(std::slice::from_ref(inst), None).0
}

pub fn deserialize_instance(bytes: &[u8]) -> Result<DatasetInstance> {
    let mut all = decode_corpus(bytes, None)?;
    if all.len() != 1 {
        return Err(Error::Decode(format!(
            "expected one instance, found {}",
            all.len()
        )));
    }
    Ok(all.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: f64) -> DatasetInstance {
        DatasetInstance {
            instruction: vec![4, 9],
            context: InterleavedSequence::new(vec![Segment::Text(vec![7])]).unwrap(),
            target: InterleavedSequence::new(vec![
                Segment::Text(vec![5, 6]),
                Segment::Image(
                    PatchGrid::new(1, 2, 2, vec![v, -0.25, 3.5, 2f64.powi(-20)]).unwrap(),
                ),
            ])
            .unwrap(),
            metadata: Metadata {
                source_id: "s1".into(),
                domain: Some("cooking".into()),
                instruction_text: None,
            },
        }
    }

    #[test]
    fn inline_round_trip_is_exact() {
        let inst = sample(0.1);
        let back = deserialize_instance(&serialize_instance(&inst)).unwrap();
        assert_eq!(back, inst);
        let g = back.target.images().next().unwrap();
        assert_eq!(g.patch(0)[0].to_bits(), 0.1f64.to_bits());
    }

    #[test]
    fn sidecar_round_trip_at_f32_precision() {
        let inst = sample(0.1);
        let (lines, bin) = encode_corpus(std::slice::from_ref(&inst), Some("c.bin"));
        let back = decode_corpus(&lines, bin.as_deref()).unwrap();
        let g = back[0].target.images().next().unwrap();
        assert_eq!(g.patch(0)[0], f64::from(0.1f32));
        assert!(decode_corpus(&lines, None).is_err());
    }

    #[test]
    fn errors_not_panics() {
        let good = serialize_instance(&sample(0.5));
        let text = String::from_utf8(good.clone()).unwrap();
        // version mismatch
        let v2 = text.replace("\"version\":1", "\"version\":2");
        assert!(matches!(
            deserialize_instance(v2.as_bytes()),
            Err(Error::Decode(_))
        ));
        // truncated payload
        assert!(deserialize_instance(&good[..good.len() - 10]).is_err());
        assert!(deserialize_instance(b"").is_err());
        // corrupted grid length header
        let bad = text.replace("\"width\":2", "\"width\":3");
        assert!(matches!(
            deserialize_instance(bad.as_bytes()),
            Err(Error::Decode(_))
        ));
        // non-finite values cannot be represented and are rejected
        let nan = text.replace("3.5", "NaN");
        assert!(deserialize_instance(nan.as_bytes()).is_err());
        let huge = text.replace("3.5", "1e400");
        assert!(deserialize_instance(huge.as_bytes()).is_err());
        // corrupted sidecar count
        let (lines, bin) = encode_corpus(&[sample(0.5)], Some("c.bin"));
        let mut bin = bin.unwrap();
        bin[8] = 99;
        assert!(decode_corpus(&lines, Some(&bin)).is_err());
    }

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.jsonl");
        let data = vec![sample(0.25), sample(-1.5)];
        write_corpus(&p, &data, true).unwrap();
        assert!(dir.path().join("corpus.bin").exists());
        assert_eq!(read_corpus(&p).unwrap(), data);
        write_corpus(&p, &data, false).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), data);
    }
}
