//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LLCK" | u32 version | u8 kind (0 model, 1 adapters) | u8 variant tag
//! u32 len | config JSON
//! u32 len | base frozen digest (hex, adapters only, else empty)
//! u32 count | count x { u32 len | name | u8 frozen | u32 rows | u32 cols | rows*cols f32 }
//! ```
//!
//! Values are stored as 32-bit floats, so a round trip is bit-exact for any
//! model whose values are f32-representable.

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::model::{is_adapter_param, VlgModel};
use crate::params::{collect_params, frozen_digest, Param, VisitParams};
use crate::seqcore::{AdapterVariant, ModelConfig, WrappedLayer};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"LLCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Model,
    Adapters,
}

fn variant_tag(v: Option<AdapterVariant>) -> u8 {
    match v {
        None => 0,
        Some(AdapterVariant::SharedLinear) => 1,
        Some(AdapterVariant::MoeLinear) => 2,
        Some(AdapterVariant::Lateralization) => 3,
    }
}

fn tag_variant(t: u8) -> Result<Option<AdapterVariant>> {
    Ok(match t {
        0 => None,
        1 => Some(AdapterVariant::SharedLinear),
        2 => Some(AdapterVariant::MoeLinear),
        3 => Some(AdapterVariant::Lateralization),
        _ => return Err(Error::Decode(format!("unknown variant tag {t}"))),
    })
}

fn attached_variant(model: &VlgModel) -> Option<AdapterVariant> {
    model.has_adapters().then_some(model.config.adapter_variant)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn encode(
    kind: CheckpointKind,
    config: &ModelConfig,
    variant: Option<AdapterVariant>,
    base_digest: &str,
    params: &BTreeMap<String, Param>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match kind {
        CheckpointKind::Model => 0,
        CheckpointKind::Adapters => 1,
    });
    out.push(variant_tag(variant));
    put_bytes(
        &mut out,
        &serde_json::to_vec(config).expect("config serializes"),
    );
    put_bytes(&mut out, base_digest.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        put_bytes(&mut out, name.as_bytes());
        out.push(p.frozen as u8);
        let (r, c) = p.shape();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for v in p.value.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Decode(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Decode("checkpoint string is not UTF-8".into()))
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub variant: Option<AdapterVariant>,
    pub base_digest: String,
    pub params: BTreeMap<String, Param>,
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Decode("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Decode(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let kind = match r.u8()? {
            0 => CheckpointKind::Model,
            1 => CheckpointKind::Adapters,
            k => return Err(Error::Decode(format!("unknown checkpoint kind {k}"))),
        };
        let variant = tag_variant(r.u8()?)?;
        let config: ModelConfig = serde_json::from_slice(r.bytes()?)?;
        config.validate()?;
        let base_digest = r.string()?;
        let count = r.u32()?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(Error::Decode(format!("bad frozen flag {f} for {name}"))),
            };
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Decode(format!("{name}: shape overflows")))?;
            let data: Vec<f64> = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Decode(format!("{name}: non-finite value")));
            }
            let value = Array2::from_shape_vec((rows, cols), data).expect("length checked");
            if params
                .insert(name.clone(), Param { value, frozen })
                .is_some()
            {
                return Err(Error::Decode(format!("duplicate array {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Decode("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            kind,
            config,
            variant,
            base_digest,
            params,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Full model, including any attached adapters.
pub fn encode_model(model: &VlgModel) -> Vec<u8> {
    encode(
        CheckpointKind::Model,
        &model.config,
        attached_variant(model),
        "",
        &collect_params(model),
    )
}

/// Adapter parameters only, tied to the digest of the frozen base.
pub fn encode_adapters(model: &VlgModel) -> Result<Vec<u8>> {
    let Some(variant) = attached_variant(model) else {
        return Err(Error::Contract("model has no adapters to save".into()));
    };
    let params = collect_params(model)
        .into_iter()
        .filter(|(n, _)| is_adapter_param(n))
        .collect();
    Ok(encode(
        CheckpointKind::Adapters,
        &model.config,
        Some(variant),
        &stored_base_digest(&model.base()),
        &params,
    ))
}

/// Frozen digest of `base` at stored (f32) precision, so that adapters
/// trained on an in-memory base still match it after a save/load cycle.
fn stored_base_digest(base: &VlgModel) -> String {
    let mut m = base.clone();
    crate::params::set_frozen(&mut m, true);
    m.visit_mut("", &mut |_, p| p.value.mapv_inplace(|v| v as f32 as f64));
    frozen_digest(&m)
}

/// Copy stored arrays into `model`, requiring an exact name and shape match.
fn assign(
    model: &mut VlgModel,
    params: &BTreeMap<String, Param>,
    only_adapters: bool,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut bad_shape = None;
    let mut seen = 0usize;
    model.visit_mut("", &mut |name, p| {
        if only_adapters && !is_adapter_param(name) {
            return;
        }
        match params.get(name) {
            Some(stored) if stored.shape() == p.shape() => {
                *p = stored.clone();
                seen += 1;
            }
            Some(stored) => {
                bad_shape.get_or_insert(format!(
                    "{name}: stored {:?}, model expects {:?}",
                    stored.shape(),
                    p.shape()
                ));
            }
            None => missing.push(name.to_owned()),
        }
    });
    if let Some(msg) = bad_shape {
        return Err(Error::Decode(format!("shape mismatch: {msg}")));
    }
    if !missing.is_empty() {
        return Err(Error::Decode(format!(
            "missing arrays: {}",
            missing.join(", ")
        )));
    }
    if seen != params.len() {
        return Err(Error::Decode(format!(
            "checkpoint has {} arrays the model does not use",
            params.len() - seen
        )));
    }
    Ok(())
}

/// Drop MoE image parameters when the checkpoint stored a tied adapter.
fn tie_missing_moe(model: &mut VlgModel, params: &BTreeMap<String, Param>) {
    for (i, block) in model.blocks.iter_mut().enumerate() {
        for layer in WrappedLayer::ALL {
            let prefix = crate::model::Block::site_prefix(&format!("blocks.{i}"), layer);
            if let Some(Adapter::MoeLinear { image, .. }) = &mut block.site_mut(layer).adapter {
                if !params.contains_key(&format!("{prefix}.adapter.image.a")) {
                    *image = None;
                }
            }
        }
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<VlgModel> {
    let ck = Checkpoint::decode(bytes)?;
    if ck.kind != CheckpointKind::Model {
        return Err(Error::Decode(
            "expected a model checkpoint, found adapters".into(),
        ));
    }
    let mut model = VlgModel::new(ck.config.clone())?;
    if let Some(v) = ck.variant {
        model.attach_adapters(v, 0);
        tie_missing_moe(&mut model, &ck.params);
    }
    model.config = ck.config;
    assign(&mut model, &ck.params, false)?;
    Ok(model)
}

/// Attach the stored adapters to a base model, which must match the
/// checkpoint's architecture and frozen digest.
pub fn apply_adapters(base: &VlgModel, bytes: &[u8]) -> Result<VlgModel> {
    let ck = Checkpoint::decode(bytes)?;
    if ck.kind != CheckpointKind::Adapters {
        return Err(Error::Decode("expected an adapter checkpoint".into()));
    }
    let variant = ck
        .variant
        .ok_or_else(|| Error::Decode("adapter checkpoint without variant".into()))?;
    let mut model = base.base();
    crate::params::set_frozen(&mut model, true);
    let digest = stored_base_digest(&model);
    if digest != ck.base_digest {
        return Err(Error::FrozenModified(format!(
            "base digest {digest} does not match the adapters' base {}",
            ck.base_digest
        )));
    }
    let mut arch = ck.config.clone();
    arch.adapter_variant = model.config.adapter_variant;
    arch.seed = model.config.seed;
    if arch != model.config {
        return Err(Error::Decode(
            "adapter checkpoint was trained on a different architecture".into(),
        ));
    }
    model.config = ck.config.clone();
    model.attach_adapters(variant, 0);
    tie_missing_moe(&mut model, &ck.params);
    assign(&mut model, &ck.params, true)?;
    Ok(model)
}

pub fn save_model(model: &VlgModel, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<VlgModel> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 10,
            patch_channels: 3,
            grid_height: 2,
            grid_width: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            max_seq_len: 12,
            ..ModelConfig::toy()
        }
    }

    fn f32_values(model: &mut VlgModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.visit_mut("", &mut |_, p| {
            p.value
                .mapv_inplace(|_| rng.random_range(-2.0f32..2.0) as f64);
        });
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        for v in [
            None,
            Some(AdapterVariant::Lateralization),
            Some(AdapterVariant::MoeLinear),
        ] {
            let mut m = VlgModel::new(tiny()).unwrap();
            if let Some(v) = v {
                m.attach_adapters(v, 1);
            }
            f32_values(&mut m, 2);
            let back = decode_model(&encode_model(&m)).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn adapters_round_trip_onto_base() {
        let mut base = VlgModel::new(tiny()).unwrap();
        f32_values(&mut base, 3);
        let mut tuned = base.clone();
        tuned.attach_adapters(AdapterVariant::SharedLinear, 4);
        f32_values(&mut tuned, 5);
        // f32_values also touched the base; rebuild it from the tuned copy.
        let base = tuned.base();
        let bytes = encode_adapters(&tuned).unwrap();
        assert_eq!(apply_adapters(&base, &bytes).unwrap(), tuned);

        let mut other = base.clone();
        other.tok_emb.value[[0, 0]] += 1.0;
        assert!(matches!(
            apply_adapters(&other, &bytes),
            Err(Error::FrozenModified(_))
        ));
    }

    #[test]
    fn adapters_from_unsaved_base_apply_after_reload() {
        let base = VlgModel::new(tiny()).unwrap();
        let mut tuned = base.clone();
        tuned.attach_adapters(AdapterVariant::Lateralization, 1);
        let bytes = encode_adapters(&tuned).unwrap();
        let reloaded = decode_model(&encode_model(&base)).unwrap();
        assert!(apply_adapters(&reloaded, &bytes).is_ok());
        assert!(apply_adapters(&base, &bytes).is_ok());
    }

    #[test]
    fn rejects_shape_mismatch_and_corruption() {
        let m = VlgModel::new(tiny()).unwrap();
        let mut ck = Checkpoint::decode(&encode_model(&m)).unwrap();
        let p = ck.params.get_mut("lm_head.weight").unwrap();
        p.value = Array2::zeros((3, 3));
        let bytes = encode(ck.kind, &ck.config, ck.variant, "", &ck.params);
        let err = decode_model(&bytes).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "{err}");

        let good = encode_model(&m);
        assert!(decode_model(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_model(&bad).is_err());
        let mut long = good;
        long.push(0);
        assert!(decode_model(&long).is_err());
    }

    #[test]
    fn tied_moe_round_trip() {
        let mut m = VlgModel::new(tiny()).unwrap();
        m.attach_adapters(AdapterVariant::MoeLinear, 1);
        for b in &mut m.blocks {
            for l in WrappedLayer::ALL {
                if let Some(Adapter::MoeLinear { image, .. }) = &mut b.site_mut(l).adapter {
                    *image = None;
                }
            }
        }
        f32_values(&mut m, 6);
        assert_eq!(decode_model(&encode_model(&m)).unwrap(), m);
    }
}
