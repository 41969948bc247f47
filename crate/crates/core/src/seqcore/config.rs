use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

/// Which adapter family wraps each linear sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterVariant {
    /// One linear LoRA shared by every position.
    #[serde(rename = "shared")]
    SharedLinear,
    /// Separate linear LoRAs for text-target and image-target positions.
    #[serde(rename = "moe")]
    MoeLinear,
    /// Linear LoRA for text-target positions, causal conv LoRA for image-target positions.
    #[serde(rename = "lateral")]
    Lateralization,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 3] = [
        AdapterVariant::SharedLinear,
        AdapterVariant::MoeLinear,
        AdapterVariant::Lateralization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterVariant::SharedLinear => "shared",
            AdapterVariant::MoeLinear => "moe",
            AdapterVariant::Lateralization => "lateral",
        }
    }
}

impl fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(AdapterVariant::SharedLinear),
            "moe" => Ok(AdapterVariant::MoeLinear),
            "lateral" => Ok(AdapterVariant::Lateralization),
            other => Err(Error::Usage(format!(
                "unknown variant `{other}` (expected shared, moe or lateral)"
            ))),
        }
    }
}

/// Linear sublayers of a transformer block that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrappedLayer {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl WrappedLayer {
    pub const ALL: [WrappedLayer; 6] = [
        WrappedLayer::Query,
        WrappedLayer::Key,
        WrappedLayer::Value,
        WrappedLayer::Output,
        WrappedLayer::FfnUp,
        WrappedLayer::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WrappedLayer::Query => "q",
            WrappedLayer::Key => "k",
            WrappedLayer::Value => "v",
            WrappedLayer::Output => "o",
            WrappedLayer::FfnUp => "up",
            WrappedLayer::FfnDown => "down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: u32,
    pub patch_channels: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub dropout_p: f64,
    pub adapter_variant: AdapterVariant,
    pub wrapped_layers: Vec<WrappedLayer>,
    pub max_seq_len: usize,
    pub loss_weight_mse: f64,
    #[serde(default)]
    pub loss_on_context: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: d=64, 2 layers, 4 heads, 16 channels, 5x5 grid,
    /// rank 8 with alpha = 2 * rank, 2x2 kernel, dropout 0.05.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 32,
            patch_channels: 16,
            grid_height: 5,
            grid_width: 5,
            lora_rank: 8,
            lora_alpha: 16.0,
            conv_kernel: 2,
            conv_stride: 1,
            dropout_p: 0.05,
            adapter_variant: AdapterVariant::Lateralization,
            wrapped_layers: WrappedLayer::ALL.to_vec(),
            max_seq_len: 160,
            loss_weight_mse: 1.0,
            loss_on_context: false,
            seed: 0,
        }
    }

    /// Adapter hyperparameters used at full scale (rank 128, alpha 256,
    /// dropout 0.05, 2x2 kernel, stride 1) on a LLaMA-33B-shaped backbone.
    /// Valid, but far too large for desk runs.
    pub fn full_scale() -> Self {
        Self {
            d_model: 6656,
            n_layers: 60,
            n_heads: 52,
            vocab_size: 32000,
            patch_channels: 1792,
            grid_height: 8,
            grid_width: 8,
            lora_rank: 128,
            lora_alpha: 256.0,
            conv_kernel: 2,
            conv_stride: 1,
            dropout_p: 0.05,
            adapter_variant: AdapterVariant::Lateralization,
            wrapped_layers: WrappedLayer::ALL.to_vec(),
            max_seq_len: 2048,
            loss_weight_mse: 1.0,
            loss_on_context: false,
            seed: 0,
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn grid_len(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// `(d_in, d_out)` of a wrapped sublayer.
    pub fn layer_dims(&self, layer: WrappedLayer) -> (usize, usize) {
        match layer {
            WrappedLayer::FfnUp => (self.d_model, self.d_ff()),
            WrappedLayer::FfnDown => (self.d_ff(), self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }

    pub fn wraps(&self, layer: WrappedLayer) -> bool {
        self.wrapped_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("d_model, n_layers and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        super::vocab::Vocab::new(self.vocab_size)?;
        if self.patch_channels == 0 || self.grid_height == 0 || self.grid_width == 0 {
            return bad("patch grid dimensions must be positive".into());
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        for layer in &self.wrapped_layers {
            let (d_in, d_out) = self.layer_dims(*layer);
            if self.lora_rank >= d_in.min(d_out) {
                return bad(format!(
                    "lora_rank {} must be below min(d_in, d_out) = {} for {}",
                    self.lora_rank,
                    d_in.min(d_out),
                    layer.name()
                ));
            }
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return bad(format!(
                "lora_alpha must be positive, got {}",
                self.lora_alpha
            ));
        }
        if self.conv_kernel == 0 {
            return bad("conv_kernel must be at least 1".into());
        }
        if self.conv_kernel > self.grid_height + 1 || self.conv_kernel > self.grid_width + 1 {
            return bad(format!(
                "conv_kernel {} exceeds the padded {}x{} grid",
                self.conv_kernel, self.grid_height, self.grid_width
            ));
        }
        if self.conv_stride != 1 {
            return bad(format!("conv_stride must be 1, got {}", self.conv_stride));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            ));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if !(self.loss_weight_mse >= 0.0 && self.loss_weight_mse.is_finite()) {
            return bad("loss_weight_mse must be a finite non-negative number".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config always serializes");
        hex::encode(Sha256::digest(&json))
    }
}
