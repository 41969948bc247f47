//! Toy decoder-only vision-language model.
//!
//! Text tokens are embedded from a table, patches through a bias-free linear
//! projector; learned absolute positions are added. Blocks are pre-norm
//! causal self-attention plus a GELU feed-forward, each linear sublayer held
//! in a [`RoutedAdapterSet`]. Two heads read the final hidden states: logits
//! over the vocabulary and a regression onto the next patch.

use crate::adapters::{
    routed_apply_graph, Adapter, AdapterDims, Linear, RoutedAdapterSet, Routing,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{join, Param, VisitParams};
use crate::seqcore::{
    AdapterVariant, Element, Example, FlatSequence, ModelConfig, TargetModality, WrappedLayer,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        Self {
            gain: Param::trainable(Array2::ones((1, d))),
            bias: Param::zeros(1, d),
        }
    }

    fn graph(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let gain = g.param(&join(prefix, "gain"), &self.gain);
        let bias = g.param(&join(prefix, "bias"), &self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        crate::autograd::layer_norm(x, &self.gain.value, &self.bias.value).0
    }
}

impl VisitParams for LayerNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub q: RoutedAdapterSet,
    pub k: RoutedAdapterSet,
    pub v: RoutedAdapterSet,
    pub o: RoutedAdapterSet,
    pub ln2: LayerNormParams,
    pub up: RoutedAdapterSet,
    pub down: RoutedAdapterSet,
}

impl Block {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let lin = |d_in, d_out, rng: &mut ChaCha8Rng| {
            RoutedAdapterSet::bare(Linear::init(d_in, d_out, true, INIT_STD, rng))
        };
        Self {
            ln1: LayerNormParams::new(d),
            q: lin(d, d, rng),
            k: lin(d, d, rng),
            v: lin(d, d, rng),
            o: lin(d, d, rng),
            ln2: LayerNormParams::new(d),
            up: lin(d, cfg.d_ff(), rng),
            down: lin(cfg.d_ff(), d, rng),
        }
    }

    pub fn site(&self, layer: WrappedLayer) -> &RoutedAdapterSet {
        match layer {
            WrappedLayer::Query => &self.q,
            WrappedLayer::Key => &self.k,
            WrappedLayer::Value => &self.v,
            WrappedLayer::Output => &self.o,
            WrappedLayer::FfnUp => &self.up,
            WrappedLayer::FfnDown => &self.down,
        }
    }

    pub fn site_mut(&mut self, layer: WrappedLayer) -> &mut RoutedAdapterSet {
        match layer {
            WrappedLayer::Query => &mut self.q,
            WrappedLayer::Key => &mut self.k,
            WrappedLayer::Value => &mut self.v,
            WrappedLayer::Output => &mut self.o,
            WrappedLayer::FfnUp => &mut self.up,
            WrappedLayer::FfnDown => &mut self.down,
        }
    }

    pub fn site_prefix(prefix: &str, layer: WrappedLayer) -> String {
        let group = match layer {
            WrappedLayer::FfnUp | WrappedLayer::FfnDown => "ffn",
            _ => "attn",
        };
        join(&join(prefix, group), layer.name())
    }
}

impl VisitParams for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        for layer in WrappedLayer::ALL {
            self.site(layer)
                .visit(&Block::site_prefix(prefix, layer), f);
        }
        self.ln2.visit(&join(prefix, "ln2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        for layer in WrappedLayer::ALL {
            self.site_mut(layer)
                .visit_mut(&Block::site_prefix(prefix, layer), f);
        }
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlgModel {
    pub config: ModelConfig,
    /// `vocab_size x d_model`
    pub tok_emb: Param,
    /// `C -> d_model`, no bias.
    pub projector: Linear,
    /// `max_seq_len x d_model`
    pub pos_emb: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
    pub lm_head: Linear,
    pub image_head: Linear,
}

/// Per-position outputs of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `N x vocab_size`; meaningful where the target is text.
    pub logits: Array2<f64>,
    /// `N x C`; meaningful where the target is a patch.
    pub patches: Array2<f64>,
    /// `N x d_model` final hidden states (after the last norm).
    pub hidden: Array2<f64>,
}

/// Tape handles for the three outputs of [`VlgModel::forward_graph`].
#[derive(Debug, Clone, Copy)]
pub struct GraphOutput {
    pub logits: Var,
    pub patches: Var,
    pub hidden: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub ce_text: f64,
    pub mse_image: f64,
    pub total: f64,
    pub text_count: usize,
    pub image_count: usize,
    pub text_empty: bool,
    pub image_empty: bool,
}

/// Loss-bearing positions of a sequence split by target modality.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub text: Vec<(usize, usize)>,
    pub image_rows: Vec<usize>,
    /// `image_rows.len() x C`
    pub image_targets: Array2<f64>,
}

impl LossTargets {
    pub fn new(flat: &FlatSequence, loss_mask: &[bool], channels: usize) -> Result<Self> {
        if loss_mask.len() != flat.len() {
            return Err(Error::Contract(format!(
                "loss mask has {} entries for {} positions",
                loss_mask.len(),
                flat.len()
            )));
        }
        if !loss_mask.iter().any(|m| *m) {
            return Err(Error::Contract("loss mask selects no positions".into()));
        }
        let els = flat.elements();
        let mut text = Vec::new();
        let mut image_rows = Vec::new();
        let mut image_vals = Vec::new();
        for p in 0..flat.len().saturating_sub(1) {
            if !loss_mask[p] {
                continue;
            }
            match (&els[p + 1], flat.targets()[p]) {
                (Element::Token(t), TargetModality::Text) => text.push((p, *t as usize)),
                (Element::Patch(v), TargetModality::Image) => {
                    if v.len() != channels {
                        return Err(Error::Contract(format!(
                            "patch at {} has {} channels, expected {channels}",
                            p + 1,
                            v.len()
                        )));
                    }
                    image_rows.push(p);
                    image_vals.extend_from_slice(v);
                }
                _ => unreachable!("targets follow the element kinds"),
            }
        }
        let image_targets = Array2::from_shape_vec((image_rows.len(), channels), image_vals)
            .expect("row-major patch buffer");
        Ok(Self {
            text,
            image_rows,
            image_targets,
        })
    }
}

impl VlgModel {
    /// Fresh base model, all parameters trainable, no adapters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let tok_emb = Param::normal(config.vocab_size as usize, d, INIT_STD, &mut rng);
        let projector = Linear::init(config.patch_channels, d, false, INIT_STD, &mut rng);
        let pos_emb = Param::normal(config.max_seq_len, d, INIT_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::init(&config, &mut rng))
            .collect();
        let lm_head = Linear::init(d, config.vocab_size as usize, false, INIT_STD, &mut rng);
        let image_head = Linear::init(d, config.patch_channels, true, INIT_STD, &mut rng);
        Ok(Self {
            ln_f: LayerNormParams::new(d),
            config,
            tok_emb,
            projector,
            pos_emb,
            blocks,
            lm_head,
            image_head,
        })
    }

    /// Freeze every base parameter and attach zero-initialized adapters of
    /// `variant` to each wrapped sublayer.
    pub fn attach_adapters(&mut self, variant: AdapterVariant, seed: u64) {
        self.detach_adapters();
        crate::params::set_frozen(self, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = self.config.clone();
        for block in &mut self.blocks {
            for layer in WrappedLayer::ALL {
                if !cfg.wraps(layer) {
                    continue;
                }
                let (d_in, d_out) = cfg.layer_dims(layer);
                let dims = AdapterDims {
                    d_in,
                    d_out,
                    rank: cfg.lora_rank,
                    alpha: cfg.lora_alpha,
                    kernel_size: cfg.conv_kernel,
                    dropout_p: cfg.dropout_p,
                };
                block.site_mut(layer).adapter = Some(Adapter::zero_init(variant, dims, &mut rng));
            }
        }
        self.config.adapter_variant = variant;
    }

    pub fn detach_adapters(&mut self) {
        for block in &mut self.blocks {
            for layer in WrappedLayer::ALL {
                block.site_mut(layer).adapter = None;
            }
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks.iter().any(|b| {
            WrappedLayer::ALL
                .iter()
                .any(|l| b.site(*l).adapter.is_some())
        })
    }

    /// Copy of the model with adapters removed.
    pub fn base(&self) -> Self {
        let mut m = self.clone();
        m.detach_adapters();
        m
    }

    pub fn routing(&self, flat: &FlatSequence) -> Result<Routing> {
        Routing::from_flat(flat, self.config.grid_height, self.config.grid_width)
    }

    fn check_input(&self, flat: &FlatSequence) -> Result<()> {
        if flat.is_empty() {
            return Err(Error::Contract("empty sequence".into()));
        }
        if flat.len() > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                flat.len(),
                self.config.max_seq_len
            )));
        }
        for (p, e) in flat.elements().iter().enumerate() {
            match e {
                Element::Token(t) if *t >= self.config.vocab_size => {
                    return Err(Error::Contract(format!(
                        "token {t} at {p} outside vocabulary of {}",
                        self.config.vocab_size
                    )))
                }
                Element::Patch(v) if v.len() != self.config.patch_channels => {
                    return Err(Error::Contract(format!(
                        "patch at {p} has {} channels, expected {}",
                        v.len(),
                        self.config.patch_channels
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Input embeddings (token or projected patch, plus position) on a tape.
    pub fn embed_graph(&self, g: &mut Graph, flat: &FlatSequence) -> Result<Var> {
        self.check_input(flat)?;
        let n = flat.len();
        let d = self.config.d_model;
        let mut tok_idx = Vec::new();
        let mut tok_pos = Vec::new();
        let mut patch_pos = Vec::new();
        let mut patch_vals = Vec::new();
        for (p, e) in flat.elements().iter().enumerate() {
            match e {
                Element::Token(t) => {
                    tok_idx.push(Some(*t as usize));
                    tok_pos.push(p);
                }
                Element::Patch(v) => {
                    patch_pos.push(p);
                    patch_vals.extend_from_slice(v);
                }
            }
        }
        let mut parts = Vec::with_capacity(2);
        if !tok_pos.is_empty() {
            let table = g.param("tok_emb", &self.tok_emb);
            parts.push((g.gather_rows(table, tok_idx), tok_pos));
        }
        if !patch_pos.is_empty() {
            let patches =
                Array2::from_shape_vec((patch_pos.len(), self.config.patch_channels), patch_vals)
                    .expect("row-major patch buffer");
            let x = g.constant(patches);
            parts.push((self.projector.graph(g, "projector", x), patch_pos));
        }
        let content = g.scatter_rows(n, d, parts);
        let table = g.param("pos_emb", &self.pos_emb);
        let pos = g.gather_rows(table, (0..n).map(Some).collect());
        Ok(g.add(content, pos))
    }

    /// Plain embedding of a flat sequence.
    pub fn embed(&self, flat: &FlatSequence) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let x = self.embed_graph(&mut g, flat)?;
        Ok(g.value(x).clone())
    }

    /// Full forward on a tape. `dropout` enables training-mode adapter dropout.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        flat: &FlatSequence,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphOutput> {
        let routing = self.routing(flat)?;
        let mut x = self.embed_graph(g, flat)?;
        let hd = self.config.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        for (i, block) in self.blocks.iter().enumerate() {
            let prefix = format!("blocks.{i}");
            let mut site = |g: &mut Graph, layer: WrappedLayer, input: Var| {
                routed_apply_graph(
                    g,
                    &Block::site_prefix(&prefix, layer),
                    input,
                    &routing,
                    block.site(layer),
                    dropout.as_deref_mut(),
                )
            };
            let h = block.ln1.graph(g, &join(&prefix, "ln1"), x);
            let q = site(g, WrappedLayer::Query, h)?;
            let k = site(g, WrappedLayer::Key, h)?;
            let v = site(g, WrappedLayer::Value, h)?;
            let heads: Vec<Var> = (0..self.config.n_heads)
                .map(|head| {
                    let qh = g.col_slice(q, head * hd, hd);
                    let kh = g.col_slice(k, head * hd, hd);
                    let vh = g.col_slice(v, head * hd, hd);
                    let scores = g.matmul_t(qh, kh);
                    let scores = g.scale(scores, inv_sqrt);
                    let attn = g.causal_softmax(scores);
                    g.matmul(attn, vh)
                })
                .collect();
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            };
            let attn_out = site(g, WrappedLayer::Output, cat)?;
            x = g.add(x, attn_out);
            let h = block.ln2.graph(g, &join(&prefix, "ln2"), x);
            let up = site(g, WrappedLayer::FfnUp, h)?;
            let act = g.gelu(up);
            let down = site(g, WrappedLayer::FfnDown, act)?;
            x = g.add(x, down);
        }
        let hidden = self.ln_f.graph(g, "ln_f", x);
        let logits = self.lm_head.graph(g, "lm_head", hidden);
        let patches = self.image_head.graph(g, "image_head", hidden);
        Ok(GraphOutput {
            logits,
            patches,
            hidden,
        })
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, flat: &FlatSequence) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, flat, None)?;
        Ok(ForwardOutput {
            logits: g.value(out.logits).clone(),
            patches: g.value(out.patches).clone(),
            hidden: g.value(out.hidden).clone(),
        })
    }

    /// Unified objective `CE(text) + lambda * MSE(image)` over the masked positions.
    pub fn loss(
        &self,
        out: &ForwardOutput,
        flat: &FlatSequence,
        loss_mask: &[bool],
    ) -> Result<LossBreakdown> {
        let targets = LossTargets::new(flat, loss_mask, self.config.patch_channels)?;
        let mut g = Graph::new();
        let logits = g.constant(out.logits.clone());
        let patches = g.constant(out.patches.clone());
        let (_, breakdown) = self.loss_graph(&mut g, logits, patches, &targets);
        Ok(breakdown)
    }

    /// Loss on a tape; returns the scalar total node and its breakdown.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        logits: Var,
        patches: Var,
        targets: &LossTargets,
    ) -> (Var, LossBreakdown) {
        let lambda = self.config.loss_weight_mse;
        let ce = g.cross_entropy(logits, targets.text.clone());
        let mse = g.mse(patches, targets.image_rows.clone(), &targets.image_targets);
        let weighted = g.scale(mse, lambda);
        let total = g.add(ce, weighted);
        let ce_text = g.scalar(ce);
        let mse_image = g.scalar(mse);
        let breakdown = LossBreakdown {
            ce_text,
            mse_image,
            total: ce_text + lambda * mse_image,
            text_count: targets.text.len(),
            image_count: targets.image_rows.len(),
            text_empty: targets.text.is_empty(),
            image_empty: targets.image_rows.is_empty(),
        };
        (total, breakdown)
    }

    /// Loss and trainable-parameter gradients for one example.
    pub fn example_grad(
        &self,
        ex: &Example,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossBreakdown, BTreeMap<String, Array2<f64>>)> {
        let targets = LossTargets::new(&ex.flat, &ex.loss_mask, self.config.patch_channels)?;
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, &ex.flat, dropout)?;
        let (total, breakdown) = self.loss_graph(&mut g, out.logits, out.patches, &targets);
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss (ce {}, mse {})",
                breakdown.ce_text, breakdown.mse_image
            )));
        }
        Ok((breakdown, g.backward(total)))
    }

    /// Evaluation-mode loss for one example.
    pub fn example_loss(&self, ex: &Example) -> Result<LossBreakdown> {
        let out = self.forward(&ex.flat)?;
        self.loss(&out, &ex.flat, &ex.loss_mask)
    }
}

impl VisitParams for VlgModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "tok_emb"), &self.tok_emb);
        self.projector.visit(&join(prefix, "projector"), f);
        f(&join(prefix, "pos_emb"), &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        self.lm_head.visit(&join(prefix, "lm_head"), f);
        self.image_head.visit(&join(prefix, "image_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "tok_emb"), &mut self.tok_emb);
        self.projector.visit_mut(&join(prefix, "projector"), f);
        f(&join(prefix, "pos_emb"), &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        self.lm_head.visit_mut(&join(prefix, "lm_head"), f);
        self.image_head.visit_mut(&join(prefix, "image_head"), f);
    }
}

/// Whether a parameter name belongs to an adapter.
pub fn is_adapter_param(name: &str) -> bool {
    name.split('.').any(|part| part == "adapter")
}
