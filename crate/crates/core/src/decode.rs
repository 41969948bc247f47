//! Interleaved generation.
//!
//! The decoder runs the model one element at a time on plain arrays with a
//! key/value cache. Conv adapters keep, per wrapped sublayer, the input rows
//! of the current image in an `H x W` grid that is zero wherever no patch has
//! been produced yet; each step convolves the padded grid and reads its own
//! slot. Because the kernel only looks up and left, the zeros never reach
//! the slot being computed.
//!
//! Text steps sample a token. `<IMG>` switches to image mode, which emits
//! exactly `H * W` regression outputs and then appends `</IMG>` without
//! consulting the model. `</s>` ends generation.

use crate::adapters::{causal_conv2d, Adapter, RoutedAdapterSet};
use crate::autograd::gelu;
use crate::error::{Error, Result};
use crate::model::VlgModel;
use crate::seqcore::{
    Element, FlatSequence, InterleavedSequence, Segment, SpecialToken, TokenId, WrappedLayer,
};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { t: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub max_total_steps: usize,
    pub max_text_run: usize,
    pub sampling: Sampling,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_total_steps: 512,
            max_text_run: 64,
            sampling: Sampling::Greedy,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_total_steps == 0 || self.max_text_run == 0 {
            return Err(Error::Config("generation limits must be positive".into()));
        }
        if let Sampling::Temperature { t, .. } = self.sampling {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!(
                    "temperature must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Which adapter path a position takes, with its raster slot for images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Text,
    Image(usize),
}

/// Model outputs at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Array1<f64>,
    pub patch: Array1<f64>,
}

/// Plain-array incremental forward pass with per-layer caches.
#[derive(Debug, Clone)]
pub struct IncrementalCache<'m> {
    model: &'m VlgModel,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    /// Input grids of conv-routed sublayers for the image in progress.
    grids: HashMap<(usize, WrappedLayer), Array2<f64>>,
    len: usize,
    /// Patches of the current image fed so far, or `None` outside an image.
    image_fed: Option<usize>,
}

impl<'m> IncrementalCache<'m> {
    pub fn new(model: &'m VlgModel) -> Self {
        let d = model.config.d_model;
        let n = model.blocks.len();
        Self {
            model,
            keys: vec![Array2::zeros((0, d)); n],
            values: vec![Array2::zeros((0, d)); n],
            grids: HashMap::new(),
            len: 0,
            image_fed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Route of the next element: `<IMG>` and all but the last patch predict
    /// a patch, so they take the image path.
    fn route_for(&self, e: &Element) -> Result<Route> {
        let hw = self.model.config.grid_len();
        match (e, self.image_fed) {
            (Element::Token(t), None) if *t == SpecialToken::ImgStart.id() => Ok(Route::Image(0)),
            (Element::Token(t), Some(n)) if *t == SpecialToken::ImgEnd.id() && n == hw => {
                Ok(Route::Text)
            }
            (Element::Token(_), None) => Ok(Route::Text),
            (Element::Patch(_), Some(n)) if n + 1 < hw => Ok(Route::Image(n + 1)),
            (Element::Patch(_), Some(n)) if n + 1 == hw => Ok(Route::Text),
            _ => Err(Error::Structural(format!(
                "element at position {} breaks image bracketing",
                self.len
            ))),
        }
    }

    /// Feed one element and return the predictions made at its position.
    pub fn feed(&mut self, e: &Element) -> Result<Prediction> {
        let cfg = &self.model.config;
        if self.len >= cfg.max_seq_len {
            return Err(Error::Contract(format!(
                "context exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let route = self.route_for(e)?;
        if route == Route::Image(0) {
            self.grids.clear();
        }
        let x = self.embed(e)?;
        let pred = self.step(x, route)?;
        self.image_fed = match (e, self.image_fed) {
            (Element::Token(t), None) if *t == SpecialToken::ImgStart.id() => Some(0),
            (Element::Patch(_), Some(n)) => Some(n + 1),
            _ => None,
        };
        self.len += 1;
        Ok(pred)
    }

    fn embed(&self, e: &Element) -> Result<Array2<f64>> {
        let m = self.model;
        let mut x = match e {
            Element::Token(t) => {
                if *t >= m.config.vocab_size {
                    return Err(Error::Contract(format!("token {t} outside vocabulary")));
                }
                m.tok_emb
                    .value
                    .row(*t as usize)
                    .insert_axis(Axis(0))
                    .to_owned()
            }
            Element::Patch(v) => {
                if v.len() != m.config.patch_channels {
                    return Err(Error::Contract(format!(
                        "patch has {} channels, expected {}",
                        v.len(),
                        m.config.patch_channels
                    )));
                }
                let row = Array2::from_shape_vec((1, v.len()), v.clone()).expect("one row");
                m.projector.apply(row.view())?
            }
        };
        x += &m.pos_emb.value.row(self.len);
        Ok(x)
    }

    fn site(
        &mut self,
        layer_idx: usize,
        layer: WrappedLayer,
        input: ArrayView2<f64>,
        route: Route,
    ) -> Result<Array2<f64>> {
        let set: &RoutedAdapterSet = self.model.blocks[layer_idx].site(layer);
        let mut out = set.base.apply(input)?;
        let Some(adapter) = &set.adapter else {
            return Ok(out);
        };
        let delta = match (adapter, route) {
            (Adapter::SharedLinear(p), _) => p.delta(input),
            (Adapter::MoeLinear { text, .. }, Route::Text) => text.delta(input),
            (Adapter::MoeLinear { text, image }, Route::Image(_)) => {
                image.as_ref().unwrap_or(text).delta(input)
            }
            (Adapter::Lateralization { text, .. }, Route::Text) => text.delta(input),
            (Adapter::Lateralization { image, .. }, Route::Image(slot)) => {
                let (h, w) = (self.model.config.grid_height, self.model.config.grid_width);
                let grid = self
                    .grids
                    .entry((layer_idx, layer))
                    .or_insert_with(|| Array2::zeros((h * w, input.ncols())));
                grid.row_mut(slot).assign(&input.row(0));
                let conv = causal_conv2d(
                    grid.view(),
                    h,
                    w,
                    image.kernel.value.view(),
                    image.kernel_size,
                )?;
                conv.slice(s![slot..slot + 1, ..]).dot(&image.b.value.t()) * image.alpha
            }
        };
        out += &delta;
        Ok(out)
    }

    fn step(&mut self, mut x: Array2<f64>, route: Route) -> Result<Prediction> {
        let m = self.model;
        let cfg = &m.config;
        let hd = cfg.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        for i in 0..m.blocks.len() {
            let block = &m.blocks[i];
            let h = block.ln1.apply(&x);
            let q = self.site(i, WrappedLayer::Query, h.view(), route)?;
            let k = self.site(i, WrappedLayer::Key, h.view(), route)?;
            let v = self.site(i, WrappedLayer::Value, h.view(), route)?;
            self.keys[i].push_row(k.row(0)).expect("width d_model");
            self.values[i].push_row(v.row(0)).expect("width d_model");
            let mut heads = Array2::zeros((1, cfg.d_model));
            for head in 0..cfg.n_heads {
                let cols = s![.., head * hd..(head + 1) * hd];
                let scores = q.slice(cols).dot(&self.keys[i].slice(cols).t()) * inv_sqrt;
                // The newest query may attend to every cached key.
                let attn = softmax_row(scores.row(0).to_owned());
                let ctx = attn.dot(&self.values[i].slice(cols));
                heads
                    .slice_mut(s![0, head * hd..(head + 1) * hd])
                    .assign(&ctx);
            }
            let o = self.site(i, WrappedLayer::Output, heads.view(), route)?;
            x += &o;
            let h2 = block.ln2.apply(&x);
            let up = self
                .site(i, WrappedLayer::FfnUp, h2.view(), route)?
                .mapv(gelu);
            let down = self.site(i, WrappedLayer::FfnDown, up.view(), route)?;
            x += &down;
        }
        let hidden = m.ln_f.apply(&x);
        let logits = m.lm_head.apply(hidden.view())?;
        let patch = m.image_head.apply(hidden.view())?;
        Ok(Prediction {
            logits: logits.row(0).to_owned(),
            patch: patch.row(0).to_owned(),
        })
    }
}

fn softmax_row(scores: Array1<f64>) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = scores.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationState {
    pub mode: Mode,
    /// Prompt plus everything generated so far.
    pub context: Vec<Element>,
    pub prompt_len: usize,
    pub patches_emitted: usize,
    pub steps_taken: usize,
    pub text_run: usize,
    pub finished: bool,
    pub truncated: bool,
}

/// Result of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated continuation, without the final `</s>`.
    pub output: InterleavedSequence,
    /// Prompt plus continuation, ending in `</s>`.
    pub flat: FlatSequence,
    pub prompt_len: usize,
    pub truncated: bool,
    pub steps: usize,
    /// Predictions made at every position fed to the model, in order.
    pub predictions: Vec<Prediction>,
}

/// Step-by-step generation driver.
pub struct Generator<'m> {
    cache: IncrementalCache<'m>,
    cfg: GenerationConfig,
    state: GenerationState,
    last: Prediction,
    rng: Option<ChaCha8Rng>,
    predictions: Vec<Prediction>,
}

impl<'m> Generator<'m> {
    pub fn new(model: &'m VlgModel, prompt: &FlatSequence, cfg: GenerationConfig) -> Result<Self> {
        cfg.validate()?;
        if prompt.is_empty() {
            return Err(Error::Contract("prompt is empty".into()));
        }
        let (h, w) = (model.config.grid_height, model.config.grid_width);
        if prompt.spans().iter().any(|s| s.height != h || s.width != w) {
            return Err(Error::Structural(format!("prompt images must be {h}x{w}")));
        }
        if prompt
            .elements()
            .last()
            .is_some_and(|e| e.is_special(SpecialToken::EndOfSeq))
        {
            return Err(Error::Contract("prompt already ends with </s>".into()));
        }
        if prompt.len() + 1 >= model.config.max_seq_len {
            return Err(Error::Contract("prompt leaves no room to generate".into()));
        }
        let mut cache = IncrementalCache::new(model);
        let mut predictions = Vec::with_capacity(prompt.len());
        for e in prompt.elements() {
            predictions.push(cache.feed(e)?);
        }
        let last = predictions.last().cloned().expect("prompt is non-empty");
        let rng = match cfg.sampling {
            Sampling::Greedy => None,
            Sampling::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Ok(Self {
            cache,
            cfg,
            state: GenerationState {
                mode: Mode::Text,
                context: prompt.elements().to_vec(),
                prompt_len: prompt.len(),
                patches_emitted: 0,
                steps_taken: 0,
                text_run: 0,
                finished: false,
                truncated: false,
            },
            last,
            rng,
            predictions,
        })
    }

    pub fn state(&self) -> &GenerationState {
        &self.state
    }

    fn model(&self) -> &'m VlgModel {
        self.cache.model
    }

    fn push(&mut self, e: Element) -> Result<()> {
        self.last = self.cache.feed(&e)?;
        self.predictions.push(self.last.clone());
        self.state.context.push(e);
        Ok(())
    }

    fn close(&mut self, truncated: bool) {
        self.state
            .context
            .push(Element::Token(SpecialToken::EndOfSeq.id()));
        self.state.finished = true;
        self.state.truncated |= truncated;
        self.state.mode = Mode::Text;
    }

    /// Room left for elements that must be fed, keeping one slot for `</s>`.
    fn has_room(&self, n: usize) -> bool {
        self.state.context.len() + n < self.model().config.max_seq_len
    }

    fn pick_token(&mut self) -> TokenId {
        let mut logits = self.last.logits.clone();
        // Padding and `</IMG>` are never valid in text mode.
        logits[SpecialToken::Pad.id() as usize] = f64::NEG_INFINITY;
        logits[SpecialToken::ImgEnd.id() as usize] = f64::NEG_INFINITY;
        match (self.cfg.sampling, &mut self.rng) {
            (Sampling::Temperature { t, .. }, Some(rng)) => {
                let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let weights: Vec<f64> = logits.iter().map(|v| ((v - max) / t).exp()).collect();
                WeightedIndex::new(&weights)
                    .expect("at least one finite logit")
                    .sample(rng) as TokenId
            }
            _ => {
                let mut best = 0;
                for (i, v) in logits.iter().enumerate() {
                    if *v > logits[best] {
                        best = i;
                    }
                }
                best as TokenId
            }
        }
    }

    /// Emit one text-mode token.
    pub fn step_text(&mut self) -> Result<TokenId> {
        if self.state.finished || self.state.mode != Mode::Text {
            return Err(Error::Contract("step_text outside text mode".into()));
        }
        let mut token = self.pick_token();
        self.state.steps_taken += 1;
        let eos = SpecialToken::EndOfSeq.id();
        if token == SpecialToken::ImgStart.id() {
            self.state.text_run = 0;
            if !self.has_room(1) {
                self.close(true);
                return Ok(eos);
            }
            self.push(Element::Token(token))?;
            self.state.mode = Mode::Image;
            self.state.patches_emitted = 0;
            return Ok(token);
        }
        if token != eos {
            self.state.text_run += 1;
            if self.state.text_run > self.cfg.max_text_run || !self.has_room(1) {
                token = eos;
                self.state.truncated = true;
            }
        }
        if token == eos {
            self.close(false);
        } else {
            self.push(Element::Token(token))?;
        }
        Ok(token)
    }

    /// Emit one patch of the image in progress.
    pub fn step_image(&mut self) -> Result<Vec<f64>> {
        let hw = self.model().config.grid_len();
        if self.state.finished || self.state.mode != Mode::Image || self.state.patches_emitted >= hw
        {
            return Err(Error::Contract("step_image outside image mode".into()));
        }
        let patch = self.last.patch.to_vec();
        self.state.steps_taken += 1;
        // The last patch also needs a slot for `</IMG>`.
        let needed = if self.state.patches_emitted + 1 == hw {
            2
        } else {
            1
        };
        if !self.has_room(needed) {
            self.discard_image();
            return Ok(patch);
        }
        self.push(Element::Patch(patch.clone()))?;
        self.state.patches_emitted += 1;
        if self.state.patches_emitted == hw {
            self.push(Element::Token(SpecialToken::ImgEnd.id()))?;
            self.state.mode = Mode::Text;
            self.state.patches_emitted = 0;
        }
        Ok(patch)
    }

    /// Drop the unfinished image and close the sequence as truncated.
    fn discard_image(&mut self) {
        let start = self
            .state
            .context
            .iter()
            .rposition(|e| e.is_special(SpecialToken::ImgStart))
            .expect("image mode implies an open <IMG>");
        self.state.context.truncate(start);
        self.state.patches_emitted = 0;
        self.close(true);
    }

    /// Advance by one step in the current mode, enforcing the step limit.
    pub fn step(&mut self) -> Result<()> {
        if self.state.finished {
            return Ok(());
        }
        if self.state.steps_taken >= self.cfg.max_total_steps {
            match self.state.mode {
                Mode::Image => self.discard_image(),
                Mode::Text => self.close(true),
            }
            return Ok(());
        }
        match self.state.mode {
            Mode::Text => self.step_text().map(|_| ()),
            Mode::Image => self.step_image().map(|_| ()),
        }
    }

    pub fn run(mut self) -> Result<Generation> {
        while !self.state.finished {
            self.step()?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<Generation> {
        if !self.state.finished {
            return Err(Error::Contract("generation has not finished".into()));
        }
        let cfg = &self.model().config;
        let flat = FlatSequence::from_elements(
            self.state.context.clone(),
            cfg.grid_height,
            cfg.grid_width,
        )?;
        let tail = FlatSequence::from_elements(
            self.state.context[self.state.prompt_len..].to_vec(),
            cfg.grid_height,
            cfg.grid_width,
        )?;
        let (output, _) = tail.unflatten()?;
        Ok(Generation {
            output,
            flat,
            prompt_len: self.state.prompt_len,
            truncated: self.state.truncated,
            steps: self.state.steps_taken,
            predictions: self.predictions,
        })
    }
}

pub fn generate(
    model: &VlgModel,
    prompt: &FlatSequence,
    cfg: GenerationConfig,
) -> Result<Generation> {
    Generator::new(model, prompt, cfg)?.run()
}

/// Human-readable rendering: token ids (or decoded text), image markers, `</s>`.
pub fn transcript(seq: &InterleavedSequence, render: &dyn Fn(&[TokenId]) -> String) -> String {
    let mut parts = Vec::new();
    for seg in seq.segments() {
        match seg {
            Segment::Text(t) => parts.push(render(t)),
            Segment::Image(g) => parts.push(format!(
                "{}[{}x{}x{}]{}",
                SpecialToken::ImgStart.marker(),
                g.height(),
                g.width(),
                g.channels(),
                SpecialToken::ImgEnd.marker()
            )),
        }
    }
    parts.push(SpecialToken::EndOfSeq.marker().to_owned());
    parts.join(" ")
}

/// Token ids separated by spaces.
pub fn render_ids(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Largest gap between the decoder's per-step predictions and one full
/// forward pass over the finished sequence, as `(logits, patches)`.
pub fn incremental_gap(model: &VlgModel, generation: &Generation) -> Result<(f64, f64)> {
    let full = model.forward(&generation.flat)?;
    // Positions past the final `</s>` slot were discarded by truncation.
    let n = generation.flat.len() - 1;
    let mut gap = (0.0f64, 0.0f64);
    for (p, pred) in generation.predictions.iter().take(n).enumerate() {
        for (a, b) in pred.logits.iter().zip(full.logits.row(p)) {
            gap.0 = gap.0.max((a - b).abs());
        }
        for (a, b) in pred.patch.iter().zip(full.patches.row(p)) {
            gap.1 = gap.1.max((a - b).abs());
        }
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::VisitParams;
    use crate::seqcore::{AdapterVariant, FlatBuilder, ModelConfig, PatchGrid};
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 12,
            patch_channels: 4,
            grid_height: 2,
            grid_width: 3,
            lora_rank: 2,
            lora_alpha: 4.0,
            max_seq_len: 48,
            ..ModelConfig::toy()
        }
    }

    fn randomized(variant: AdapterVariant, seed: u64) -> VlgModel {
        let mut m = VlgModel::new(cfg()).unwrap();
        m.attach_adapters(variant, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.visit_mut("", &mut |_, p| {
            p.value.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        });
        m
    }

    fn prompt(with_image: bool) -> FlatSequence {
        let mut b = FlatBuilder::new();
        b.push_tokens(&[5, 6, 7]).unwrap();
        if with_image {
            let data = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
            b.push_image(&PatchGrid::new(2, 3, 4, data).unwrap());
            b.push_tokens(&[8]).unwrap();
        }
        b.finish()
    }

    /// Bias the lm head so that `token` always wins.
    fn force_token(m: &mut VlgModel, token: TokenId) {
        m.lm_head.weight.value.fill(0.0);
        m.lm_head.bias = Some(crate::params::Param::zeros(1, m.config.vocab_size as usize));
        m.lm_head.bias.as_mut().unwrap().value[[0, token as usize]] = 10.0;
    }

    #[test]
    fn eos_model_ends_immediately() {
        let mut m = VlgModel::new(cfg()).unwrap();
        force_token(&mut m, SpecialToken::EndOfSeq.id());
        let g = generate(
            &m,
            &prompt(false),
            GenerationConfig {
                max_total_steps: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(g.output.is_empty());
        assert!(!g.truncated);
        assert_eq!(g.steps, 1);
    }

    #[test]
    fn img_model_starts_with_image() {
        let mut m = VlgModel::new(cfg()).unwrap();
        force_token(&mut m, SpecialToken::ImgStart.id());
        let mut gen = Generator::new(&m, &prompt(false), GenerationConfig::default()).unwrap();
        assert_eq!(gen.step_text().unwrap(), SpecialToken::ImgStart.id());
        assert_eq!(gen.state().mode, Mode::Image);
        assert!(gen.step_text().is_err());
        for _ in 0..6 {
            gen.step_image().unwrap();
        }
        assert_eq!(gen.state().mode, Mode::Text);
        let ctx = &gen.state().context[3..];
        assert_eq!(ctx.len(), 8);
        assert!(ctx[0].is_special(SpecialToken::ImgStart));
        assert!(ctx[1..7].iter().all(Element::is_patch));
        assert!(ctx[7].is_special(SpecialToken::ImgEnd));
        assert!(gen.step_image().is_err());
    }

    #[test]
    fn image_model_truncates_cleanly() {
        let mut m = VlgModel::new(cfg()).unwrap();
        force_token(&mut m, SpecialToken::ImgStart.id());
        let g = generate(
            &m,
            &prompt(false),
            GenerationConfig {
                max_total_steps: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(g.truncated);
        // Two full images fit in 20 steps (7 each); the third is discarded.
        assert_eq!(g.output.images().count(), 2);
        assert!(g
            .flat
            .elements()
            .last()
            .unwrap()
            .is_special(SpecialToken::EndOfSeq));
    }

    #[test]
    fn text_run_limit_forces_eos() {
        let mut m = VlgModel::new(cfg()).unwrap();
        force_token(&mut m, 9);
        let g = generate(
            &m,
            &prompt(false),
            GenerationConfig {
                max_text_run: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(g.truncated);
        assert_eq!(g.output.text_tokens().count(), 4);
    }

    #[test]
    fn incremental_matches_full_forward() {
        for (i, v) in AdapterVariant::ALL.into_iter().enumerate() {
            let m = randomized(v, 10 + i as u64);
            for with_image in [false, true] {
                for sampling in [Sampling::Greedy, Sampling::Temperature { t: 1.5, seed: 3 }] {
                    let g = generate(
                        &m,
                        &prompt(with_image),
                        GenerationConfig {
                            max_total_steps: 30,
                            max_text_run: 10,
                            sampling,
                        },
                    )
                    .unwrap();
                    let (dl, dp) = incremental_gap(&m, &g).unwrap();
                    assert!(dl <= 1e-9 && dp <= 1e-9, "{v}: {dl} {dp}");
                }
            }
        }
    }

    #[test]
    fn prompt_with_image_routes_conv_path() {
        // Feeding a prompt containing an image through the cache must agree
        // with the full forward for the conv variant at every position.
        let m = randomized(AdapterVariant::Lateralization, 4);
        let p = prompt(true);
        let full = m.forward(&p).unwrap();
        let mut cache = IncrementalCache::new(&m);
        for (i, e) in p.elements().iter().enumerate() {
            let pred = cache.feed(e).unwrap();
            let d = (&pred.patch - &full.patches.row(i))
                .mapv(f64::abs)
                .fold(0.0f64, |a, &b| a.max(b));
            assert!(d < 1e-10, "position {i}: {d}");
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = randomized(AdapterVariant::MoeLinear, 8);
        let a = generate(&m, &prompt(true), GenerationConfig::default()).unwrap();
        let b = generate(&m, &prompt(true), GenerationConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transcript_marks_images() {
        let seq = InterleavedSequence::new(vec![
            Segment::Text(vec![5, 6]),
            Segment::Image(PatchGrid::zeros(2, 2, 1)),
        ])
        .unwrap();
        assert_eq!(transcript(&seq, &render_ids), "5 6 <IMG>[2x2x1]</IMG> </s>");
    }
}
