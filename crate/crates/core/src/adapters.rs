//! Low-rank adapters over frozen linear layers.
//!
//! * [`LinearLoraParams`]: `y = h W^T + alpha * h A^T B^T`.
//! * [`ConvLoraParams`]: the down-projection `A` is a `k x k` convolution over
//!   an image's grid of hidden states. The kernel only looks up and left:
//!   the grid is zero-padded with `k - 1` rows on top and `k - 1` columns on
//!   the left, stride 1, so output `(r, c)` reads inputs `(r - a, c - b)`
//!   for `0 <= a, b < k`.
//! * [`RoutedAdapterSet`]: a frozen base plus one adapter variant. Positions
//!   whose prediction target is an image patch take the image path; the
//!   rest take the text path; results are reassembled in sequence order.
//!
//! Every operation exists twice: on plain arrays (evaluation and
//! incremental decoding) and on the autograd tape (training).

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{join, Param, VisitParams};
use crate::seqcore::{AdapterVariant, FlatSequence, TargetModality};
use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense layer `y = x W^T + b` with `W` of shape `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(weight: Param, bias: Option<Param>) -> Self {
        Self { weight, bias }
    }

    pub fn init(d_in: usize, d_out: usize, bias: bool, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::normal(d_out, d_in, std, rng),
            bias: bias.then(|| Param::zeros(1, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d_in() {
            return Err(Error::Contract(format!(
                "input width {} does not match layer d_in {}",
                x.ncols(),
                self.d_in()
            )));
        }
        let mut y = x.dot(&self.weight.value.t());
        if let Some(b) = &self.bias {
            y += &b.value.row(0);
        }
        Ok(y)
    }

    pub fn graph(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let w = g.param(&join(prefix, "weight"), &self.weight);
        let y = g.matmul_t(x, w);
        match &self.bias {
            Some(b) => {
                let b = g.param(&join(prefix, "bias"), b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

impl VisitParams for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLoraParams {
    /// `r x d_in`
    pub a: Param,
    /// `d_out x r`
    pub b: Param,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl LinearLoraParams {
    /// `A` uniform in `+-1/sqrt(d_in)`, `B` zero.
    pub fn zero_init(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout_p: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            a: Param::uniform(rank, d_in, 1.0 / (d_in as f64).sqrt(), rng),
            b: Param::zeros(d_out, rank),
            alpha,
            dropout_p,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.value.nrows()
    }

    fn check(&self, d_in: usize, d_out: usize) -> Result<()> {
        let r = self.rank();
        if self.a.shape() != (r, d_in) || self.b.shape() != (d_out, r) {
            return Err(Error::Contract(format!(
                "linear LoRA shapes A{:?} B{:?} do not fit d_in={d_in} d_out={d_out}",
                self.a.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }

    /// `alpha * x A^T B^T`
    pub fn delta(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.a.value.t()).dot(&self.b.value.t()) * self.alpha
    }

    fn graph(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let a = g.param(&join(prefix, "a"), &self.a);
        let b = g.param(&join(prefix, "b"), &self.b);
        let down = g.matmul_t(x, a);
        let up = g.matmul_t(down, b);
        g.scale(up, self.alpha)
    }
}

impl VisitParams for LinearLoraParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "a"), &self.a);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "a"), &mut self.a);
        f(&join(prefix, "b"), &mut self.b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLoraParams {
    /// `(k * k * c_in) x r`. Row `(dy * k + dx) * c_in + c` holds the weights
    /// of input channel `c` at input offset `(dy - (k-1), dx - (k-1))`.
    pub kernel: Param,
    /// `c_out x r`
    pub b: Param,
    pub kernel_size: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl ConvLoraParams {
    /// Kernel uniform in `+-1/sqrt(k*k*c_in)`, `B` zero.
    pub fn zero_init(
        c_in: usize,
        c_out: usize,
        rank: usize,
        kernel_size: usize,
        alpha: f64,
        dropout_p: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel_size * kernel_size * c_in;
        Self {
            kernel: Param::uniform(fan_in, rank, 1.0 / (fan_in as f64).sqrt(), rng),
            b: Param::zeros(c_out, rank),
            kernel_size,
            alpha,
            dropout_p,
        }
    }

    /// Build a `k = 1` conv adapter from a linear LoRA's `A` (`r x c_in`).
    pub fn from_linear_a(a: &Array2<f64>, b: Param, alpha: f64) -> Self {
        Self {
            kernel: Param::trainable(a.t().to_owned()),
            b,
            kernel_size: 1,
            alpha,
            dropout_p: 0.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.kernel.value.ncols()
    }

    pub fn c_in(&self) -> usize {
        self.kernel.value.nrows() / (self.kernel_size * self.kernel_size)
    }

    fn check(&self, c_in: usize, c_out: usize) -> Result<()> {
        let k = self.kernel_size;
        let r = self.rank();
        if self.kernel.shape() != (k * k * c_in, r) || self.b.shape() != (c_out, r) {
            return Err(Error::Contract(format!(
                "conv LoRA shapes kernel{:?} B{:?} do not fit c_in={c_in} c_out={c_out} k={k}",
                self.kernel.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

impl VisitParams for ConvLoraParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "kernel"), &self.kernel);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// For each kernel tap `dy * k + dx`, the source raster slot feeding each
/// output slot, or `None` where the tap lands in the zero padding.
pub fn conv_taps(height: usize, width: usize, k: usize) -> Result<Vec<Vec<Option<usize>>>> {
    if k == 0 || k > height + 1 || k > width + 1 {
        return Err(Error::Config(format!(
            "kernel {k} does not fit a {height}x{width} grid padded by {}",
            k.saturating_sub(1)
        )));
    }
    let mut taps = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            let idx = (0..height * width)
                .map(|slot| {
                    let (r, c) = (slot / width, slot % width);
                    let sr = (r + dy).checked_sub(k - 1)?;
                    let sc = (c + dx).checked_sub(k - 1)?;
                    Some(sr * width + sc)
                })
                .collect();
            taps.push(idx);
        }
    }
    Ok(taps)
}

/// Causal `k x k` convolution of an `(height*width) x c_in` raster grid to
/// `(height*width) x r`. Stride 1, no bias, zero padding on top and left.
pub fn causal_conv2d(
    grid: ArrayView2<f64>,
    height: usize,
    width: usize,
    kernel: ArrayView2<f64>,
    k: usize,
) -> Result<Array2<f64>> {
    let c_in = grid.ncols();
    if grid.nrows() != height * width {
        return Err(Error::Contract(format!(
            "grid has {} rows for {height}x{width}",
            grid.nrows()
        )));
    }
    if kernel.nrows() != k * k * c_in {
        return Err(Error::Contract(format!(
            "kernel has {} rows, expected {}",
            kernel.nrows(),
            k * k * c_in
        )));
    }
    let taps = conv_taps(height, width, k)?;
    let mut out = Array2::zeros((height * width, kernel.ncols()));
    for (t, idx) in taps.iter().enumerate() {
        let w = kernel.slice(s![t * c_in..(t + 1) * c_in, ..]);
        for (slot, src) in idx.iter().enumerate() {
            if let Some(src) = src {
                let contrib = grid.row(*src).dot(&w);
                let mut row = out.row_mut(slot);
                row += &contrib;
            }
        }
    }
    Ok(out)
}

/// `T(I) = I W^T + alpha * Conv(I) B^T`, the base applied per patch.
pub fn conv_lora_apply(
    grid: ArrayView2<f64>,
    height: usize,
    width: usize,
    p: &ConvLoraParams,
    base: &Linear,
) -> Result<Array2<f64>> {
    if grid.ncols() != base.d_in() {
        return Err(Error::Contract(format!(
            "grid channels {} do not match base d_in {}",
            grid.ncols(),
            base.d_in()
        )));
    }
    p.check(base.d_in(), base.d_out())?;
    let conv = causal_conv2d(grid, height, width, p.kernel.value.view(), p.kernel_size)?;
    Ok(base.apply(grid)? + conv.dot(&p.b.value.t()) * p.alpha)
}

/// `T(h) = h W^T + alpha * h A^T B^T`, evaluation mode.
pub fn linear_lora_apply(
    h: ArrayView2<f64>,
    p: &LinearLoraParams,
    base: &Linear,
) -> Result<Array2<f64>> {
    p.check(base.d_in(), base.d_out())?;
    Ok(base.apply(h)? + p.delta(h))
}

/// Training-mode variant: inverted dropout on the adapter input only.
pub fn linear_lora_apply_train(
    h: ArrayView2<f64>,
    p: &LinearLoraParams,
    base: &Linear,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    p.check(base.d_in(), base.d_out())?;
    let mask = dropout_mask(h.dim(), p.dropout_p, rng);
    let dropped = &h * &mask;
    Ok(base.apply(h)? + p.delta(dropped.view()))
}

pub fn dropout_mask(dim: (usize, usize), p: f64, rng: &mut impl Rng) -> Array2<f64> {
    if p <= 0.0 {
        return Array2::ones(dim);
    }
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(dim, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// The adapter attached to one frozen linear layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    SharedLinear(LinearLoraParams),
    /// `image: None` ties the image path to the text parameters.
    MoeLinear {
        text: LinearLoraParams,
        image: Option<LinearLoraParams>,
    },
    Lateralization {
        text: LinearLoraParams,
        image: ConvLoraParams,
    },
}

/// Shape of the adapter to build for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterDims {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: f64,
    pub kernel_size: usize,
    pub dropout_p: f64,
}

impl Adapter {
    /// Fresh adapter whose contribution is exactly zero.
    pub fn zero_init(variant: AdapterVariant, dims: AdapterDims, rng: &mut impl Rng) -> Self {
        let AdapterDims {
            d_in,
            d_out,
            rank,
            alpha,
            kernel_size,
            dropout_p,
        } = dims;
        let lin =
            |rng: &mut _| LinearLoraParams::zero_init(d_in, d_out, rank, alpha, dropout_p, rng);
        match variant {
            AdapterVariant::SharedLinear => Adapter::SharedLinear(lin(rng)),
            AdapterVariant::MoeLinear => {
                let text = lin(rng);
                let image = lin(rng);
                Adapter::MoeLinear {
                    text,
                    image: Some(image),
                }
            }
            AdapterVariant::Lateralization => {
                let text = lin(rng);
                let image = ConvLoraParams::zero_init(
                    d_in,
                    d_out,
                    rank,
                    kernel_size,
                    alpha,
                    dropout_p,
                    rng,
                );
                Adapter::Lateralization { text, image }
            }
        }
    }

    pub fn zero_init_seeded(variant: AdapterVariant, dims: AdapterDims, seed: u64) -> Self {
        Self::zero_init(variant, dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn variant(&self) -> AdapterVariant {
        match self {
            Adapter::SharedLinear(_) => AdapterVariant::SharedLinear,
            Adapter::MoeLinear { .. } => AdapterVariant::MoeLinear,
            Adapter::Lateralization { .. } => AdapterVariant::Lateralization,
        }
    }

    fn dropout_p(&self) -> f64 {
        match self {
            Adapter::SharedLinear(p) => p.dropout_p,
            Adapter::MoeLinear { text, .. } => text.dropout_p,
            Adapter::Lateralization { text, .. } => text.dropout_p,
        }
    }

    /// Path used for image-target positions, if the variant routes.
    fn image_path(&self) -> Option<ImagePath<'_>> {
        match self {
            Adapter::SharedLinear(_) => None,
            Adapter::MoeLinear { text, image } => {
                Some(ImagePath::Linear(image.as_ref().unwrap_or(text)))
            }
            Adapter::Lateralization { image, .. } => Some(ImagePath::Conv(image)),
        }
    }

    fn text_params(&self) -> &LinearLoraParams {
        match self {
            Adapter::SharedLinear(p) => p,
            Adapter::MoeLinear { text, .. } => text,
            Adapter::Lateralization { text, .. } => text,
        }
    }

    fn text_name(&self) -> &'static str {
        match self {
            Adapter::SharedLinear(_) => "lora",
            _ => "text",
        }
    }

    fn check(&self, d_in: usize, d_out: usize) -> Result<()> {
        self.text_params().check(d_in, d_out)?;
        match self.image_path() {
            Some(ImagePath::Linear(p)) => p.check(d_in, d_out),
            Some(ImagePath::Conv(p)) => p.check(d_in, d_out),
            None => Ok(()),
        }
    }
}

enum ImagePath<'a> {
    Linear(&'a LinearLoraParams),
    Conv(&'a ConvLoraParams),
}

impl VisitParams for Adapter {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Adapter::SharedLinear(p) => p.visit(&join(prefix, "lora"), f),
            Adapter::MoeLinear { text, image } => {
                text.visit(&join(prefix, "text"), f);
                if let Some(image) = image {
                    image.visit(&join(prefix, "image"), f);
                }
            }
            Adapter::Lateralization { text, image } => {
                text.visit(&join(prefix, "text"), f);
                image.visit(&join(prefix, "conv"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Adapter::SharedLinear(p) => p.visit_mut(&join(prefix, "lora"), f),
            Adapter::MoeLinear { text, image } => {
                text.visit_mut(&join(prefix, "text"), f);
                if let Some(image) = image {
                    image.visit_mut(&join(prefix, "image"), f);
                }
            }
            Adapter::Lateralization { text, image } => {
                text.visit_mut(&join(prefix, "text"), f);
                image.visit_mut(&join(prefix, "conv"), f);
            }
        }
    }
}

/// Per-position routing keys plus the image spans the conv path reshapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    mask: Vec<TargetModality>,
    /// Flat index of the first routed position (the `<IMG>` token) per image.
    span_starts: Vec<usize>,
    height: usize,
    width: usize,
}

impl Routing {
    pub fn new(
        mask: Vec<TargetModality>,
        span_starts: Vec<usize>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let hw = height * width;
        let mut covered = vec![false; mask.len()];
        for &start in &span_starts {
            let end = start + hw;
            if end > mask.len() {
                return Err(Error::Structural(format!(
                    "image span at {start} needs {hw} positions, sequence has {}",
                    mask.len()
                )));
            }
            for p in start..end {
                if covered[p] {
                    return Err(Error::Structural(format!("image spans overlap at {p}")));
                }
                covered[p] = true;
            }
        }
        for (p, (m, c)) in mask.iter().zip(&covered).enumerate() {
            if (*m == TargetModality::Image) != *c {
                return Err(Error::Structural(format!(
                    "position {p}: image-target positions must form spans of exactly {hw}"
                )));
            }
        }
        Ok(Self {
            mask,
            span_starts,
            height,
            width,
        })
    }

    /// Routing for a flattened sequence whose images are all `height x width`.
    pub fn from_flat(flat: &FlatSequence, height: usize, width: usize) -> Result<Self> {
        for span in flat.spans() {
            if span.height != height || span.width != width {
                return Err(Error::Structural(format!(
                    "image at {} is {}x{}, model expects {height}x{width}",
                    span.start, span.height, span.width
                )));
            }
        }
        Self::new(
            flat.targets().to_vec(),
            flat.spans().iter().map(|s| s.start).collect(),
            height,
            width,
        )
    }

    pub fn all_text(n: usize, height: usize, width: usize) -> Self {
        Self {
            mask: vec![TargetModality::Text; n],
            span_starts: Vec::new(),
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn mask(&self) -> &[TargetModality] {
        &self.mask
    }

    pub fn span_starts(&self) -> &[usize] {
        &self.span_starts
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn text_positions(&self) -> Vec<usize> {
        (0..self.mask.len())
            .filter(|&p| self.mask[p] == TargetModality::Text)
            .collect()
    }

    /// Image-routed positions, image by image in raster order.
    pub fn image_positions(&self) -> Vec<usize> {
        let hw = self.height * self.width;
        self.span_starts.iter().flat_map(|&s| s..s + hw).collect()
    }
}

/// A frozen linear layer with an optional routed adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedAdapterSet {
    pub base: Linear,
    pub adapter: Option<Adapter>,
}

impl RoutedAdapterSet {
    pub fn bare(base: Linear) -> Self {
        Self {
            base,
            adapter: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.base.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.base.d_out()
    }
}

impl VisitParams for RoutedAdapterSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.base.visit(prefix, f);
        if let Some(a) = &self.adapter {
            a.visit(&join(prefix, "adapter"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.base.visit_mut(prefix, f);
        if let Some(a) = &mut self.adapter {
            a.visit_mut(&join(prefix, "adapter"), f);
        }
    }
}

/// Apply a routed adapter set to `N x d_in` hidden states (evaluation mode).
pub fn routed_apply(
    hidden: ArrayView2<f64>,
    routing: &Routing,
    set: &RoutedAdapterSet,
) -> Result<Array2<f64>> {
    routed_apply_ordered(hidden, routing, set, false)
}

/// As [`routed_apply`], choosing which modality group is processed first.
pub fn routed_apply_ordered(
    hidden: ArrayView2<f64>,
    routing: &Routing,
    set: &RoutedAdapterSet,
    image_first: bool,
) -> Result<Array2<f64>> {
    if hidden.nrows() != routing.len() {
        return Err(Error::Contract(format!(
            "{} hidden rows but routing covers {}",
            hidden.nrows(),
            routing.len()
        )));
    }
    let mut out = set.base.apply(hidden)?;
    let Some(adapter) = &set.adapter else {
        return Ok(out);
    };
    adapter.check(set.d_in(), set.d_out())?;
    let Some(image_path) = adapter.image_path() else {
        out += &adapter.text_params().delta(hidden);
        return Ok(out);
    };

    let text_group = |out: &mut Array2<f64>| {
        let pos = routing.text_positions();
        let rows = hidden.select(ndarray::Axis(0), &pos);
        let delta = adapter.text_params().delta(rows.view());
        for (i, &p) in pos.iter().enumerate() {
            let mut r = out.row_mut(p);
            r += &delta.row(i);
        }
    };
    let image_group = |out: &mut Array2<f64>| -> Result<()> {
        let (h, w) = routing.grid();
        let hw = h * w;
        for &start in routing.span_starts() {
            let grid = hidden.slice(s![start..start + hw, ..]);
            let delta = match &image_path {
                ImagePath::Linear(p) => p.delta(grid),
                ImagePath::Conv(p) => {
                    causal_conv2d(grid, h, w, p.kernel.value.view(), p.kernel_size)?
                        .dot(&p.b.value.t())
                        * p.alpha
                }
            };
            let mut block = out.slice_mut(s![start..start + hw, ..]);
            block += &delta;
        }
        Ok(())
    };
    if image_first {
        image_group(&mut out)?;
        text_group(&mut out);
    } else {
        text_group(&mut out);
        image_group(&mut out)?;
    }
    Ok(out)
}

/// Training-time dropout source for the adapter input; `None` means evaluation.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

/// [`routed_apply`] on the autograd tape. Parameters register under `prefix`
/// with the same names [`VisitParams`] produces.
pub fn routed_apply_graph(
    g: &mut Graph,
    prefix: &str,
    x: Var,
    routing: &Routing,
    set: &RoutedAdapterSet,
    dropout: DropoutRng<'_>,
) -> Result<Var> {
    let (n, d_in) = g.value(x).dim();
    if n != routing.len() || d_in != set.d_in() {
        return Err(Error::Contract(format!(
            "hidden {n}x{d_in} does not fit routing {} / d_in {}",
            routing.len(),
            set.d_in()
        )));
    }
    let base = set.base.graph(g, prefix, x);
    let Some(adapter) = &set.adapter else {
        return Ok(base);
    };
    adapter.check(set.d_in(), set.d_out())?;
    let prefix = join(prefix, "adapter");

    let adapter_in = match dropout {
        Some(rng) if adapter.dropout_p() > 0.0 => {
            let mask = dropout_mask((n, d_in), adapter.dropout_p(), rng);
            g.mul_const(x, mask)
        }
        _ => x,
    };

    let text_params = adapter.text_params();
    let text_prefix = join(&prefix, adapter.text_name());
    let Some(image_path) = adapter.image_path() else {
        let delta = text_params.graph(g, &text_prefix, adapter_in);
        return Ok(g.add(base, delta));
    };

    let mut parts = Vec::with_capacity(2);
    let text_pos = routing.text_positions();
    if !text_pos.is_empty() {
        let rows = g.gather_rows(adapter_in, text_pos.iter().map(|&p| Some(p)).collect());
        parts.push((text_params.graph(g, &text_prefix, rows), text_pos));
    }
    let image_pos = routing.image_positions();
    if !image_pos.is_empty() {
        let delta = match image_path {
            ImagePath::Linear(p) => {
                let rows = g.gather_rows(adapter_in, image_pos.iter().map(|&p| Some(p)).collect());
                // A tied MoE image path shares the text parameter names.
                let name = match adapter {
                    Adapter::MoeLinear { image: None, .. } => text_prefix.clone(),
                    _ => join(&prefix, "image"),
                };
                p.graph(g, &name, rows)
            }
            ImagePath::Conv(p) => {
                let (h, w) = routing.grid();
                let taps = conv_taps(h, w, p.kernel_size)?;
                let cols: Vec<Var> = taps
                    .iter()
                    .map(|tap| {
                        let idx = routing
                            .span_starts()
                            .iter()
                            .flat_map(|&start| tap.iter().map(move |src| src.map(|s| start + s)))
                            .collect();
                        g.gather_rows(adapter_in, idx)
                    })
                    .collect();
                let im2col = if cols.len() == 1 {
                    cols[0]
                } else {
                    g.concat_cols(&cols)
                };
                let conv_prefix = join(&prefix, "conv");
                let kernel = g.param(&join(&conv_prefix, "kernel"), &p.kernel);
                let b = g.param(&join(&conv_prefix, "b"), &p.b);
                let down = g.matmul(im2col, kernel);
                let up = g.matmul_t(down, b);
                g.scale(up, p.alpha)
            }
        };
        parts.push((delta, image_pos));
    }
    let delta = g.scatter_rows(n, set.d_out(), parts);
    Ok(g.add(base, delta))
}
