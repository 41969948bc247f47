use super::grid::PatchGrid;
use super::vocab::{is_special, SpecialToken, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(Vec<TokenId>),
    Image(PatchGrid),
}

/// Ordered text runs and images. Adjacent text runs are merged on
/// construction so that flattening and unflattening are inverse.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterleavedSequence {
    segments: Vec<Segment>,
}

impl InterleavedSequence {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
        for seg in segments {
            match seg {
                Segment::Text(tokens) => {
                    if tokens.is_empty() {
                        return Err(Error::Structural("empty text segment".into()));
                    }
                    if let Some(t) = tokens.iter().find(|&&t| is_special(t)) {
                        return Err(Error::Structural(format!(
                            "special token {t} inside a text segment"
                        )));
                    }
                    if let Some(Segment::Text(prev)) = out.last_mut() {
                        prev.extend(tokens);
                    } else {
                        out.push(Segment::Text(tokens));
                    }
                }
                img @ Segment::Image(_) => out.push(img),
            }
        }
        Ok(Self { segments: out })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &PatchGrid> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image(g) => Some(g),
            Segment::Text(_) => None,
        })
    }

    pub fn text_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t.iter().copied()),
                Segment::Image(_) => None,
            })
            .flatten()
    }

    /// Flat positions this sequence occupies: one per token, `2 + h*w` per image.
    pub fn flat_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.len(),
                Segment::Image(g) => g.len() + 2,
            })
            .sum()
    }
}

/// One flat position.
#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    Token(TokenId),
    Patch(Vec<f64>),
}

impl Element {
    pub fn is_patch(&self) -> bool {
        matches!(self, Element::Patch(_))
    }

    pub fn token(&self) -> Option<TokenId> {
        match self {
            Element::Token(t) => Some(*t),
            Element::Patch(_) => None,
        }
    }

    pub fn is_special(&self, s: SpecialToken) -> bool {
        self.token() == Some(s.id())
    }
}

/// Modality of the element a position is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetModality {
    Text,
    Image,
}

/// Flat positions covered by one image. `start` is the index of its `<IMG>`
/// token; the image-routed positions are `start .. start + height*width`
/// (the `<IMG>` position and all but the last patch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpan {
    pub start: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageSpan {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn routed(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }

    /// Flat index of the `</IMG>` token.
    pub fn end(&self) -> usize {
        self.start + self.len() + 1
    }
}

/// A flattened sequence with its per-position routing keys.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatSequence {
    elements: Vec<Element>,
    targets: Vec<TargetModality>,
    spans: Vec<ImageSpan>,
}

impl FlatSequence {
    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn targets(&self) -> &[TargetModality] {
        &self.targets
    }

    pub fn spans(&self) -> &[ImageSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Parse a raw element stream, checking bracketing. Every image must be
    /// `height x width`. `</s>` may only appear as the final element.
    pub fn from_elements(elements: Vec<Element>, height: usize, width: usize) -> Result<Self> {
        let hw = height * width;
        let mut spans = Vec::new();
        let mut i = 0;
        while i < elements.len() {
            match &elements[i] {
                Element::Patch(_) => {
                    return Err(Error::Structural(format!(
                        "patch at position {i} outside <IMG> brackets"
                    )))
                }
                Element::Token(t) => match SpecialToken::from_id(*t) {
                    Some(SpecialToken::ImgStart) => {
                        let patches = elements[i + 1..]
                            .iter()
                            .take_while(|e| e.is_patch())
                            .count();
                        if patches != hw {
                            return Err(Error::Structural(format!(
                                "image at position {i} has {patches} patches, expected {hw}"
                            )));
                        }
                        if !matches!(elements.get(i + 1 + hw), Some(e) if e.is_special(SpecialToken::ImgEnd))
                        {
                            return Err(Error::Structural(format!(
                                "image at position {i} is not closed by </IMG>"
                            )));
                        }
                        spans.push(ImageSpan {
                            start: i,
                            height,
                            width,
                        });
                        i += hw + 2;
                        continue;
                    }
                    Some(SpecialToken::ImgEnd) => {
                        return Err(Error::Structural(format!(
                            "unmatched </IMG> at position {i}"
                        )))
                    }
                    Some(SpecialToken::Pad) => {
                        return Err(Error::Structural(format!("pad token at position {i}")))
                    }
                    Some(SpecialToken::EndOfSeq) if i + 1 != elements.len() => {
                        return Err(Error::Structural(format!(
                            "</s> at position {i} is not the final element"
                        )))
                    }
                    _ => {}
                },
            }
            i += 1;
        }
        Ok(Self::from_parts(elements, spans))
    }

    fn from_parts(elements: Vec<Element>, spans: Vec<ImageSpan>) -> Self {
        let targets = (0..elements.len())
            .map(|p| match elements.get(p + 1) {
                Some(Element::Patch(_)) => TargetModality::Image,
                _ => TargetModality::Text,
            })
            .collect();
        Self {
            elements,
            targets,
            spans,
        }
    }

    /// Recover the interleaved sequence. A trailing `</s>` is dropped and
    /// reported through the boolean.
    pub fn unflatten(&self) -> Result<(InterleavedSequence, bool)> {
        let mut segments = Vec::new();
        let mut text = Vec::new();
        let mut eos = false;
        let mut spans = self.spans.iter().peekable();
        let mut i = 0;
        while i < self.elements.len() {
            if let Some(span) = spans.peek().filter(|s| s.start == i) {
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                let patches: Vec<Vec<f64>> = self.elements[span.start + 1..span.end()]
                    .iter()
                    .map(|e| match e {
                        Element::Patch(p) => Ok(p.clone()),
                        Element::Token(_) => Err(Error::Structural("token inside image".into())),
                    })
                    .collect::<Result<_>>()?;
                segments.push(Segment::Image(PatchGrid::from_patches(
                    span.height,
                    span.width,
                    &patches,
                )?));
                i = span.end() + 1;
                spans.next();
                continue;
            }
            match &self.elements[i] {
                Element::Token(t) if *t == SpecialToken::EndOfSeq.id() => eos = true,
                Element::Token(t) => text.push(*t),
                Element::Patch(_) => return Err(Error::Structural(format!("stray patch at {i}"))),
            }
            i += 1;
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Ok((InterleavedSequence::new(segments)?, eos))
    }

    pub fn image_target_count(&self) -> usize {
        self.targets
            .iter()
            .filter(|t| **t == TargetModality::Image)
            .count()
    }
}

/// Incrementally assembles a flat sequence from token runs and sequences.
#[derive(Debug, Default)]
pub struct FlatBuilder {
    elements: Vec<Element>,
    spans: Vec<ImageSpan>,
}

impl FlatBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn push_tokens(&mut self, tokens: &[TokenId]) -> Result<&mut Self> {
        if let Some(t) = tokens.iter().find(|&&t| is_special(t)) {
            return Err(Error::Structural(format!(
                "special token {t} in a text run"
            )));
        }
        self.elements
            .extend(tokens.iter().map(|&t| Element::Token(t)));
        Ok(self)
    }

    pub fn push_image(&mut self, grid: &PatchGrid) -> &mut Self {
        self.spans.push(ImageSpan {
            start: self.elements.len(),
            height: grid.height(),
            width: grid.width(),
        });
        self.elements
            .push(Element::Token(SpecialToken::ImgStart.id()));
        self.elements
            .extend(grid.patches().map(|p| Element::Patch(p.to_vec())));
        self.elements
            .push(Element::Token(SpecialToken::ImgEnd.id()));
        self
    }

    pub fn push_sequence(&mut self, seq: &InterleavedSequence) -> &mut Self {
        for seg in seq.segments() {
            match seg {
                Segment::Text(t) => {
                    self.elements.extend(t.iter().map(|&t| Element::Token(t)));
                }
                Segment::Image(g) => {
                    self.push_image(g);
                }
            }
        }
        self
    }

    pub fn push_eos(&mut self) -> &mut Self {
        self.elements
            .push(Element::Token(SpecialToken::EndOfSeq.id()));
        self
    }

    pub fn finish(self) -> FlatSequence {
        FlatSequence::from_parts(self.elements, self.spans)
    }
}

/// Flatten an interleaved sequence into elements plus the target-modality mask.
///
/// A position routes to the image path iff the element after it is a patch,
/// so each image contributes exactly `h*w` image-target positions: its
/// `<IMG>` token and every patch except the last.
pub fn flatten(seq: &InterleavedSequence) -> FlatSequence {
    let mut b = FlatBuilder::new();
    b.push_sequence(seq);
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TargetModality::{Image as I, Text as T};

    fn grid(h: usize, w: usize, seed: f64) -> PatchGrid {
        PatchGrid::new(h, w, 2, (0..h * w * 2).map(|i| seed + i as f64).collect()).unwrap()
    }

    #[test]
    fn two_by_two_mask() {
        let seq = InterleavedSequence::new(vec![
            Segment::Text(vec![10, 11]),
            Segment::Image(grid(2, 2, 0.0)),
            Segment::Text(vec![12]),
        ])
        .unwrap();
        let flat = flatten(&seq);
        assert_eq!(flat.len(), 2 + 6 + 1);
        // t1, t2, <IMG>, p0, p1, p2, p3, </IMG>, t3
        assert_eq!(flat.targets(), &[T, T, I, I, I, I, T, T, T]);
    }

    #[test]
    fn text_only_all_text() {
        let seq = InterleavedSequence::new(vec![Segment::Text(vec![5, 6, 7])]).unwrap();
        let flat = flatten(&seq);
        assert!(flat.targets().iter().all(|t| *t == T));
    }

    #[test]
    fn two_five_by_five_images() {
        let seq = InterleavedSequence::new(vec![
            Segment::Text(vec![9]),
            Segment::Image(grid(5, 5, 0.0)),
            Segment::Image(grid(5, 5, 100.0)),
            Segment::Text(vec![9]),
        ])
        .unwrap();
        let flat = flatten(&seq);
        // Hand enumeration: t=0, <IMG>=1, patches 2..=26, </IMG>=27,
        // <IMG>=28, patches 29..=53, </IMG>=54, t=55.
        assert_eq!(flat.len(), 56);
        let image_positions: Vec<usize> = flat
            .targets()
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == I)
            .map(|(p, _)| p)
            .collect();
        let expected: Vec<usize> = (1..=25).chain(28..=52).collect();
        assert_eq!(image_positions, expected);
        // 25th patch of each image targets </IMG>.
        assert_eq!(flat.targets()[26], T);
        assert_eq!(flat.targets()[53], T);
        for span in flat.spans() {
            assert_eq!(
                span.routed().filter(|&p| flat.targets()[p] == I).count(),
                25
            );
        }
    }

    #[test]
    fn rejects_bad_bracketing() {
        let p = || Element::Patch(vec![0.0, 0.0]);
        let tok = |t: SpecialToken| Element::Token(t.id());
        // patch without <IMG>
        assert!(FlatSequence::from_elements(vec![Element::Token(5), p()], 1, 1).is_err());
        // missing </IMG>
        assert!(FlatSequence::from_elements(vec![tok(SpecialToken::ImgStart), p()], 1, 1).is_err());
        // wrong patch count
        assert!(FlatSequence::from_elements(
            vec![
                tok(SpecialToken::ImgStart),
                p(),
                p(),
                tok(SpecialToken::ImgEnd)
            ],
            1,
            1
        )
        .is_err());
        // stray </IMG>
        assert!(FlatSequence::from_elements(vec![tok(SpecialToken::ImgEnd)], 1, 1).is_err());
        // eos in the middle
        assert!(FlatSequence::from_elements(
            vec![tok(SpecialToken::EndOfSeq), Element::Token(5)],
            1,
            1
        )
        .is_err());
        // pad
        assert!(FlatSequence::from_elements(vec![tok(SpecialToken::Pad)], 1, 1).is_err());
        // special tokens smuggled into text segments
        assert!(InterleavedSequence::new(vec![Segment::Text(vec![1])]).is_err());
        assert!(InterleavedSequence::new(vec![Segment::Text(vec![])]).is_err());
        let ok = FlatSequence::from_elements(
            vec![
                tok(SpecialToken::ImgStart),
                p(),
                tok(SpecialToken::ImgEnd),
                tok(SpecialToken::EndOfSeq),
            ],
            1,
            1,
        )
        .unwrap();
        assert_eq!(ok.targets(), &[I, T, T, T]);
    }

    #[test]
    fn adjacent_text_merges() {
        let seq =
            InterleavedSequence::new(vec![Segment::Text(vec![5]), Segment::Text(vec![6])]).unwrap();
        assert_eq!(seq.segments(), &[Segment::Text(vec![5, 6])]);
    }

    fn arb_sequence() -> impl Strategy<Value = InterleavedSequence> {
        let seg = prop_oneof![
            proptest::collection::vec(4u32..50, 1..5).prop_map(Segment::Text),
            (1usize..4, 1usize..4, -10.0f64..10.0)
                .prop_map(|(h, w, s)| Segment::Image(grid(h, w, s))),
        ];
        proptest::collection::vec(seg, 0..6).prop_map(|s| InterleavedSequence::new(s).unwrap())
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(seq in arb_sequence()) {
            let flat = flatten(&seq);
            prop_assert_eq!(flat.len(), seq.flat_len());
            prop_assert_eq!(flat.targets().len(), flat.elements().len());
            let (back, eos) = flat.unflatten().unwrap();
            prop_assert!(!eos);
            prop_assert_eq!(&back, &seq);
            let per_image: usize = seq.images().map(|g| g.len()).sum();
            prop_assert_eq!(flat.image_target_count(), per_image);
        }
    }
}
