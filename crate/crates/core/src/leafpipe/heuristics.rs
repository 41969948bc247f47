//! Deterministic built-in scorers.

use super::raw::RawInstance;
use crate::seqcore::PatchGrid;

/// Split text into sentences at `.`, `!` or `?` followed by whitespace (or
/// the end of input), and at newlines. Pieces are trimmed; empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let chars: Vec<char> = line.chars().collect();
        let mut start = 0;
        let mut i = 0;
        while i < chars.len() {
            if matches!(chars[i], '.' | '!' | '?') {
                let mut end = i + 1;
                while end < chars.len() && matches!(chars[end], '.' | '!' | '?' | '"' | '\'' | ')')
                {
                    end += 1;
                }
                if end == chars.len() || chars[end].is_whitespace() {
                    push_trimmed(&mut out, &chars[start..end]);
                    start = end;
                }
                i = end;
            } else {
                i += 1;
            }
        }
        push_trimmed(&mut out, &chars[start..]);
    }
    out
}

fn push_trimmed(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_owned());
    }
}

/// Stand-in perceptual distance in `[0, 1]`:
/// `mean|a - b| / (mean|a| + mean|b|)`, 0 for two all-zero grids and 1 for
/// grids of different shape.
pub fn grid_distance(a: &PatchGrid, b: &PatchGrid) -> f64 {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return 1.0;
    }
    let n = a.data().len() as f64;
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n;
    let scale = a.data().iter().map(|x| x.abs()).sum::<f64>() / n
        + b.data().iter().map(|x| x.abs()).sum::<f64>() / n;
    if scale == 0.0 {
        0.0
    } else {
        (diff / scale).min(1.0)
    }
}

/// Distances of every unordered image pair, in `(i, j)` lexicographic order.
pub fn pairwise_distances(images: &[&PatchGrid]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            out.push(grid_distance(images[i], images[j]));
        }
    }
    out
}

/// Image-set coherence: one minus the mean pairwise distance (1 for fewer
/// than two images).
pub fn coherence(inst: &RawInstance) -> f64 {
    let images: Vec<&PatchGrid> = inst.images().collect();
    let d = pairwise_distances(&images);
    if d.is_empty() {
        1.0
    } else {
        1.0 - d.iter().sum::<f64>() / d.len() as f64
    }
}

const MIN_WORDS: usize = 3;
const MAX_WORDS: usize = 40;
const MIN_TYPE_TOKEN_RATIO: f64 = 0.4;
const TTR_MIN_WORDS: usize = 10;

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
}

/// Good-quality text: at least one sentence, every sentence 3 to 40 words,
/// no repeated sentence, and a type-token ratio of at least 0.4 once the
/// text has 10 or more words.
pub fn text_quality(inst: &RawInstance) -> bool {
    let sentences: Vec<&str> = inst.sentences().collect();
    if sentences.is_empty() {
        return false;
    }
    if sentences
        .iter()
        .any(|s| !(MIN_WORDS..=MAX_WORDS).contains(&words(s).count()))
    {
        return false;
    }
    let mut seen = std::collections::BTreeSet::new();
    if !sentences.iter().all(|s| seen.insert(s.to_lowercase())) {
        return false;
    }
    let all: Vec<String> = sentences.iter().flat_map(|s| words(s)).collect();
    if all.len() >= TTR_MIN_WORDS {
        let types: std::collections::BTreeSet<&String> = all.iter().collect();
        if (types.len() as f64) < MIN_TYPE_TOKEN_RATIO * all.len() as f64 {
            return false;
        }
    }
    true
}

/// Template instruction built from the document's shape and opening words.
pub fn template_instruction(inst: &RawInstance) -> String {
    let n_img = inst.image_count();
    match inst.sentences().next() {
        Some(first) => {
            let opening: Vec<&str> = first.split_whitespace().take(6).collect();
            format!(
                "Write an illustrated piece of {} sentences and {n_img} images that opens with \"{}\".",
                inst.sentence_count(),
                opening.join(" ")
            )
        }
        None => format!("Produce a sequence of {n_img} related images."),
    }
}
