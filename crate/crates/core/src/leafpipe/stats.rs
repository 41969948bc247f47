//! Aggregate corpus statistics.

use super::heuristics::split_sentences;
use crate::error::{Error, Result};
use crate::seqcore::{ByteCodec, DatasetInstance, Segment};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StatsReport {
    pub instances: usize,
    pub images: usize,
    pub image_count_hist: BTreeMap<usize, usize>,
    pub sentence_count_hist: BTreeMap<usize, usize>,
    pub domains: BTreeMap<String, usize>,
}

/// Sentences in a target. Byte-coded text is split into sentences;
/// otherwise each text segment counts as one.
fn sentence_count(inst: &DatasetInstance) -> usize {
    inst.target
        .segments()
        .iter()
        .map(|s| match s {
            Segment::Text(t) => match ByteCodec::decode(t) {
                Ok(text) => split_sentences(&text).len(),
                Err(_) => 1,
            },
            Segment::Image(_) => 0,
        })
        .sum()
}

pub fn stats_report(corpus: &[DatasetInstance]) -> StatsReport {
    let mut r = StatsReport {
        instances: corpus.len(),
        ..Default::default()
    };
    for inst in corpus {
        let n = inst.target.images().count();
        r.images += n;
        *r.image_count_hist.entry(n).or_default() += 1;
        *r.sentence_count_hist
            .entry(sentence_count(inst))
            .or_default() += 1;
        if let Some(d) = &inst.metadata.domain {
            *r.domains.entry(d.clone()).or_default() += 1;
        }
    }
    r
}

#[derive(Serialize)]
struct Row<'a> {
    metric: &'a str,
    key: String,
    count: usize,
}

pub const STATS_COLUMNS: &str = "metric,key,count";

impl StatsReport {
    /// One row per totals entry and per histogram key.
    pub fn rows(&self) -> Vec<(&'static str, String, usize)> {
        let mut out = vec![
            ("instances", String::new(), self.instances),
            ("images", String::new(), self.images),
        ];
        out.extend(
            self.image_count_hist
                .iter()
                .map(|(k, v)| ("image_count", k.to_string(), *v)),
        );
        out.extend(
            self.sentence_count_hist
                .iter()
                .map(|(k, v)| ("sentence_count", k.to_string(), *v)),
        );
        out.extend(self.domains.iter().map(|(k, v)| ("domain", k.clone(), *v)));
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (metric, key, count) in self.rows() {
            w.serialize(Row { metric, key, count })
                .map_err(|e| Error::Decode(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Decode(e.to_string()))
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (metric, key, count) in self.rows() {
            serde_json::to_writer(&mut out, &Row { metric, key, count }).expect("row serializes");
            out.push(b'\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{synth_corpus, SynthSpec};

    #[test]
    fn empty_corpus_is_zeroed() {
        let r = stats_report(&[]);
        assert_eq!(r, StatsReport::default());
        let csv = String::from_utf8(r.to_csv().unwrap()).unwrap();
        assert_eq!(csv, "metric,key,count\ninstances,,0\nimages,,0\n");
    }

    #[test]
    fn histogram_counts_images() {
        let spec = SynthSpec {
            instances: 10,
            images_min: 3,
            images_max: 3,
            ..Default::default()
        };
        let r = stats_report(&synth_corpus(&spec).unwrap());
        assert_eq!(r.image_count_hist, BTreeMap::from([(3, 10)]));
        assert_eq!(r.images, 30);
        let keys = r.image_count_hist.len() + r.sentence_count_hist.len() + r.domains.len();
        assert_eq!(r.rows().len(), 2 + keys);
        assert_eq!(
            String::from_utf8(r.to_jsonl()).unwrap().lines().count(),
            r.rows().len()
        );
    }
}
