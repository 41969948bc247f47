//! Curation pipeline for interleaved instruction data.
//!
//! Stages run in a fixed order and the first failing stage is reported:
//! image count, text length, coherence (off by default), text quality,
//! duplicate images, then instruction annotation for survivors.

pub mod heuristics;
pub mod judge;
pub mod raw;
pub mod stats;

pub use judge::{Judge, RemoteJudge, RemoteJudgeConfig, INSTRUCTION_PROMPT, TEXT_QUALITY_PROMPT};
pub use raw::{
    decode_raw_corpus, encode_raw_corpus, read_raw_corpus, write_raw_corpus, RawInstance, RawItem,
};
pub use stats::{stats_report, StatsReport};

use crate::error::{Error, Result};
use crate::seqcore::{ByteCodec, DatasetInstance, InterleavedSequence, Metadata, PatchGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Builtin,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub min_images: usize,
    pub max_images: usize,
    pub max_sentences: usize,
    /// Reject when any image pair's distance is strictly above this.
    pub dup_threshold: f64,
    /// Reject pairs strictly *below* the threshold instead (near-duplicates).
    pub invert_duplicate_rule: bool,
    /// Reject when image-set coherence is below this; `None` disables the stage.
    pub coherence_threshold: Option<f64>,
    pub quality_backend: Backend,
    pub annotator_backend: Backend,
    pub remote: Option<RemoteJudgeConfig>,
    /// Worker cap; 0 uses the global pool.
    pub max_parallel: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_images: 3,
            max_images: 6,
            max_sentences: 12,
            dup_threshold: 0.6,
            invert_duplicate_rule: false,
            coherence_threshold: None,
            quality_backend: Backend::Builtin,
            annotator_backend: Backend::Builtin,
            remote: None,
            max_parallel: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_images > self.max_images {
            return Err(Error::Config(format!(
                "min_images {} exceeds max_images {}",
                self.min_images, self.max_images
            )));
        }
        if !(0.0..=1.0).contains(&self.dup_threshold) {
            return Err(Error::Config(format!(
                "dup_threshold {} outside [0, 1]",
                self.dup_threshold
            )));
        }
        if let Some(c) = self.coherence_threshold {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!(
                    "coherence_threshold {c} outside [0, 1]"
                )));
            }
        }
        let wants_remote =
            self.quality_backend == Backend::Remote || self.annotator_backend == Backend::Remote;
        if wants_remote && self.remote.is_none() {
            return Err(Error::Config(
                "a remote backend is selected but no endpoint is configured".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ImageCount,
    TextLength,
    Coherence,
    TextQuality,
    Duplicate,
    Annotation,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::ImageCount => "image_count",
            Stage::TextLength => "text_length",
            Stage::Coherence => "coherence",
            Stage::TextQuality => "text_quality",
            Stage::Duplicate => "duplicate",
            Stage::Annotation => "annotation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Accepted,
    Rejected(Stage),
    /// A judge could not give a usable answer; the instance is excluded.
    Indeterminate {
        stage: Stage,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageScores {
    pub image_count: usize,
    pub sentence_count: usize,
    pub coherence: Option<f64>,
    pub quality: Option<bool>,
    /// Extreme pairwise distance the duplicate rule looked at (max, or min
    /// when inverted).
    pub pair_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterVerdict {
    pub source_id: String,
    pub outcome: Outcome,
    pub scores: StageScores,
}

impl FilterVerdict {
    pub fn accepted(&self) -> bool {
        self.outcome == Outcome::Accepted
    }

    pub fn first_rejecting_stage(&self) -> Option<Stage> {
        match self.outcome {
            Outcome::Rejected(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_indeterminate(&self) -> bool {
        matches!(self.outcome, Outcome::Indeterminate { .. })
    }
}

/// Duplicate-image rule on a list of images. Returns `(reject, extreme
/// distance)`; fewer than two images pass with no distance.
pub fn duplicate_filter(
    images: &[&PatchGrid],
    threshold: f64,
    invert: bool,
) -> (bool, Option<f64>) {
    let d = heuristics::pairwise_distances(images);
    if d.is_empty() {
        return (false, None);
    }
    if invert {
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        (min < threshold, Some(min))
    } else {
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (max > threshold, Some(max))
    }
}

pub struct PipelineOutput {
    pub accepted: Vec<DatasetInstance>,
    pub verdicts: Vec<FilterVerdict>,
    pub stats: StatsReport,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    judge: Option<Arc<dyn Judge>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let judge = cfg
            .remote
            .clone()
            .map(|r| Arc::new(RemoteJudge::new(r)) as Arc<dyn Judge>);
        Ok(Self { cfg, judge })
    }

    /// Use `judge` for every stage configured as remote.
    pub fn with_judge(mut cfg: PipelineConfig, judge: Arc<dyn Judge>) -> Result<Self> {
        if cfg.remote.is_none() {
            cfg.remote = Some(RemoteJudgeConfig::new("injected"));
        }
        cfg.validate()?;
        Ok(Self {
            cfg,
            judge: Some(judge),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn judge(&self) -> &dyn Judge {
        self.judge
            .as_deref()
            .expect("validated: remote backend has a judge")
    }

    /// Judge the text quality.
    pub fn text_quality(&self, inst: &RawInstance) -> Result<bool> {
        match self.cfg.quality_backend {
            Backend::Builtin => Ok(heuristics::text_quality(inst)),
            Backend::Remote => {
                let prompt = judge::fill_prompt(TEXT_QUALITY_PROMPT, &inst.text());
                judge::parse_binary(&self.judge().complete(&prompt)?)
            }
        }
    }

    pub fn annotate_instruction(&self, inst: &RawInstance) -> Result<String> {
        match self.cfg.annotator_backend {
            Backend::Builtin => Ok(heuristics::template_instruction(inst)),
            Backend::Remote => {
                let prompt = judge::fill_prompt(INSTRUCTION_PROMPT, &inst.text());
                judge::parse_instruction(&self.judge().complete(&prompt)?)
            }
        }
    }

    /// Run every stage on one instance.
    pub fn evaluate(&self, inst: &RawInstance) -> (FilterVerdict, Option<DatasetInstance>) {
        let cfg = &self.cfg;
        let mut scores = StageScores {
            image_count: inst.image_count(),
            sentence_count: inst.sentence_count(),
            ..Default::default()
        };
        let verdict = |outcome, scores| FilterVerdict {
            source_id: inst.source_id.clone(),
            outcome,
            scores,
        };
        let indeterminate = |stage, e: Error, scores| {
            verdict(
                Outcome::Indeterminate {
                    stage,
                    reason: e.to_string(),
                },
                scores,
            )
        };

        if !(cfg.min_images..=cfg.max_images).contains(&scores.image_count) {
            return (verdict(Outcome::Rejected(Stage::ImageCount), scores), None);
        }
        if scores.sentence_count > cfg.max_sentences {
            return (verdict(Outcome::Rejected(Stage::TextLength), scores), None);
        }
        if let Some(t) = cfg.coherence_threshold {
            let c = heuristics::coherence(inst);
            scores.coherence = Some(c);
            if c < t {
                return (verdict(Outcome::Rejected(Stage::Coherence), scores), None);
            }
        }
        match self.text_quality(inst) {
            Ok(q) => {
                scores.quality = Some(q);
                if !q {
                    return (verdict(Outcome::Rejected(Stage::TextQuality), scores), None);
                }
            }
            Err(e) => return (indeterminate(Stage::TextQuality, e, scores), None),
        }
        let images: Vec<&PatchGrid> = inst.images().collect();
        let (dup, d) = duplicate_filter(&images, cfg.dup_threshold, cfg.invert_duplicate_rule);
        scores.pair_distance = d;
        if dup {
            return (verdict(Outcome::Rejected(Stage::Duplicate), scores), None);
        }
        let annotated = self.annotate_instruction(inst).and_then(|text| {
            Ok(DatasetInstance {
                instruction: ByteCodec::encode(&text),
                context: InterleavedSequence::empty(),
                target: InterleavedSequence::new(inst.to_segments())?,
                metadata: Metadata {
                    source_id: inst.source_id.clone(),
                    domain: inst.domain.clone(),
                    instruction_text: Some(text),
                },
            })
        });
        match annotated {
            Ok(out) => (verdict(Outcome::Accepted, scores), Some(out)),
            Err(e) => (indeterminate(Stage::Annotation, e, scores), None),
        }
    }

    /// Evaluate all instances concurrently; outputs keep input order.
    pub fn run(&self, instances: &[RawInstance]) -> Result<PipelineOutput> {
        let work = || -> Vec<(FilterVerdict, Option<DatasetInstance>)> {
            instances.par_iter().map(|i| self.evaluate(i)).collect()
        };
        let results = if self.cfg.max_parallel > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.cfg.max_parallel)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?
                .install(work)
        } else {
            work()
        };
        let mut accepted = Vec::new();
        let mut verdicts = Vec::with_capacity(results.len());
        for (v, inst) in results {
            accepted.extend(inst);
            verdicts.push(v);
        }
        let stats = stats_report(&accepted);
        Ok(PipelineOutput {
            accepted,
            verdicts,
            stats,
        })
    }
}

pub fn run_pipeline(instances: &[RawInstance], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    Pipeline::new(cfg.clone())?.run(instances)
}

#[derive(Serialize)]
struct VerdictRow<'a> {
    source_id: &'a str,
    outcome: &'static str,
    stage: &'static str,
    image_count: usize,
    sentence_count: usize,
    coherence: Option<f64>,
    quality: Option<u8>,
    pair_distance: Option<f64>,
    reason: &'a str,
}

pub const VERDICT_COLUMNS: &str =
    "source_id,outcome,stage,image_count,sentence_count,coherence,quality,pair_distance,reason";

/// Per-instance verdicts as CSV.
pub fn verdicts_csv(verdicts: &[FilterVerdict]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for v in verdicts {
        let (outcome, stage, reason) = match &v.outcome {
            Outcome::Accepted => ("accepted", "", ""),
            Outcome::Rejected(s) => ("rejected", s.name(), ""),
            Outcome::Indeterminate { stage, reason } => {
                ("indeterminate", stage.name(), reason.as_str())
            }
        };
        w.serialize(VerdictRow {
            source_id: &v.source_id,
            outcome,
            stage,
            image_count: v.scores.image_count,
            sentence_count: v.scores.sentence_count,
            coherence: v.scores.coherence,
            quality: v.scores.quality.map(u8::from),
            pair_distance: v.scores.pair_distance,
            reason,
        })
        .map_err(|e| Error::Decode(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Decode(e.to_string()))
}
