//! Base pretraining, adapter fine-tuning, gradient verification, the
//! synthetic corpus and the variant comparison.

mod ablation;
mod gradcheck;
mod optim;
pub mod synth;

pub use ablation::{
    ablation_compare, tie_moe_from_shared, AblationRow, AblationSpec, ABLATION_COLUMNS,
};
pub use gradcheck::{grad_check, randomize_adapters, GradCheckReport, ParamCheck, GRAD_CHECK_STEP};
pub use optim::{Adam, OptimizerConfig};
pub use synth::{synth_corpus, Grammar, SynthSpec};

use crate::error::{Error, Result};
use crate::model::{LossBreakdown, VlgModel};
use crate::params::frozen_digest;
use crate::seqcore::{AdapterVariant, DatasetInstance, Example};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub ce_text: f64,
    pub mse_image: f64,
    pub total: f64,
    pub lr: f64,
    pub variant: String,
    pub seed: u64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Decode(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Decode(e.to_string()))
}

/// Optimizer settings plus a step budget. `steps: None` runs `epochs` passes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub steps: Option<usize>,
}

impl TrainConfig {
    pub fn steps(steps: usize, optimizer: OptimizerConfig) -> Self {
        Self {
            optimizer,
            steps: Some(steps),
        }
    }

    fn total_steps(&self, n_examples: usize) -> usize {
        self.steps.unwrap_or_else(|| {
            let per = self.optimizer.examples_per_step();
            self.optimizer.epochs * n_examples.div_ceil(per)
        })
    }
}

/// Check instances against the model and build training examples.
pub fn prepare_examples(model: &VlgModel, corpus: &[DatasetInstance]) -> Result<Vec<Example>> {
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let cfg = &model.config;
    corpus
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            inst.validate(cfg.max_seq_len)
                .map_err(|e| Error::Contract(format!("instance {i}: {e}")))?;
            let ex = Example::from_instance(inst, cfg.loss_on_context)?;
            model
                .routing(&ex.flat)
                .map_err(|e| Error::Contract(format!("instance {i}: {e}")))?;
            Ok(ex)
        })
        .collect()
}

/// Mean breakdown over examples; empty components stay flagged only when
/// every example lacks them.
pub fn mean_breakdown(parts: &[LossBreakdown], lambda: f64) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let ce_text = parts.iter().map(|b| b.ce_text).sum::<f64>() / n;
    let mse_image = parts.iter().map(|b| b.mse_image).sum::<f64>() / n;
    LossBreakdown {
        ce_text,
        mse_image,
        total: ce_text + lambda * mse_image,
        text_count: parts.iter().map(|b| b.text_count).sum(),
        image_count: parts.iter().map(|b| b.image_count).sum(),
        text_empty: parts.iter().all(|b| b.text_empty),
        image_empty: parts.iter().all(|b| b.image_empty),
    }
}

/// Evaluation-mode loss averaged over a corpus.
pub fn evaluate(model: &VlgModel, examples: &[Example]) -> Result<LossBreakdown> {
    let parts = examples
        .par_iter()
        .map(|ex| model.example_loss(ex))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_breakdown(&parts, model.config.loss_weight_mse))
}

/// Train every non-frozen parameter of `model`. Each step averages the
/// gradients of `batch_size * grad_accum_steps` examples taken in order
/// from a seeded shuffle; per-example work runs in parallel and is reduced
/// in a fixed order, so results do not depend on the thread count.
pub fn train_loop(
    model: &mut VlgModel,
    examples: &[Example],
    cfg: &TrainConfig,
    variant: &str,
) -> Result<Vec<MetricRow>> {
    cfg.optimizer.validate()?;
    if examples.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let opt = &cfg.optimizer;
    let per_step = opt.examples_per_step();
    let steps = cfg.total_steps(examples.len());
    let lambda = model.config.loss_weight_mse;
    let mut order_rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut served = 0u64;
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut batch = Vec::with_capacity(per_step);
        for _ in 0..per_step {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push((order[cursor], served));
            cursor += 1;
            served += 1;
        }
        let snapshot: &VlgModel = model;
        let results = batch
            .par_iter()
            .map(|&(idx, stream)| {
                let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
                rng.set_stream(stream);
                snapshot.example_grad(&examples[idx], Some(&mut rng))
            })
            .collect::<Vec<_>>();
        let mut parts = Vec::with_capacity(per_step);
        let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for r in results {
            let (b, g) = r.map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                other => other,
            })?;
            parts.push(b);
            for (name, g) in g {
                match grads.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / per_step as f64;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * inv);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("step {step}: non-finite gradient")));
            }
        }
        let b = mean_breakdown(&parts, lambda);
        log.push(MetricRow {
            step,
            ce_text: b.ce_text,
            mse_image: b.mse_image,
            total: b.total,
            lr: opt.learning_rate,
            variant: variant.to_owned(),
            seed: opt.seed,
        });
        adam.step(model, &grads, opt);
    }
    Ok(log)
}

/// Train a fresh base model on `corpus`, all parameters trainable.
pub fn pretrain_base(
    config: crate::seqcore::ModelConfig,
    corpus: &[DatasetInstance],
    cfg: &TrainConfig,
) -> Result<(VlgModel, Vec<MetricRow>)> {
    let mut model = VlgModel::new(config)?;
    let examples = prepare_examples(&model, corpus)?;
    let log = train_loop(&mut model, &examples, cfg, "base")?;
    Ok((model, log))
}

/// Attach zero-initialized adapters of `variant` to a frozen copy of `base`
/// and train only them. Fails if any frozen parameter changed.
pub fn finetune_adapters(
    base: &VlgModel,
    variant: AdapterVariant,
    corpus: &[DatasetInstance],
    cfg: &TrainConfig,
    adapter_seed: u64,
) -> Result<(VlgModel, Vec<MetricRow>)> {
    let mut model = base.base();
    model.attach_adapters(variant, adapter_seed);
    finetune_attached(&mut model, corpus, cfg, variant.name()).map(|log| (model, log))
}

/// Fine-tune a model whose adapters are already attached.
pub fn finetune_attached(
    model: &mut VlgModel,
    corpus: &[DatasetInstance],
    cfg: &TrainConfig,
    label: &str,
) -> Result<Vec<MetricRow>> {
    if !model.has_adapters() {
        return Err(Error::Contract(
            "fine-tuning requires attached adapters".into(),
        ));
    }
    let examples = prepare_examples(model, corpus)?;
    let before = frozen_digest(model);
    let log = train_loop(model, &examples, cfg, label)?;
    let after = frozen_digest(model);
    if before != after {
        return Err(Error::FrozenModified(format!(
            "frozen digest changed from {before} to {after}"
        )));
    }
    Ok(log)
}

/// Trailing mean of `total` over a window.
pub fn smoothed_total(log: &[MetricRow], window: usize, at_end: bool) -> f64 {
    let w = window.min(log.len()).max(1);
    let slice = if at_end {
        &log[log.len() - w..]
    } else {
        &log[..w]
    };
    slice.iter().map(|r| r.total).sum::<f64>() / w as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VlgModel;
    use crate::seqcore::ModelConfig;

    fn small() -> (ModelConfig, Vec<DatasetInstance>) {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 16,
            patch_channels: 4,
            grid_height: 2,
            grid_width: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            max_seq_len: 48,
            ..ModelConfig::toy()
        };
        let spec = SynthSpec {
            instances: 6,
            grid_height: 2,
            grid_width: 2,
            channels: 4,
            vocab_size: 16,
            ..Default::default()
        };
        (cfg, synth_corpus(&spec).unwrap())
    }

    fn opt() -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn pretraining_lowers_loss_and_is_deterministic() {
        let (cfg, corpus) = small();
        let tc = TrainConfig::steps(40, opt());
        let (m1, log1) = pretrain_base(cfg.clone(), &corpus, &tc).unwrap();
        let (m2, log2) = pretrain_base(cfg.clone(), &corpus, &tc).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(m1, m2);
        assert!(smoothed_total(&log1, 5, true) < smoothed_total(&log1, 5, false));
        assert!(pretrain_base(cfg, &[], &tc).is_err());
    }

    #[test]
    fn finetune_keeps_base_and_starts_at_base_loss() {
        let (cfg, corpus) = small();
        let base = VlgModel::new(cfg).unwrap();
        let examples = prepare_examples(&base, &corpus).unwrap();
        let tc = TrainConfig::steps(5, opt());
        for v in AdapterVariant::ALL {
            let (tuned, log) = finetune_adapters(&base, v, &corpus, &tc, 1).unwrap();
            // The first logged step averages the first batch; recompute it on the base.
            let mut order_rng = ChaCha8Rng::seed_from_u64(0);
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut order_rng);
            let parts: Vec<_> = order[..2]
                .iter()
                .map(|&i| base.example_loss(&examples[i]).unwrap())
                .collect();
            let want = mean_breakdown(&parts, 1.0).total;
            assert_eq!(log[0].total, want, "{v}");
            let mut frozen_base = base.clone();
            crate::params::set_frozen(&mut frozen_base, true);
            assert_eq!(frozen_digest(&tuned.base()), frozen_digest(&frozen_base));
            assert_ne!(tuned, {
                let mut m = base.clone();
                m.attach_adapters(v, 1);
                m
            });
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (cfg, corpus) = small();
        let base = VlgModel::new(cfg).unwrap();
        let tc = TrainConfig::steps(
            3,
            OptimizerConfig {
                batch_size: 4,
                ..opt()
            },
        );
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    finetune_adapters(&base, AdapterVariant::Lateralization, &corpus, &tc, 2)
                        .unwrap()
                })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn metrics_csv_has_fixed_columns() {
        let rows = vec![MetricRow {
            step: 0,
            ce_text: 1.0,
            mse_image: 2.0,
            total: 3.0,
            lr: 0.1,
            variant: "lateral".into(),
            seed: 4,
        }];
        let csv = String::from_utf8(metrics_csv(&rows).unwrap()).unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "step,ce_text,mse_image,total,lr,variant,seed"
        );
    }
}
