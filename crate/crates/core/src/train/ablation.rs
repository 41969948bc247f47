use super::{evaluate, finetune_adapters, prepare_examples, OptimizerConfig, TrainConfig};
use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::model::VlgModel;
use crate::params::count_params;
use crate::seqcore::{AdapterVariant, DatasetInstance, WrappedLayer};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub variants: Vec<AdapterVariant>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
}

/// One `(variant, seed)` run. Loss columns are evaluation-mode means after
/// the last step: `ce_text`/`mse_image`/`total` on the training corpus,
/// `eval_*` on the held-out corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    pub ce_text: f64,
    pub mse_image: f64,
    pub total: f64,
    pub eval_ce_text: f64,
    pub eval_mse_image: f64,
    pub eval_total: f64,
    pub trainable_params: usize,
}

pub const ABLATION_COLUMNS: &str =
    "variant,seed,steps,ce_text,mse_image,total,eval_ce_text,eval_mse_image,eval_total,trainable_params";

impl AblationRow {
    pub fn to_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| Error::Decode(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Decode(e.to_string()))
    }
}

/// Replace every shared adapter by an MoE adapter whose image path is tied
/// to the same parameters.
pub fn tie_moe_from_shared(model: &mut VlgModel) -> Result<()> {
    for block in &mut model.blocks {
        for layer in WrappedLayer::ALL {
            let site = block.site_mut(layer);
            site.adapter = match site.adapter.take() {
                Some(Adapter::SharedLinear(p)) => Some(Adapter::MoeLinear {
                    text: p,
                    image: None,
                }),
                None => None,
                Some(_) => return Err(Error::Contract("tying requires shared adapters".into())),
            };
        }
    }
    model.config.adapter_variant = AdapterVariant::MoeLinear;
    Ok(())
}

/// Fine-tune each variant from the same base for each seed at an equal step
/// budget. Rows come out variant-major in the order given.
pub fn ablation_compare(
    base: &VlgModel,
    corpus: &[DatasetInstance],
    held_out: &[DatasetInstance],
    spec: &AblationSpec,
) -> Result<Vec<AblationRow>> {
    if spec.seeds.len() < 3 {
        return Err(Error::Config(format!(
            "comparison needs at least 3 seeds, got {}",
            spec.seeds.len()
        )));
    }
    let train_ex = prepare_examples(base, corpus)?;
    let eval_ex = prepare_examples(base, held_out)?;
    let runs: Vec<(AdapterVariant, u64)> = spec
        .variants
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |s| (*v, *s)))
        .collect();
    runs.par_iter()
        .map(|&(variant, seed)| {
            let tc = TrainConfig::steps(
                spec.steps,
                OptimizerConfig {
                    seed,
                    ..spec.optimizer.clone()
                },
            );
            let (model, _) = finetune_adapters(base, variant, corpus, &tc, seed)?;
            let train = evaluate(&model, &train_ex)?;
            let eval = evaluate(&model, &eval_ex)?;
            Ok(AblationRow {
                variant: variant.name().to_owned(),
                seed,
                steps: spec.steps,
                ce_text: train.ce_text,
                mse_image: train.mse_image,
                total: train.total,
                eval_ce_text: eval.ce_text,
                eval_mse_image: eval.mse_image,
                eval_total: eval.total,
                trainable_params: count_params(&model, true),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::ModelConfig;
    use crate::train::{synth_corpus, SynthSpec};

    #[test]
    fn one_row_per_variant_and_seed() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 16,
            patch_channels: 3,
            grid_height: 2,
            grid_width: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            max_seq_len: 40,
            ..ModelConfig::toy()
        };
        let spec = SynthSpec {
            instances: 4,
            grid_height: 2,
            grid_width: 2,
            channels: 3,
            vocab_size: 16,
            ..Default::default()
        };
        let corpus = synth_corpus(&spec).unwrap();
        let base = VlgModel::new(cfg).unwrap();
        let ab = AblationSpec {
            variants: AdapterVariant::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            steps: 2,
            optimizer: OptimizerConfig::default(),
        };
        let rows = ablation_compare(&base, &corpus, &corpus, &ab).unwrap();
        assert_eq!(rows.len(), 9);
        let csv = String::from_utf8(AblationRow::to_csv(&rows).unwrap()).unwrap();
        assert_eq!(csv.lines().next().unwrap(), ABLATION_COLUMNS);
        assert_eq!(csv.lines().count(), 10);
        assert!(ablation_compare(
            &base,
            &corpus,
            &corpus,
            &AblationSpec {
                seeds: vec![1, 2],
                ..ab
            }
        )
        .is_err());
    }

    #[test]
    fn tied_moe_matches_shared() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 16,
            patch_channels: 3,
            grid_height: 2,
            grid_width: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            max_seq_len: 40,
            ..ModelConfig::toy()
        };
        let spec = SynthSpec {
            instances: 2,
            grid_height: 2,
            grid_width: 2,
            channels: 3,
            vocab_size: 16,
            ..Default::default()
        };
        let inst = &synth_corpus(&spec).unwrap()[0];
        let mut shared = VlgModel::new(cfg).unwrap();
        shared.attach_adapters(AdapterVariant::SharedLinear, 3);
        crate::train::randomize_adapters(&mut shared, 4, 0.3);
        let mut tied = shared.clone();
        tie_moe_from_shared(&mut tied).unwrap();
        let flat = crate::seqcore::Example::from_instance(inst, false)
            .unwrap()
            .flat;
        let (a, b) = (shared.forward(&flat).unwrap(), tied.forward(&flat).unwrap());
        let diff = (&a.logits - &b.logits)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v))
            .max(
                (&a.patches - &b.patches)
                    .mapv(f64::abs)
                    .fold(0.0f64, |m, &v| m.max(v)),
            );
        assert!(diff <= 1e-12, "{diff}");
        assert!(tie_moe_from_shared(&mut tied).is_err());
    }
}
