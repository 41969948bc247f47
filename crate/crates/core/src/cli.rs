//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 contract or validation failure, 2 usage error.
//! Every command prints the SHA-256 digest of its resolved settings to
//! standard error, and writes its files atomically.

use crate::checkpoint::{apply_adapters, encode_adapters, encode_model, load_model};
use crate::decode::{generate, render_ids, transcript, GenerationConfig, Sampling};
use crate::error::{Error, Result};
use crate::io::{write_all_atomic, write_atomic};
use crate::leafpipe::{self, verdicts_csv, Backend, Pipeline, PipelineConfig, RemoteJudgeConfig};
use crate::model::VlgModel;
use crate::seqcore::{
    read_corpus, write_corpus, AdapterVariant, ByteCodec, DatasetInstance, ModelConfig, TokenId,
};
use crate::train::{
    ablation_compare, finetune_adapters, grad_check, metrics_csv, pretrain_base,
    randomize_adapters, synth_corpus, AblationRow, AblationSpec, GradCheckReport, OptimizerConfig,
    SynthSpec, TrainConfig,
};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "lateral",
    version,
    about = "Modality-routed adapters for interleaved text/image generation"
)]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Report format on standard output.
    #[arg(long, value_enum, default_value_t = Format::Csv, global = true)]
    format: Format,
    /// Seed override (model init, data order, adapters, sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Shared,
    Moe,
    Lateral,
}

impl From<VariantArg> for AdapterVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Shared => AdapterVariant::SharedLinear,
            VariantArg::Moe => AdapterVariant::MoeLinear,
            VariantArg::Lateral => AdapterVariant::Lateralization,
        }
    }
}

#[derive(Debug, Args)]
struct OptimArgs {
    /// TOML optimizer settings; flags below override it.
    #[arg(long)]
    optimizer: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML synthetic-corpus settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        instances: Option<usize>,
        /// Store patch grids in an f32 binary next to the corpus.
        #[arg(long)]
        sidecar: bool,
    },
    /// Train a base model with all parameters trainable.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        metrics: PathBuf,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Train adapters on a frozen base.
    Finetune {
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Model config for a freshly initialized base (ignored with --base).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base model checkpoint.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "adapters.ckpt")]
        out: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        metrics: PathBuf,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Generate a continuation for one corpus prompt.
    Generate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Sample with this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 512)]
        max_steps: usize,
        #[arg(long, default_value_t = 64)]
        max_text_run: usize,
        /// Render text as UTF-8 bytes instead of token ids.
        #[arg(long)]
        text: bool,
        /// Write prompt and continuation as a one-instance corpus.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference adapter gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Check one variant; all three by default.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Instance source; one synthetic instance by default.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune every variant over several seeds and tabulate final losses.
    Ablate {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluation corpus; the training corpus by default.
        #[arg(long)]
        held_out: Option<PathBuf>,
        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "shared,moe,lateral"
        )]
        variants: Vec<VariantArg>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Curate a raw corpus.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Verdict CSV; `<out>.verdicts.csv` by default.
        #[arg(long)]
        verdicts: Option<PathBuf>,
        /// TOML pipeline settings.
        #[arg(long)]
        pipeline: Option<PathBuf>,
        /// Use the remote judge (endpoint from the environment) for quality
        /// and annotation.
        #[arg(long)]
        remote: bool,
    },
    /// Corpus statistics.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse `argv` (including the program name) and run. Returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn print_digest(settings: &serde_json::Value) {
    let bytes = serde_json::to_vec(settings).expect("settings serialize");
    eprintln!("config digest: {}", hex::encode(Sha256::digest(&bytes)));
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ModelConfig> {
    let mut cfg = match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::toy(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn resolve_optimizer(a: &OptimArgs, seed: Option<u64>) -> Result<(OptimizerConfig, Option<usize>)> {
    let mut o = match &a.optimizer {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::Config(e.to_string()))?,
        None => OptimizerConfig::default(),
    };
    if let Some(v) = a.lr {
        o.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        o.batch_size = v;
    }
    if let Some(v) = a.grad_accum {
        o.grad_accum_steps = v;
    }
    if let Some(v) = a.weight_decay {
        o.weight_decay = v;
    }
    if a.clip_norm.is_some() {
        o.clip_norm = a.clip_norm;
    }
    if let Some(s) = seed {
        o.seed = s;
    }
    o.validate()?;
    Ok((o, a.steps))
}

fn train_config(o: OptimizerConfig, steps: Option<usize>) -> TrainConfig {
    match steps {
        Some(n) => TrainConfig::steps(n, o),
        None => TrainConfig {
            optimizer: o,
            steps: None,
        },
    }
}

fn report<T: Serialize>(rows: &[T], format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(|e| Error::Decode(e.to_string()))?;
            }
            w.into_inner().map_err(|e| Error::Decode(e.to_string()))
        }
        Format::Jsonl => {
            let mut out = Vec::new();
            for r in rows {
                serde_json::to_writer(&mut out, r)?;
                out.push(b'\n');
            }
            Ok(out)
        }
    }
}

fn emit(bytes: &[u8], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn nth_instance(corpus: &Path, index: usize) -> Result<DatasetInstance> {
    let mut all = read_corpus(corpus)?;
    if index >= all.len() {
        return Err(Error::Contract(format!(
            "index {index} out of range for a corpus of {}",
            all.len()
        )));
    }
    Ok(all.swap_remove(index))
}

fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be positive".into()));
        }
        // Fails only if the pool already exists (repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let seed = cli.seed;
    let format = cli.format;
    match cli.command {
        Command::Synth {
            out,
            spec,
            instances,
            sidecar,
        } => {
            let mut s = match spec {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| Error::Config(e.to_string()))?,
                None => SynthSpec::default(),
            };
            if let Some(n) = instances {
                s.instances = n;
            }
            if let Some(v) = seed {
                s.seed = v;
            }
            print_digest(&json!({ "command": "synth", "spec": s, "sidecar": sidecar }));
            let corpus = synth_corpus(&s)?;
            write_corpus(&out, &corpus, sidecar)?;
            println!("wrote {} instances to {}", corpus.len(), out.display());
            Ok(0)
        }
        Command::Pretrain {
            config,
            corpus,
            out,
            metrics,
            optim,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let (opt, steps) = resolve_optimizer(&optim, seed)?;
            print_digest(
                &json!({ "command": "pretrain", "config": cfg, "optimizer": opt, "steps": steps }),
            );
            let data = read_corpus(&corpus)?;
            let (model, log) = pretrain_base(cfg, &data, &train_config(opt, steps))?;
            let ckpt = encode_model(&model);
            let m = metrics_csv(&log)?;
            write_all_atomic(&[(&out, &ckpt), (&metrics, &m)])?;
            summarize(&log);
            Ok(0)
        }
        Command::Finetune {
            variant,
            config,
            base,
            corpus,
            out,
            metrics,
            optim,
        } => {
            let base_model = match &base {
                Some(p) => load_model(p)?.base(),
                None => VlgModel::new(load_config(config.as_deref(), seed)?)?,
            };
            let (opt, steps) = resolve_optimizer(&optim, seed)?;
            let variant = AdapterVariant::from(variant);
            let adapter_seed = seed.unwrap_or(base_model.config.seed);
            print_digest(&json!({
                "command": "finetune",
                "variant": variant.name(),
                "config": base_model.config,
                "base": base,
                "optimizer": opt,
                "steps": steps,
                "adapter_seed": adapter_seed,
            }));
            let data = read_corpus(&corpus)?;
            let (model, log) = finetune_adapters(
                &base_model,
                variant,
                &data,
                &train_config(opt, steps),
                adapter_seed,
            )?;
            let ckpt = encode_adapters(&model)?;
            let m = metrics_csv(&log)?;
            write_all_atomic(&[(&out, &ckpt), (&metrics, &m)])?;
            summarize(&log);
            Ok(0)
        }
        Command::Generate {
            base,
            adapters,
            corpus,
            index,
            temperature,
            max_steps,
            max_text_run,
            text,
            out,
        } => {
            let base_model = load_model(&base)?;
            let model = match &adapters {
                Some(p) => apply_adapters(&base_model, &std::fs::read(p)?)?,
                None => base_model,
            };
            let sampling = match temperature {
                Some(t) => Sampling::Temperature {
                    t,
                    seed: seed.unwrap_or(0),
                },
                None => Sampling::Greedy,
            };
            let gcfg = GenerationConfig {
                max_total_steps: max_steps,
                max_text_run,
                sampling,
            };
            gcfg.validate()?;
            print_digest(&json!({
                "command": "generate",
                "config": model.config,
                "adapters": adapters,
                "corpus": corpus,
                "index": index,
                "temperature": temperature,
                "seed": seed,
                "max_steps": max_steps,
                "max_text_run": max_text_run,
            }));
            let inst = nth_instance(&corpus, index)?;
            let g = generate(&model, &inst.prompt()?, gcfg)?;
            let render = |t: &[TokenId]| {
                if text {
                    ByteCodec::decode(t).unwrap_or_else(|_| render_ids(t))
                } else {
                    render_ids(t)
                }
            };
            let line = transcript(&g.output, &render);
            match format {
                Format::Csv => println!("{line}"),
                Format::Jsonl => println!(
                    "{}",
                    json!({
                        "source_id": inst.metadata.source_id,
                        "transcript": line,
                        "images": g.output.images().count(),
                        "truncated": g.truncated,
                        "steps": g.steps,
                    })
                ),
            }
            if let Some(p) = out {
                if g.output.is_empty() {
                    return Err(Error::Contract(
                        "generation is empty; nothing to write".into(),
                    ));
                }
                let generated = DatasetInstance {
                    target: g.output,
                    ..inst
                };
                write_corpus(&p, &[generated], false)?;
            }
            Ok(0)
        }
        Command::Gradcheck {
            config,
            variant,
            corpus,
            tolerance,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let variants: Vec<AdapterVariant> = match variant {
                Some(v) => vec![v.into()],
                None => AdapterVariant::ALL.to_vec(),
            };
            let s = seed.unwrap_or(cfg.seed);
            print_digest(&json!({
                "command": "gradcheck",
                "config": cfg,
                "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
                "corpus": corpus,
                "tolerance": tolerance,
                "seed": s,
            }));
            let inst = match &corpus {
                Some(p) => nth_instance(p, 0)?,
                None => gradcheck_instance(&cfg, s)?,
            };
            let mut rows = Vec::new();
            let mut all_pass = true;
            for v in variants {
                let r = checked_variant(&cfg, v, &inst, tolerance, s)?;
                eprintln!(
                    "{}: max relative error {:.3e} in {} ({})",
                    v.name(),
                    r.max_rel_err,
                    r.worst_param,
                    if r.passed { "pass" } else { "FAIL" }
                );
                all_pass &= r.passed;
                rows.extend(r.params.into_iter().map(|p| GradRow {
                    variant: v.name(),
                    name: p.name,
                    checked: p.checked,
                    total: p.total,
                    max_rel_err: p.max_rel_err,
                    max_abs_err: p.max_abs_err,
                }));
            }
            emit(&report(&rows, format)?, out.as_deref())?;
            Ok(if all_pass { 0 } else { 1 })
        }
        Command::Ablate {
            base,
            config,
            corpus,
            held_out,
            variants,
            seeds,
            out,
            optim,
        } => {
            let base_model = match &base {
                Some(p) => load_model(p)?.base(),
                None => VlgModel::new(load_config(config.as_deref(), seed)?)?,
            };
            let (opt, steps) = resolve_optimizer(&optim, None)?;
            let spec = AblationSpec {
                variants: variants.into_iter().map(AdapterVariant::from).collect(),
                seeds,
                steps: steps.unwrap_or(500),
                optimizer: opt,
            };
            print_digest(&json!({
                "command": "ablate",
                "config": base_model.config,
                "base": base,
                "variants": spec.variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
                "seeds": spec.seeds,
                "steps": spec.steps,
                "optimizer": spec.optimizer,
            }));
            let train = read_corpus(&corpus)?;
            let eval = match &held_out {
                Some(p) => read_corpus(p)?,
                None => train.clone(),
            };
            let rows = ablation_compare(&base_model, &train, &eval, &spec)?;
            let bytes = match format {
                Format::Csv => AblationRow::to_csv(&rows)?,
                Format::Jsonl => report(&rows, format)?,
            };
            emit(&bytes, out.as_deref())?;
            Ok(0)
        }
        Command::Filter {
            input,
            out,
            verdicts,
            pipeline,
            remote,
        } => {
            let mut cfg = match &pipeline {
                Some(p) => PipelineConfig::from_toml_str(&std::fs::read_to_string(p)?)?,
                None => PipelineConfig::default(),
            };
            if remote {
                cfg.quality_backend = Backend::Remote;
                cfg.annotator_backend = Backend::Remote;
            }
            let wants_remote =
                cfg.quality_backend == Backend::Remote || cfg.annotator_backend == Backend::Remote;
            if wants_remote && cfg.remote.is_none() {
                cfg.remote = RemoteJudgeConfig::from_env();
                if cfg.remote.is_none() {
                    return Err(Error::Config(format!(
                        "remote judge selected but {} is not set",
                        leafpipe::judge::JUDGE_URL_ENV
                    )));
                }
            }
            print_digest(&json!({ "command": "filter", "pipeline": cfg, "input": input }));
            let raw = leafpipe::read_raw_corpus(&input)?;
            let result = Pipeline::new(cfg)?.run(&raw)?;
            let verdict_path = verdicts.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".verdicts.csv");
                PathBuf::from(s)
            });
            let (lines, _) = crate::seqcore::encode_corpus(&result.accepted, None);
            let v = verdicts_csv(&result.verdicts)?;
            write_all_atomic(&[(&verdict_path, &v), (&out, &lines)])?;
            let indeterminate = result
                .verdicts
                .iter()
                .filter(|v| v.is_indeterminate())
                .count();
            println!(
                "accepted {} of {} ({} indeterminate)",
                result.accepted.len(),
                raw.len(),
                indeterminate
            );
            Ok(0)
        }
        Command::Stats { corpus, out } => {
            print_digest(&json!({ "command": "stats", "corpus": corpus, "format": format }));
            let data = read_corpus(&corpus)?;
            let r = leafpipe::stats_report(&data);
            let bytes = match format {
                Format::Csv => r.to_csv()?,
                Format::Jsonl => r.to_jsonl(),
            };
            emit(&bytes, out.as_deref())?;
            Ok(0)
        }
    }
}

#[derive(Serialize)]
struct GradRow {
    variant: &'static str,
    name: String,
    checked: usize,
    total: usize,
    max_rel_err: f64,
    max_abs_err: f64,
}

fn summarize(log: &[crate::train::MetricRow]) {
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "steps {} total {:.6} -> {:.6} (ce_text {:.6}, mse_image {:.6})",
            log.len(),
            first.total,
            last.total,
            last.ce_text,
            last.mse_image
        );
    }
}

/// One synthetic instance shaped for `cfg`.
fn gradcheck_instance(cfg: &ModelConfig, seed: u64) -> Result<DatasetInstance> {
    let spec = SynthSpec {
        instances: 1,
        grid_height: cfg.grid_height,
        grid_width: cfg.grid_width,
        channels: cfg.patch_channels,
        vocab_size: cfg.vocab_size,
        images_min: 1,
        images_max: 2,
        seed,
        ..Default::default()
    };
    let inst = synth_corpus(&spec)?.remove(0);
    inst.validate(cfg.max_seq_len)?;
    Ok(inst)
}

/// Grad check of one variant with randomized adapters on a fresh base.
pub fn checked_variant(
    cfg: &ModelConfig,
    variant: AdapterVariant,
    inst: &DatasetInstance,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut model = VlgModel::new(cfg.clone())?;
    model.attach_adapters(variant, seed);
    randomize_adapters(&mut model, seed, 0.1);
    let ex = crate::train::prepare_examples(&model, std::slice::from_ref(inst))?.remove(0);
    grad_check(&model, &ex, tolerance, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(
            dispatch(["lateral", "finetune", "--variant", "bogus", "--corpus", "c"]),
            2
        );
        assert_eq!(dispatch(["lateral", "stats", "--corpus", "c", "--nope"]), 2);
        assert_eq!(dispatch(["lateral"]), 2);
        assert_eq!(dispatch(["lateral", "--help"]), 0);
    }

    #[test]
    fn missing_input_exits_1() {
        assert_eq!(
            dispatch(["lateral", "stats", "--corpus", "/nonexistent/c.jsonl"]),
            1
        );
    }
}
