//! C ABI over the core library.
//!
//! Objects cross the boundary as opaque handles that the caller owns and
//! releases with the matching `*_free`. Every fallible call returns a
//! [`LateralStatus`]; on failure, [`lateral_last_error`] describes the most
//! recent error on the calling thread. Strings returned through `char**`
//! out-parameters are released with [`lateral_string_free`].

use lateral::checkpoint::{apply_adapters, encode_adapters, load_model, save_model};
use lateral::decode::{generate, render_ids, transcript, GenerationConfig, Sampling};
use lateral::error::Error;
use lateral::model::VlgModel;
use lateral::params::{count_params, frozen_digest};
use lateral::seqcore::{read_corpus, write_corpus, AdapterVariant, DatasetInstance, ModelConfig};
use lateral::train::{finetune_adapters, synth_corpus, OptimizerConfig, SynthSpec, TrainConfig};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LateralStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Structural = 3,
    Contract = 4,
    Config = 5,
    Decode = 6,
    Numeric = 7,
    FrozenModified = 8,
    Judge = 9,
    Io = 10,
    Panic = 11,
}

/// Adapter family selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LateralVariant {
    Shared = 0,
    Moe = 1,
    Lateral = 2,
}

/// Variants arrive as plain integers so that out-of-range values from C are
/// reported rather than undefined.
fn variant_arg(v: u32) -> Result<AdapterVariant, Fail> {
    match v {
        x if x == LateralVariant::Shared as u32 => Ok(AdapterVariant::SharedLinear),
        x if x == LateralVariant::Moe as u32 => Ok(AdapterVariant::MoeLinear),
        x if x == LateralVariant::Lateral as u32 => Ok(AdapterVariant::Lateralization),
        other => Err(Fail::Arg(format!("unknown variant {other}"))),
    }
}

/// Fine-tuning knobs. Obtain defaults from [`lateral_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LateralTrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

/// Opaque model handle.
pub struct LateralModel {
    inner: VlgModel,
}

/// Opaque corpus handle.
pub struct LateralCorpus {
    inner: Vec<DatasetInstance>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LateralStatus {
    match e {
        Error::Structural(_) => LateralStatus::Structural,
        Error::Contract(_) => LateralStatus::Contract,
        Error::Config(_) => LateralStatus::Config,
        Error::Decode(_) => LateralStatus::Decode,
        Error::Numeric(_) => LateralStatus::Numeric,
        Error::FrozenModified(_) => LateralStatus::FrozenModified,
        Error::Judge(_) => LateralStatus::Judge,
        Error::Usage(_) => LateralStatus::InvalidArgument,
        Error::Io(_) => LateralStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LateralStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LateralStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            LateralStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(format!("invalid argument: {msg}"));
            LateralStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LateralStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "?"))
        .expect("nul bytes replaced")
        .into_raw()
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn lateral_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failure on this thread, or NULL after a success.
/// Valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn lateral_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn lateral_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Fresh base model from a TOML config, or the toy config when `config_toml`
/// is NULL.
///
/// # Safety
/// `config_toml` is NULL or a valid C string; `out_model` is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_model_new(
    config_toml: *const c_char,
    seed: u64,
    out_model: *mut *mut LateralModel,
) -> LateralStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let mut cfg = if config_toml.is_null() {
            ModelConfig::toy()
        } else {
            ModelConfig::from_toml_str(str_arg(config_toml, "config_toml")?)?
        };
        cfg.seed = seed;
        *slot = boxed(LateralModel {
            inner: VlgModel::new(cfg)?,
        });
        Ok(())
    })
}

/// Load a full model checkpoint.
///
/// # Safety
/// `path` is a valid C string; `out_model` is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_model_load(
    path: *const c_char,
    out_model: *mut *mut LateralModel,
) -> LateralStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let m = load_model(&path_arg(path, "path")?)?;
        *slot = boxed(LateralModel { inner: m });
        Ok(())
    })
}

/// Save the full model (base and any adapters).
///
/// # Safety
/// `model` is a live handle; `path` is a valid C string.
#[no_mangle]
pub unsafe extern "C" fn lateral_model_save(
    model: *const LateralModel,
    path: *const c_char,
) -> LateralStatus {
    guard(|| {
        let m = handle(model, "model")?;
        save_model(&m.inner, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Write only the adapter parameters of `model`.
///
/// # Safety
/// `model` is a live handle; `path` is a valid C string.
#[no_mangle]
pub unsafe extern "C" fn lateral_model_save_adapters(
    model: *const LateralModel,
    path: *const c_char,
) -> LateralStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let bytes = encode_adapters(&m.inner)?;
        lateral::io::write_atomic(&path_arg(path, "path")?, &bytes)?;
        Ok(())
    })
}

/// New model: `base` with the adapters stored at `path` attached.
///
/// # Safety
/// `base` is a live handle; `path` is a valid C string; `out_model` is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_model_apply_adapters(
    base: *const LateralModel,
    path: *const c_char,
    out_model: *mut *mut LateralModel,
) -> LateralStatus {
    guard(|| {
        let b = handle(base, "base")?;
        let slot = out(out_model, "out_model")?;
        let bytes = std::fs::read(path_arg(path, "path")?).map_err(Error::from)?;
        *slot = boxed(LateralModel {
            inner: apply_adapters(&b.inner, &bytes)?,
        });
        Ok(())
    })
}

/// Attach zero-initialized adapters of `variant` (a [`LateralVariant`]),
/// replacing any present.
///
/// # Safety
/// `model` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn lateral_model_attach_adapters(
    model: *mut LateralModel,
    variant: u32,
    seed: u64,
) -> LateralStatus {
    guard(|| {
        let m = model.as_mut().ok_or(Fail::Null("model"))?;
        m.inner.attach_adapters(variant_arg(variant)?, seed);
        Ok(())
    })
}

/// Number of scalar parameters, optionally trainable ones only.
///
/// # Safety
/// `model` is a live handle; `out_count` is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_model_param_count(
    model: *const LateralModel,
    trainable_only: bool,
    out_count: *mut usize,
) -> LateralStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out(out_count, "out_count")? = count_params(&m.inner, trainable_only);
        Ok(())
    })
}

/// Hex SHA-256 of the frozen parameters. Free with [`lateral_string_free`].
///
/// # Safety
/// `model` is a live handle; `out_digest` is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_model_frozen_digest(
    model: *const LateralModel,
    out_digest: *mut *mut c_char,
) -> LateralStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out(out_digest, "out_digest")? = c_string(frozen_digest(&m.inner));
        Ok(())
    })
}

/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lateral_model_free(model: *mut LateralModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Read a corpus file (and its sidecar, if any).
///
/// # Safety
/// `path` is a valid C string; `out_corpus` is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_corpus_read(
    path: *const c_char,
    out_corpus: *mut *mut LateralCorpus,
) -> LateralStatus {
    guard(|| {
        let slot = out(out_corpus, "out_corpus")?;
        *slot = boxed(LateralCorpus {
            inner: read_corpus(&path_arg(path, "path")?)?,
        });
        Ok(())
    })
}

/// Write a corpus, with patch values in a binary sidecar when `sidecar`.
///
/// # Safety
/// `corpus` is a live handle; `path` is a valid C string.
#[no_mangle]
pub unsafe extern "C" fn lateral_corpus_write(
    corpus: *const LateralCorpus,
    path: *const c_char,
    sidecar: bool,
) -> LateralStatus {
    guard(|| {
        let c = handle(corpus, "corpus")?;
        write_corpus(&path_arg(path, "path")?, &c.inner, sidecar)?;
        Ok(())
    })
}

/// Synthetic corpus from a TOML spec (defaults when NULL).
///
/// # Safety
/// `spec_toml` is NULL or a valid C string; `out_corpus` is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_corpus_synth(
    spec_toml: *const c_char,
    out_corpus: *mut *mut LateralCorpus,
) -> LateralStatus {
    guard(|| {
        let slot = out(out_corpus, "out_corpus")?;
        let spec: SynthSpec = if spec_toml.is_null() {
            SynthSpec::default()
        } else {
            toml::from_str(str_arg(spec_toml, "spec_toml")?)
                .map_err(|e| Fail::Core(Error::Config(e.to_string())))?
        };
        *slot = boxed(LateralCorpus {
            inner: synth_corpus(&spec)?,
        });
        Ok(())
    })
}

/// # Safety
/// `corpus` is a live handle; `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_corpus_len(
    corpus: *const LateralCorpus,
    out_len: *mut usize,
) -> LateralStatus {
    guard(|| {
        *out(out_len, "out_len")? = handle(corpus, "corpus")?.inner.len();
        Ok(())
    })
}

/// # Safety
/// `corpus` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lateral_corpus_free(corpus: *mut LateralCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

#[no_mangle]
pub extern "C" fn lateral_train_options_default() -> LateralTrainOptions {
    let o = OptimizerConfig::default();
    LateralTrainOptions {
        steps: 100,
        learning_rate: o.learning_rate,
        batch_size: o.batch_size,
        grad_accum_steps: o.grad_accum_steps,
        weight_decay: o.weight_decay,
        clip_norm: 0.0,
        seed: o.seed,
    }
}

/// Fine-tune fresh adapters of `variant` (a [`LateralVariant`]) on a frozen
/// copy of `base`.
/// The base handle is left untouched.
///
/// # Safety
/// `base` and `corpus` are live handles; `options` is readable; `out_model`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_finetune(
    base: *const LateralModel,
    variant: u32,
    corpus: *const LateralCorpus,
    options: *const LateralTrainOptions,
    out_model: *mut *mut LateralModel,
) -> LateralStatus {
    guard(|| {
        let b = handle(base, "base")?;
        let c = handle(corpus, "corpus")?;
        let o = *handle(options, "options")?;
        let slot = out(out_model, "out_model")?;
        if o.steps == 0 {
            return Err(Fail::Arg("steps must be positive".into()));
        }
        let opt = OptimizerConfig {
            learning_rate: o.learning_rate,
            batch_size: o.batch_size,
            grad_accum_steps: o.grad_accum_steps,
            weight_decay: o.weight_decay,
            clip_norm: (o.clip_norm > 0.0).then_some(o.clip_norm),
            seed: o.seed,
            ..OptimizerConfig::default()
        };
        opt.validate()?;
        let (m, _) = finetune_adapters(
            &b.inner,
            variant_arg(variant)?,
            &c.inner,
            &TrainConfig::steps(o.steps, opt),
            o.seed,
        )?;
        *slot = boxed(LateralModel { inner: m });
        Ok(())
    })
}

/// Greedy (or, for `temperature > 0`, sampled) continuation of the prompt of
/// instance `index`. The transcript is written to `out_transcript`.
///
/// # Safety
/// `model` and `corpus` are live handles; `out_transcript` is writable.
#[no_mangle]
pub unsafe extern "C" fn lateral_generate(
    model: *const LateralModel,
    corpus: *const LateralCorpus,
    index: usize,
    max_steps: usize,
    temperature: f64,
    seed: u64,
    out_transcript: *mut *mut c_char,
) -> LateralStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = handle(corpus, "corpus")?;
        let slot = out(out_transcript, "out_transcript")?;
        let inst = c.inner.get(index).ok_or_else(|| {
            Fail::Arg(format!(
                "index {index} out of range for {} instances",
                c.inner.len()
            ))
        })?;
        let sampling = if temperature > 0.0 {
            Sampling::Temperature {
                t: temperature,
                seed,
            }
        } else {
            Sampling::Greedy
        };
        let cfg = GenerationConfig {
            max_total_steps: max_steps,
            sampling,
            ..GenerationConfig::default()
        };
        cfg.validate()?;
        let g = generate(&m.inner, &inst.prompt()?, cfg)?;
        *slot = c_string(transcript(&g.output, &|t| render_ids(t)));
        Ok(())
    })
}

/// Run the command-line interface with `argv[0..argc]` and return its exit
/// code (0 success, 1 failure, 2 usage error).
///
/// # Safety
/// `argv` points to `argc` valid C strings.
#[no_mangle]
pub unsafe extern "C" fn lateral_cli_run(argc: usize, argv: *const *const c_char) -> i32 {
    if argv.is_null() && argc > 0 {
        set_error("null pointer: argv".into());
        return 2;
    }
    let mut args = Vec::with_capacity(argc);
    for i in 0..argc {
        match str_arg(*argv.add(i), "argv element") {
            Ok(s) => args.push(s.to_owned()),
            Err(_) => {
                set_error(format!("invalid argument: argv[{i}]"));
                return 2;
            }
        }
    }
    catch_unwind(|| lateral::cli::dispatch(args)).unwrap_or(1)
}
