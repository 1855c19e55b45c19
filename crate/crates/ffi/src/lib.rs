//! C ABI over the `prolap` library.
//!
//! Conventions:
//!
//! * Every fallible function returns a [`ProlapStatus`]; on failure a message
//!   is available from [`prolap_last_error`] on the same thread.
//! * A Gaussian is passed as two `double` arrays (`mu`, `log_var`) of equal
//!   length `d`.
//! * Handles come from `prolap_dataset_generate`, `prolap_dataset_load`,
//!   `prolap_model_load` and `prolap_train` and are released with the
//!   matching `*_free`; freeing `NULL` is a no-op.
//! * Panics never cross the boundary; they surface as `PROLAP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prolap::config::KeyValues;
use prolap::dataset::{self, GenConfig, HierDataset, LEVELS};
use prolap::eval::{self, Direction, RECALL_KS};
use prolap::geometry::{self, DiagGaussian, SimilarityParams};
use prolap::losses;
use prolap::model::Model;
use prolap::trainer::{self, Checkpoint, TrainConfig};
use prolap::{Error, ErrorKind};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProlapStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// Invalid argument or configuration.
    Usage = 2,
    /// Unreadable, malformed or mismatched data.
    Data = 3,
    /// Non-finite values or a failed numerical routine.
    Numerical = 4,
    /// An internal panic was caught.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> ProlapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ProlapStatus::Ok
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("`{name}` must not be NULL"));
            ProlapStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            match e.kind() {
                ErrorKind::Usage => ProlapStatus::Usage,
                ErrorKind::Data => ProlapStatus::Data,
                ErrorKind::Numerical => ProlapStatus::Numerical,
            }
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            ProlapStatus::Panic
        }
    }
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn prolap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prolap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn slice<'a, T>(p: *const T, n: usize, name: &'static str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, name: &'static str) -> FfiResult<&'a mut [T]> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn gaussian(mu: *const f64, log_var: *const f64, d: usize) -> FfiResult<DiagGaussian> {
    let mu = slice(mu, d, "mu")?;
    let lv = slice(log_var, d, "log_var")?;
    Ok(DiagGaussian::new(mu.to_vec(), lv.to_vec())?)
}

unsafe fn string(p: *const c_char, name: &'static str) -> FfiResult<String> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p).to_str().map(str::to_string).map_err(|_| {
        Failure::Lib(Error::InvalidArgument(format!(
            "`{name}` is not valid UTF-8"
        )))
    })
}

/// Corrected similarity `mu_a . mu_t - (tr Sigma_a + tr Sigma_t) / 2`.
///
/// # Safety
/// Every array must hold `d` doubles; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_csd_similarity(
    mu_a: *const f64,
    log_var_a: *const f64,
    mu_t: *const f64,
    log_var_t: *const f64,
    d: usize,
    out_value: *mut f64,
) -> ProlapStatus {
    guard(|| {
        let a = gaussian(mu_a, log_var_a, d)?;
        let t = gaussian(mu_t, log_var_t, d)?;
        *out(out_value, "out_value")? = geometry::csd_similarity(&a, &t)?;
        Ok(())
    })
}

/// Inclusion statistic `H(z1 ⊂ z2)`; positive when `z2` contains `z1`.
///
/// # Safety
/// Every array must hold `d` doubles; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_inclusion_score(
    mu1: *const f64,
    log_var1: *const f64,
    mu2: *const f64,
    log_var2: *const f64,
    d: usize,
    out_value: *mut f64,
) -> ProlapStatus {
    guard(|| {
        let z1 = gaussian(mu1, log_var1, d)?;
        let z2 = gaussian(mu2, log_var2, d)?;
        *out(out_value, "out_value")? = geometry::inclusion_score(&z1, &z2)?;
        Ok(())
    })
}

/// Pairwise probabilistic contrastive loss for one pair with label `y = ±1`.
///
/// # Safety
/// Every array must hold `d` doubles; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_ppcl(
    mu_a: *const f64,
    log_var_a: *const f64,
    mu_t: *const f64,
    log_var_t: *const f64,
    d: usize,
    y: i32,
    alpha: f64,
    beta: f64,
    out_value: *mut f64,
) -> ProlapStatus {
    guard(|| {
        let a = gaussian(mu_a, log_var_a, d)?;
        let t = gaussian(mu_t, log_var_t, d)?;
        let p = SimilarityParams::new(alpha, beta)?;
        *out(out_value, "out_value")? = losses::ppcl(&a, &t, y, &p)?;
        Ok(())
    })
}

/// `softplus(-c H(z1 ⊂ z2))`.
///
/// # Safety
/// Every array must hold `d` doubles; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_inclusion_loss(
    mu1: *const f64,
    log_var1: *const f64,
    mu2: *const f64,
    log_var2: *const f64,
    d: usize,
    c: f64,
    out_value: *mut f64,
) -> ProlapStatus {
    guard(|| {
        let z1 = gaussian(mu1, log_var1, d)?;
        let z2 = gaussian(mu2, log_var2, d)?;
        *out(out_value, "out_value")? = losses::inclusion_loss(&z1, &z2, c)?;
        Ok(())
    })
}

/// `KL(N(mu, sigma^2) || N(0, I))`.
///
/// # Safety
/// Both arrays must hold `d` doubles; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_kl_to_standard(
    mu: *const f64,
    log_var: *const f64,
    d: usize,
    out_value: *mut f64,
) -> ProlapStatus {
    guard(|| {
        let z = gaussian(mu, log_var, d)?;
        *out(out_value, "out_value")? = geometry::kl_to_standard(&z);
        Ok(())
    })
}

/// Percentage of pairs `i` with `H(level4[i] ⊂ level1[i]) > 0`. Embeddings
/// are packed row-major, `n` rows of `d` values per array.
///
/// # Safety
/// Every array must hold `n * d` doubles; `out_percent` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_inclusion_test_rate(
    mu1: *const f64,
    log_var1: *const f64,
    mu4: *const f64,
    log_var4: *const f64,
    n: usize,
    d: usize,
    out_percent: *mut f64,
) -> ProlapStatus {
    guard(|| {
        let rows = |mu: *const f64, lv: *const f64| -> FfiResult<Vec<DiagGaussian>> {
            let mu = slice(mu, n * d, "mu")?;
            let lv = slice(lv, n * d, "log_var")?;
            (0..n)
                .map(|i| {
                    Ok(DiagGaussian::new(
                        mu[i * d..(i + 1) * d].to_vec(),
                        lv[i * d..(i + 1) * d].to_vec(),
                    )?)
                })
                .collect()
        };
        let l1 = rows(mu1, log_var1)?;
        let l4 = rows(mu4, log_var4)?;
        *out(out_percent, "out_percent")? = eval::inclusion_test_rate(&l1, &l4)?;
        Ok(())
    })
}

/// Recall at 1, 5, 10 and mAP@10 from a row-major `n_queries x n_gallery`
/// score matrix and a same-shaped 0/1 relevance matrix. Every query needs at
/// least one relevant entry.
///
/// # Safety
/// `scores` and `relevant` must hold `n_queries * n_gallery` entries;
/// `out_recall` must hold 3 doubles; `out_map10` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_retrieval_metrics(
    scores: *const f64,
    relevant: *const u8,
    n_queries: usize,
    n_gallery: usize,
    out_recall: *mut f64,
    out_map10: *mut f64,
) -> ProlapStatus {
    guard(|| {
        let n = n_queries * n_gallery;
        let s = slice(scores, n, "scores")?;
        let r = slice(relevant, n, "relevant")?;
        let rows: Vec<Vec<f64>> = s.chunks(n_gallery.max(1)).map(<[f64]>::to_vec).collect();
        let rel: Vec<Vec<usize>> = r
            .chunks(n_gallery.max(1))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        let report = eval::retrieval_from_scores(Direction::AudioToText, &rows, &rel)?;
        let recall = slice_mut(out_recall, RECALL_KS.len(), "out_recall")?;
        for (dst, k) in recall.iter_mut().zip(RECALL_KS) {
            *dst = report.r_at[&k];
        }
        *out(out_map10, "out_map10")? = report.map_at_10;
        Ok(())
    })
}

/// Opaque synthetic dataset.
pub struct ProlapDataset(HierDataset);

/// Opaque trained model.
pub struct ProlapModel(Model);

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Generates a dataset with default settings except the given size, width
/// and seed.
///
/// # Safety
/// `out_dataset` must be writable; the result is freed with
/// `prolap_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn prolap_dataset_generate(
    n_items: usize,
    d_in: usize,
    seed: u64,
    out_dataset: *mut *mut ProlapDataset,
) -> ProlapStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let cfg = GenConfig {
            n_items,
            d_in,
            seed,
            ..GenConfig::default()
        };
        *slot = boxed(ProlapDataset(dataset::generate(&cfg)?));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_dataset` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_dataset_load(
    path: *const c_char,
    out_dataset: *mut *mut ProlapDataset,
) -> ProlapStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let p = string(path, "path")?;
        *slot = boxed(ProlapDataset(dataset::load(Path::new(&p))?));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn prolap_dataset_save(
    ds: *const ProlapDataset,
    path: *const c_char,
) -> ProlapStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or(Failure::Null("ds"))?;
        let p = string(path, "path")?;
        dataset::save(&ds.0, Path::new(&p))?;
        Ok(())
    })
}

/// Number of items; 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn prolap_dataset_len(ds: *const ProlapDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Feature width; 0 for NULL or an empty dataset.
///
/// # Safety
/// `ds` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn prolap_dataset_dim(ds: *const ProlapDataset) -> usize {
    ds.as_ref().and_then(|d| d.0.dim()).unwrap_or(0)
}

/// Copies item `item`'s audio features (`level = 0`) or its Level-`level`
/// caption (`1..=4`) into `out_features`, which holds `len` doubles.
///
/// # Safety
/// `ds` must come from this library; `out_features` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn prolap_dataset_features(
    ds: *const ProlapDataset,
    item: usize,
    level: usize,
    out_features: *mut f64,
    len: usize,
) -> ProlapStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or(Failure::Null("ds"))?;
        let it = ds.0.items.get(item).ok_or_else(|| {
            Error::InvalidArgument(format!("item {item} out of range ({} items)", ds.0.len()))
        })?;
        let src = match level {
            0 => &it.audio_feat[..],
            1..=LEVELS => it.caption(level),
            _ => return Err(Error::InvalidArgument(format!("level {level} outside 0..=4")).into()),
        };
        if len != src.len() {
            return Err(Error::DimensionMismatch {
                expected: src.len(),
                found: len,
            }
            .into());
        }
        slice_mut(out_features, len, "out_features")?.copy_from_slice(src);
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a dataset from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn prolap_dataset_free(ds: *mut ProlapDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_model_load(
    path: *const c_char,
    out_model: *mut *mut ProlapModel,
) -> ProlapStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let p = string(path, "path")?;
        *slot = boxed(ProlapModel(Checkpoint::load(Path::new(&p))?.model));
        Ok(())
    })
}

/// Trains on `ds`. `preset` (nullable) names a preset; `overrides`
/// (nullable) holds `key = value` lines applied after it; `out_dir`
/// (nullable) receives checkpoints and metrics.
///
/// # Safety
/// Strings must be NULL or NUL-terminated; `ds` must come from this library;
/// `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prolap_train(
    ds: *const ProlapDataset,
    preset: *const c_char,
    overrides: *const c_char,
    out_dir: *const c_char,
    out_model: *mut *mut ProlapModel,
) -> ProlapStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or(Failure::Null("ds"))?;
        let slot = out(out_model, "out_model")?;
        let mut cfg = TrainConfig::default();
        let preset = (!preset.is_null())
            .then(|| string(preset, "preset"))
            .transpose()?;
        if let Some(p) = &preset {
            cfg.apply_preset(p)?;
        }
        if !overrides.is_null() {
            let text = string(overrides, "overrides")?;
            cfg.apply(&KeyValues::parse(&text, Path::new("<overrides>"))?)?;
        }
        let dir = (!out_dir.is_null())
            .then(|| string(out_dir, "out_dir"))
            .transpose()?;
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::Io {
                path: d.into(),
                source: e,
            })?;
        }
        let out = trainer::train(
            &ds.0,
            &cfg,
            preset.as_deref(),
            dir.as_deref().map(Path::new),
        )?;
        *slot = boxed(ProlapModel(out.final_checkpoint.model));
        Ok(())
    })
}

/// Input width of both encoders; 0 for NULL.
///
/// # Safety
/// `m` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn prolap_model_input_dim(m: *const ProlapModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.audio.arch().d_in)
}

/// Embedding width; 0 for NULL.
///
/// # Safety
/// `m` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn prolap_model_output_dim(m: *const ProlapModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.audio.arch().d_out)
}

/// Which encoder `prolap_model_embed` runs.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProlapModality {
    Audio = 0,
    Text = 1,
}

/// Embeds `x` (`d_in` values). `visible` is NULL for the raw input or holds
/// `d_in` bytes, zero where the coordinate is replaced by the mask token.
/// Writes `d_out` values to each of `out_mu` and `out_log_var`.
///
/// # Safety
/// Array lengths must match the given sizes; `m` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn prolap_model_embed(
    m: *const ProlapModel,
    modality: ProlapModality,
    x: *const f64,
    d_in: usize,
    visible: *const u8,
    out_mu: *mut f64,
    out_log_var: *mut f64,
    d_out: usize,
) -> ProlapStatus {
    guard(|| {
        let m = &m.as_ref().ok_or(Failure::Null("m"))?.0;
        let x = slice(x, d_in, "x")?;
        let vis: Option<Vec<bool>> = if visible.is_null() {
            None
        } else {
            Some(
                slice(visible, d_in, "visible")?
                    .iter()
                    .map(|&v| v != 0)
                    .collect(),
            )
        };
        let z = match modality {
            ProlapModality::Audio => m.embed_audio(x, vis.as_deref())?,
            ProlapModality::Text => m.embed_text(x, vis.as_deref())?,
        };
        if d_out != z.dim() {
            return Err(Error::DimensionMismatch {
                expected: z.dim(),
                found: d_out,
            }
            .into());
        }
        slice_mut(out_mu, d_out, "out_mu")?.copy_from_slice(z.mu());
        slice_mut(out_log_var, d_out, "out_log_var")?.copy_from_slice(z.log_var());
        Ok(())
    })
}

/// The model's similarity (corrected similarity or cosine of the means)
/// between an audio-side and a text-side embedding of width `d`.
///
/// # Safety
/// Every array must hold `d` doubles; `m` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn prolap_model_score(
    m: *const ProlapModel,
    mu_a: *const f64,
    log_var_a: *const f64,
    mu_t: *const f64,
    log_var_t: *const f64,
    d: usize,
    out_value: *mut f64,
) -> ProlapStatus {
    guard(|| {
        let m = &m.as_ref().ok_or(Failure::Null("m"))?.0;
        let a = gaussian(mu_a, log_var_a, d)?;
        let t = gaussian(mu_t, log_var_t, d)?;
        *out(out_value, "out_value")? = m.score(&a, &t)?;
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a model from this library not freed before.
#[no_mangle]
pub unsafe extern "C" fn prolap_model_free(m: *mut ProlapModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
