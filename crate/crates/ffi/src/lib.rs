//! C ABI over the cotrain toolkit.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`CotrainStatus`]; on failure [`cotrain_last_error`] describes the cause
//! for the calling thread. Volumes are dense `depth × height × width`
//! arrays in row-major order (width fastest). Label values are 0..=4 for
//! Background, PZ, TZ, DPU and AFS.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cotrain::metrics::{dsc, mad, paired_t_test_one_sided};
use cotrain::nets::{build_dual, load_checkpoint, BranchAssignment, BranchId, DualBranchOutput, DualModel, ModelConfig, Variant};
use cotrain::phantom::{generate_case, PhantomSpec};
use cotrain::postprocess::postprocess_pipeline;
use cotrain::volume::{preprocess, Grid3, LabelMap, Shape3, Spacing, Volume, ZoneLabel};
use cotrain::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CotrainStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Precondition = 7,
    NonFinite = 8,
    CheckpointMismatch = 9,
    MissingCases = 10,
    Panic = 11,
}

/// Trained or freshly initialised dual-branch network.
pub struct CotrainModel(DualModel);

/// Per-branch class probabilities (and reconstructions) for one volume.
pub struct CotrainOutput {
    output: DualBranchOutput,
    assignment: BranchAssignment,
}

/// Hard five-class label map.
pub struct CotrainLabels(LabelMap);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CotrainStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => CotrainStatus::Io,
            Error::Format(_) | Error::Json(_) => CotrainStatus::Format,
            Error::Shape(_) => CotrainStatus::Shape,
            Error::Config(_) => CotrainStatus::Config,
            Error::Precondition(_) | Error::Generation(_) => CotrainStatus::Precondition,
            Error::NonFinite { .. } => CotrainStatus::NonFinite,
            Error::CheckpointMismatch(_) => CotrainStatus::CheckpointMismatch,
            Error::MissingCases(_) => CotrainStatus::MissingCases,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CotrainStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(CotrainStatus::NullPointer, format!("{what} is null"))
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CotrainStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CotrainStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {msg}"));
            CotrainStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn shape_arg(dims: *const usize) -> Result<Shape3, Failure> {
    if dims.is_null() {
        return Err(null("dims"));
    }
    let d = std::slice::from_raw_parts(dims, 3);
    let s = Shape3::new(d[0], d[1], d[2]);
    if s.is_empty() {
        return Err(invalid(format!("shape {s} has a zero extent")));
    }
    Ok(s)
}

unsafe fn spacing_arg(spacing: *const f64) -> Result<Spacing, Failure> {
    if spacing.is_null() {
        return Ok(Spacing::ISOTROPIC);
    }
    let s = std::slice::from_raw_parts(spacing, 3);
    Ok(Spacing::new([s[0], s[1], s[2]])?)
}

unsafe fn labels_arg(p: *const u8, shape: Shape3, spacing: Spacing, what: &str) -> Result<LabelMap, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(LabelMap::from_raw(shape, std::slice::from_raw_parts(p, shape.len()), spacing)?)
}

fn zone_arg(zone: u8) -> Result<ZoneLabel, Failure> {
    ZoneLabel::from_index(zone as usize).ok_or_else(|| invalid(format!("zone {zone} outside 0..=4")))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cotrain_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cotrain_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes one synthetic phantom into caller buffers of `d*h*w` elements.
///
/// # Safety
/// `dims` points to 3 values; `image` and `labels` hold `d*h*w` elements.
#[no_mangle]
pub unsafe extern "C" fn cotrain_generate_phantom(seed: u64, dims: *const usize, image: *mut f32, labels: *mut u8) -> CotrainStatus {
    guard(|| {
        let shape = shape_arg(dims)?;
        if image.is_null() || labels.is_null() {
            return Err(null("image or labels buffer"));
        }
        let spec = PhantomSpec {
            shape,
            ..PhantomSpec::default()
        }
        .with_seed(seed);
        let (img, lm) = generate_case(&spec)?;
        std::slice::from_raw_parts_mut(image, shape.len()).copy_from_slice(img.data.as_slice());
        std::slice::from_raw_parts_mut(labels, shape.len()).copy_from_slice(&lm.to_raw());
        Ok(())
    })
}

/// Builds an untrained model. `variant` is one of `par`, `par_reco`, `mix`,
/// `mix_reco`; zero `base_filters` or `depth` select the defaults.
///
/// # Safety
/// `variant` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cotrain_model_new(
    variant: *const c_char,
    base_filters: usize,
    depth: usize,
    parameter_seed: u64,
    out: *mut *mut CotrainModel,
) -> CotrainStatus {
    guard(|| {
        let v: Variant = str_arg(variant, "variant")?.parse()?;
        let mut cfg = ModelConfig {
            parameter_seed,
            ..ModelConfig::default()
        };
        if base_filters > 0 {
            cfg.base_filters = base_filters;
        }
        if depth > 0 {
            cfg.depth = depth;
        }
        let model = build_dual(&cfg, v)?;
        write_out(out, Box::into_raw(Box::new(CotrainModel(model))), "out")
    })
}

/// Loads a checkpoint written by `cotrain train`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cotrain_model_load(path: *const c_char, out: *mut *mut CotrainModel) -> CotrainStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        let model = load_checkpoint(&p, None)?;
        write_out(out, Box::into_raw(Box::new(CotrainModel(model))), "out")
    })
}

/// # Safety
/// `model` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cotrain_model_free(model: *mut CotrainModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters across both branches.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cotrain_model_param_count(model: *const CotrainModel, out: *mut usize) -> CotrainStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = BranchId::ALL.iter().map(|&b| m.0.branch_param_count(b)).sum();
        write_out(out, n, "out")
    })
}

/// Runs both branches on a volume. With `normalize` nonzero the image is
/// first clipped to its 1st/99th percentiles and rescaled to [0, 1].
/// `spacing` may be null for 1 mm isotropic.
///
/// # Safety
/// `dims` and `spacing` point to 3 values; `image` holds `d*h*w` floats.
#[no_mangle]
pub unsafe extern "C" fn cotrain_model_predict(
    model: *const CotrainModel,
    image: *const f32,
    dims: *const usize,
    spacing: *const f64,
    normalize: i32,
    out: *mut *mut CotrainOutput,
) -> CotrainStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let shape = shape_arg(dims)?;
        if image.is_null() {
            return Err(null("image"));
        }
        let data = std::slice::from_raw_parts(image, shape.len()).to_vec();
        let mut vol = Volume::new(Grid3::from_vec(shape, data)?, spacing_arg(spacing)?);
        if normalize != 0 {
            vol = preprocess(&vol)?.volume;
        }
        let output = m.0.forward(&vol)?;
        let handle = CotrainOutput {
            output,
            assignment: BranchAssignment::default(),
        };
        write_out(out, Box::into_raw(Box::new(handle)), "out")
    })
}

/// Loads a dual-branch output saved by the toolkit.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cotrain_output_load(path: *const c_char, out: *mut *mut CotrainOutput) -> CotrainStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        let (output, assignment) = DualBranchOutput::load(&p)?;
        write_out(out, Box::into_raw(Box::new(CotrainOutput { output, assignment })), "out")
    })
}

/// Saves an output as `<stem>.json` + `<stem>.raw`.
///
/// # Safety
/// `output` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cotrain_output_save(output: *const CotrainOutput, path: *const c_char) -> CotrainStatus {
    guard(|| {
        let o = output.as_ref().ok_or_else(|| null("output"))?;
        let p = PathBuf::from(str_arg(path, "path")?);
        Ok(o.output.save(&p, &o.assignment)?)
    })
}

/// # Safety
/// `output` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cotrain_output_free(output: *mut CotrainOutput) {
    if !output.is_null() {
        drop(Box::from_raw(output));
    }
}

/// Replaces the zone-to-branch assignment, e.g. `BG:I,PZ:I,TZ:II,DPU:I,AFS:II`.
///
/// # Safety
/// `output` is a live handle; `tag` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cotrain_output_set_assignment(output: *mut CotrainOutput, tag: *const c_char) -> CotrainStatus {
    guard(|| {
        let o = output.as_mut().ok_or_else(|| null("output"))?;
        o.assignment = BranchAssignment::from_tag(str_arg(tag, "tag")?)?;
        Ok(())
    })
}

/// Copies one class grid of one branch (0 = I, 1 = II) into `dst`.
///
/// # Safety
/// `output` is a live handle; `dst` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cotrain_output_probs(
    output: *const CotrainOutput,
    branch: u8,
    zone: u8,
    dst: *mut f64,
    len: usize,
) -> CotrainStatus {
    guard(|| {
        let o = output.as_ref().ok_or_else(|| null("output"))?;
        let b = *BranchId::ALL
            .get(branch as usize)
            .ok_or_else(|| invalid(format!("branch {branch} outside 0..=1")))?;
        let g = o.output.prob(b, zone_arg(zone)?);
        if len != g.len() {
            return Err(invalid(format!("buffer holds {len} values, grid has {}", g.len())));
        }
        if dst.is_null() {
            return Err(null("dst"));
        }
        std::slice::from_raw_parts_mut(dst, len).copy_from_slice(g.as_slice());
        Ok(())
    })
}

/// Fusion, argmax, largest-component filtering and hole filling.
///
/// # Safety
/// `output` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cotrain_postprocess(output: *const CotrainOutput, out: *mut *mut CotrainLabels) -> CotrainStatus {
    guard(|| {
        let o = output.as_ref().ok_or_else(|| null("output"))?;
        let labels = postprocess_pipeline(&o.output, &o.assignment)?;
        write_out(out, Box::into_raw(Box::new(CotrainLabels(labels))), "out")
    })
}

/// # Safety
/// `labels` is a live handle; `dims` holds 3 values.
#[no_mangle]
pub unsafe extern "C" fn cotrain_labels_shape(labels: *const CotrainLabels, dims: *mut usize) -> CotrainStatus {
    guard(|| {
        let l = labels.as_ref().ok_or_else(|| null("labels"))?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&l.0.shape().dims());
        Ok(())
    })
}

/// # Safety
/// `labels` is a live handle; `dst` holds `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cotrain_labels_copy(labels: *const CotrainLabels, dst: *mut u8, len: usize) -> CotrainStatus {
    guard(|| {
        let l = labels.as_ref().ok_or_else(|| null("labels"))?;
        let raw = l.0.to_raw();
        if len != raw.len() {
            return Err(invalid(format!("buffer holds {len} bytes, label map has {}", raw.len())));
        }
        if dst.is_null() {
            return Err(null("dst"));
        }
        std::slice::from_raw_parts_mut(dst, len).copy_from_slice(&raw);
        Ok(())
    })
}

/// # Safety
/// `labels` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cotrain_labels_free(labels: *mut CotrainLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// Dice coefficient of one zone between two label arrays (1 when the zone
/// is absent from both).
///
/// # Safety
/// `dims` holds 3 values; `pred` and `gt` hold `d*h*w` bytes.
#[no_mangle]
pub unsafe extern "C" fn cotrain_dsc(pred: *const u8, gt: *const u8, dims: *const usize, zone: u8, out: *mut f64) -> CotrainStatus {
    guard(|| {
        let shape = shape_arg(dims)?;
        let z = zone_arg(zone)?;
        let p = labels_arg(pred, shape, Spacing::ISOTROPIC, "pred")?;
        let g = labels_arg(gt, shape, Spacing::ISOTROPIC, "gt")?;
        write_out(out, dsc(&p.mask(z), &g.mask(z))?, "out")
    })
}

/// Mean absolute boundary distance of one zone in millimetres; NaN when
/// either label array lacks the zone. `spacing` may be null for 1 mm.
///
/// # Safety
/// `dims`/`spacing` hold 3 values; `pred` and `gt` hold `d*h*w` bytes.
#[no_mangle]
pub unsafe extern "C" fn cotrain_mad(
    pred: *const u8,
    gt: *const u8,
    dims: *const usize,
    spacing: *const f64,
    zone: u8,
    out: *mut f64,
) -> CotrainStatus {
    guard(|| {
        let shape = shape_arg(dims)?;
        let sp = spacing_arg(spacing)?;
        let z = zone_arg(zone)?;
        let p = labels_arg(pred, shape, sp, "pred")?;
        let g = labels_arg(gt, shape, sp, "gt")?;
        write_out(out, mad(&p.mask(z), &g.mask(z), sp)?.unwrap_or(f64::NAN), "out")
    })
}

/// One-sided paired t-test of H1: mean(a - b) > 0.
///
/// # Safety
/// `a` and `b` hold `n` doubles; the outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn cotrain_paired_t_test(
    a: *const f64,
    b: *const f64,
    n: usize,
    alpha: f64,
    t_statistic: *mut f64,
    p_value: *mut f64,
) -> CotrainStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("sample"));
        }
        let r = paired_t_test_one_sided(std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n), alpha)?;
        write_out(t_statistic, r.t_statistic, "t_statistic")?;
        write_out(p_value, r.p_value, "p_value")
    })
}
