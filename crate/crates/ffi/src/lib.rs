//! C interface to the prompt initializers.
//!
//! Backbones and prompt sets cross the boundary as opaque handles that the
//! caller releases with the matching `*_free` function. Every fallible call
//! returns a [`VptStatus`]; the message of the most recent failure on the
//! calling thread is available through [`vpt_last_error`].
//!
//! Images are passed as one contiguous row-major `f64` buffer holding
//! `n_images` matrices of `num_patches x patch_dim` values each.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use vipamin::archive::{backbone_from_archive, prompts_archive, prompts_from_archive, TensorArchive};
use vipamin::diagnostics::{block_projection_energy, ValuePath};
use vipamin::prompt_init::{
    mean_pool_batch, spt_rand_init, vipamin_init, xavier_init, InitConfig, InitInputs,
};
use vipamin::vit::{FrozenBackbone, PromptSet, VitConfig};
use vipamin::{DenseMatrix, Error};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VptStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A parameter, shape or configuration was rejected.
    InvalidArgument = 2,
    /// A numerical routine failed (non-finite values, no convergence).
    Numeric = 3,
    /// A file could not be read or written, or failed its integrity check.
    Io = 4,
    /// The caller's buffer is too small.
    BufferTooSmall = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// Opaque frozen backbone.
pub struct VptBackbone {
    inner: FrozenBackbone,
}

/// Opaque prompt set (`n_p x embed_dim`).
pub struct VptPrompts {
    inner: PromptSet,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> VptStatus {
    match e.exit_code() {
        2 => VptStatus::InvalidArgument,
        3 => VptStatus::Numeric,
        _ => VptStatus::Io,
    }
}

enum Failure {
    Core(Error),
    Status(VptStatus, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(VptStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VptStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            VptStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| {
        Failure::Status(VptStatus::InvalidArgument, "path is not valid UTF-8".into())
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn backbone_arg<'a>(h: *const VptBackbone) -> Result<&'a FrozenBackbone, Failure> {
    h.as_ref().map(|b| &b.inner).ok_or_else(|| null("backbone"))
}

unsafe fn prompts_arg<'a>(h: *const VptPrompts) -> Result<&'a PromptSet, Failure> {
    h.as_ref().map(|p| &p.inner).ok_or_else(|| null("prompts"))
}

/// Splits the flat image buffer into per-image matrices.
unsafe fn images_arg(
    bb: &FrozenBackbone,
    images: *const f64,
    n_images: usize,
) -> Result<Vec<DenseMatrix>, Failure> {
    if images.is_null() {
        return Err(null("images"));
    }
    if n_images == 0 {
        return Err(Failure::Status(
            VptStatus::InvalidArgument,
            "at least one image is required".into(),
        ));
    }
    let rows = bb.config.num_patches();
    let cols = bb.config.patch_dim;
    let all = std::slice::from_raw_parts(images, n_images * rows * cols);
    all.chunks_exact(rows * cols)
        .map(|c| DenseMatrix::new(rows, cols, c.to_vec()).map_err(Failure::from))
        .collect()
}

fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    // Nullness checked by callers before any work is done.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Copies the last error message on this thread into `buf` (NUL-terminated,
/// truncated to fit) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn vpt_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a backbone archive.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vpt_backbone_load(path: *const c_char, out: *mut *mut VptBackbone) -> VptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let archive = TensorArchive::read(&path_arg(path)?)?;
        emit(out, VptBackbone { inner: backbone_from_archive(&archive)? })
    })
}

/// Builds a randomly initialized backbone (attention biases enabled).
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vpt_backbone_random(
    depth: usize,
    embed_dim: usize,
    num_heads: usize,
    ffn_hidden: usize,
    grid_rows: usize,
    grid_cols: usize,
    patch_dim: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut VptBackbone,
) -> VptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = VitConfig {
            depth,
            embed_dim,
            num_heads,
            ffn_hidden,
            patch_grid: (grid_rows, grid_cols),
            patch_dim,
            num_classes,
            attention_bias: true,
        };
        emit(out, VptBackbone { inner: FrozenBackbone::random(config, seed)? })
    })
}

/// Releases a backbone. Null is ignored.
///
/// # Safety
/// `h` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vpt_backbone_free(h: *mut VptBackbone) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Reports the image layout and embedding shape of a backbone. Any output
/// pointer may be null.
///
/// # Safety
/// `h` must be a live handle; non-null outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn vpt_backbone_dims(
    h: *const VptBackbone,
    num_patches: *mut usize,
    patch_dim: *mut usize,
    embed_dim: *mut usize,
    depth: *mut usize,
) -> VptStatus {
    guard(|| {
        let c = &backbone_arg(h)?.config;
        for (ptr, v) in [
            (num_patches, c.num_patches()),
            (patch_dim, c.patch_dim),
            (embed_dim, c.embed_dim),
            (depth, c.depth),
        ] {
            if let Some(p) = ptr.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Backbone forward passes run so far on this handle.
///
/// # Safety
/// `h` must be null or a live handle; null yields 0.
#[no_mangle]
pub unsafe extern "C" fn vpt_backbone_forward_count(h: *const VptBackbone) -> u64 {
    h.as_ref().map_or(0, |b| b.inner.forward_count() as u64)
}

/// VIPAMIN initialization of `n_p` shallow prompts from one forward pass
/// over the given images; `k` tokens per matched prompt, `lambda` weight on
/// the orthogonal component.
///
/// # Safety
/// `images` must hold `n_images * num_patches * patch_dim` values; `out`
/// must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vpt_vipamin_init(
    h: *const VptBackbone,
    images: *const f64,
    n_images: usize,
    n_p: usize,
    k: usize,
    lambda: f64,
    seed: u64,
    out: *mut *mut VptPrompts,
) -> VptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bb = backbone_arg(h)?;
        let images = images_arg(bb, images, n_images)?;
        let config = InitConfig {
            n_p,
            k,
            lambda,
            batch_size: n_images,
            seed,
            include_key_bias: false,
        };
        let inputs = InitInputs::capture(bb, &images)?;
        let done = vipamin_init(&config, &inputs)?;
        emit(out, VptPrompts { inner: done.prompts })
    })
}

/// Prompts copied from randomly chosen patch embeddings of the images.
///
/// # Safety
/// As for [`vpt_vipamin_init`].
#[no_mangle]
pub unsafe extern "C" fn vpt_spt_rand_init(
    h: *const VptBackbone,
    images: *const f64,
    n_images: usize,
    n_p: usize,
    seed: u64,
    out: *mut *mut VptPrompts,
) -> VptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bb = backbone_arg(h)?;
        let images = images_arg(bb, images, n_images)?;
        let capture = bb.capture_batch(&images)?;
        emit(out, VptPrompts { inner: spt_rand_init(capture.embeddings(), n_p, seed)? })
    })
}

/// Xavier-uniform prompts of width `embed_dim`.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vpt_xavier_init(
    n_p: usize,
    embed_dim: usize,
    seed: u64,
    out: *mut *mut VptPrompts,
) -> VptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if embed_dim == 0 {
            return Err(Failure::Status(VptStatus::InvalidArgument, "embed_dim is 0".into()));
        }
        emit(out, VptPrompts { inner: xavier_init(n_p, embed_dim, seed)? })
    })
}

/// Share of the prompts' (bias-free) value-space mass inside the span of
/// the first block's self-attention output on the images' mean embedding.
///
/// # Safety
/// As for [`vpt_vipamin_init`]; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vpt_projection_energy(
    h: *const VptBackbone,
    prompts: *const VptPrompts,
    images: *const f64,
    n_images: usize,
    out: *mut f64,
) -> VptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bb = backbone_arg(h)?;
        let p = prompts_arg(prompts)?;
        let images = images_arg(bb, images, n_images)?;
        let capture = bb.capture_batch(&images)?;
        let e0 = mean_pool_batch(capture.embeddings())?;
        let report = block_projection_energy(&p.prompts, &e0, &bb.blocks[0], ValuePath::BiasFree)?;
        *out = report.value;
        Ok(())
    })
}

/// Releases a prompt set. Null is ignored.
///
/// # Safety
/// `h` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vpt_prompts_free(h: *mut VptPrompts) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Shape of a prompt set.
///
/// # Safety
/// `h` must be a live handle; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn vpt_prompts_shape(
    h: *const VptPrompts,
    rows: *mut usize,
    cols: *mut usize,
) -> VptStatus {
    guard(|| {
        let p = prompts_arg(h)?;
        if rows.is_null() || cols.is_null() {
            return Err(null("rows/cols"));
        }
        *rows = p.prompts.rows();
        *cols = p.prompts.cols();
        Ok(())
    })
}

/// Copies the prompts row-major into `buf`, which must hold at least
/// `rows * cols` values.
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn vpt_prompts_copy(h: *const VptPrompts, buf: *mut f64, len: usize) -> VptStatus {
    guard(|| {
        let p = prompts_arg(h)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let data = p.prompts.data();
        if len < data.len() {
            return Err(Failure::Status(
                VptStatus::BufferTooSmall,
                format!("buffer holds {len} values, {} needed", data.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Writes the prompt set as a one-set prompt archive.
///
/// # Safety
/// `h` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vpt_prompts_save(h: *const VptPrompts, path: *const c_char) -> VptStatus {
    guard(|| {
        let p = prompts_arg(h)?;
        let path = path_arg(path)?;
        prompts_archive(std::slice::from_ref(p), serde_json::Value::Null)?.write(&path)?;
        Ok(())
    })
}

/// Reads set `index` of a prompt archive (0 for shallow prompts, the block
/// index for deep ones).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vpt_prompts_load(
    path: *const c_char,
    index: usize,
    out: *mut *mut VptPrompts,
) -> VptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let archive = TensorArchive::read(&path_arg(path)?)?;
        let mut sets = prompts_from_archive(&archive)?;
        if index >= sets.len() {
            return Err(Failure::Status(
                VptStatus::InvalidArgument,
                format!("archive holds {} prompt sets, index {index} requested", sets.len()),
            ));
        }
        emit(out, VptPrompts { inner: sets.swap_remove(index) })
    })
}
