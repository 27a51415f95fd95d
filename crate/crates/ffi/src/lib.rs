//! C ABI over the bitsnap store and codecs.
//!
//! Every fallible function returns a [`BsStatus`]; on failure the message is
//! available from [`bs_last_error_message`] on the same thread. Buffers
//! returned through [`BsBuffer`] are owned by the caller and released with
//! [`bs_buffer_free`]. Handles are opaque and released with their `close`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use bitsnap::bitmask::{self, DeltaRecord};
use bitsnap::quant::{self, QuantizedTensor};
use bitsnap::store::{CheckpointKind, CheckpointStore, StoreConfig};
use bitsnap::{Checkpoint, Error, TensorBlob};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, or an out-of-range parameter.
    InvalidArgument = 1,
    /// Malformed or unsupported serialized data.
    Format = 2,
    /// Inputs disagree in shape, type, name or length.
    Mismatch = 3,
    NotFound = 4,
    /// Digest, manifest, tracker or chain inconsistency on disk.
    Corrupt = 5,
    Io = 6,
    /// Another writer holds the store lock.
    Locked = 7,
    /// Iteration not newer than what is already stored.
    Stale = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
    Internal = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BsStatus {
    match e {
        Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Truncated { .. }
        | Error::InvalidTensor(_)
        | Error::InvalidCheckpoint(_)
        | Error::DeltaInconsistent { .. }
        | Error::LabelOverflow { .. }
        | Error::TableMismatch(..) => BsStatus::Format,
        Error::ShapeMismatch { .. }
        | Error::DtypeMismatch { .. }
        | Error::NameMismatch { .. }
        | Error::StructureMismatch(_)
        | Error::PrevMismatch { .. }
        | Error::MissingPrev { .. } => BsStatus::Mismatch,
        Error::ChangedExceedsTotal { .. }
        | Error::ClusterCount(_)
        | Error::EmptyTensor(_)
        | Error::NonFinite { .. }
        | Error::Config(_)
        | Error::Weights(_)
        | Error::RankOutOfRange(_)
        | Error::PayloadTooLarge { .. } => BsStatus::InvalidArgument,
        Error::NotFound(_) | Error::TrackerMissing(_) => BsStatus::NotFound,
        Error::MissingLink { .. }
        | Error::CorruptManifest { .. }
        | Error::TrackerParse { .. }
        | Error::TypeMismatch { .. }
        | Error::TrackerMismatch(_)
        | Error::SlotRegion(_) => BsStatus::Corrupt,
        Error::Io { .. } => BsStatus::Io,
        Error::Locked(_) => BsStatus::Locked,
        Error::StaleIteration { .. } => BsStatus::Stale,
        _ => BsStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (BsStatus, String)>) -> BsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            BsStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (BsStatus, String)>;
}

impl<T> IntoFfi<T> for bitsnap::Result<T> {
    fn ffi(self) -> Result<T, (BsStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn invalid(msg: &str) -> (BsStatus, String) {
    (BsStatus::InvalidArgument, msg.to_string())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (BsStatus, String)> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(
    p: *const T,
    n: usize,
    what: &str,
) -> Result<&'a [T], (BsStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (BsStatus, String)> {
    p.as_mut()
        .ok_or_else(|| invalid(&format!("{what} is null")))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Byte buffer allocated by this library.
#[repr(C)]
pub struct BsBuffer {
    pub data: *mut u8,
    pub len: usize,
    pub capacity: usize,
}

impl BsBuffer {
    fn from_vec(v: Vec<u8>) -> Self {
        let mut v = std::mem::ManuallyDrop::new(v);
        BsBuffer {
            data: v.as_mut_ptr(),
            len: v.len(),
            capacity: v.capacity(),
        }
    }
}

/// Releases a buffer's memory and resets it to empty. Safe to call twice.
///
/// # Safety
/// `buf` must be null or point to a buffer filled by this library.
#[no_mangle]
pub unsafe extern "C" fn bs_buffer_free(buf: *mut BsBuffer) {
    if let Some(b) = buf.as_mut() {
        if !b.data.is_null() {
            drop(Vec::from_raw_parts(b.data, b.len, b.capacity));
        }
        b.data = std::ptr::null_mut();
        b.len = 0;
        b.capacity = 0;
    }
}

/// 64-bit digest used to validate staged payloads.
///
/// # Safety
/// `data` must point to `len` readable bytes (or be null with `len == 0`).
#[no_mangle]
pub unsafe extern "C" fn bs_checksum(data: *const u8, len: usize) -> u64 {
    match slice_arg(data, len, "data") {
        Ok(s) => bitsnap::engine::checksum(s),
        Err(_) => bitsnap::engine::checksum(&[]),
    }
}

/// Exact length of the record `bs_delta_encode` produces for `n` F16 elements
/// with `changed` of them different.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bs_delta_size_bytes(n: u64, changed: u64, out: *mut u64) -> BsStatus {
    guard(|| {
        // Records from this ABI are unnamed and one-dimensional.
        *out_arg(out, "out")? = bitmask::delta_size_bytes(n, changed).ffi()? + 8;
        Ok(())
    })
}

/// Encoded size of `n` F32 elements quantized with `clusters` clusters.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bs_quantized_size_bytes(
    n: u64,
    clusters: usize,
    out: *mut u64,
) -> BsStatus {
    guard(|| {
        *out_arg(out, "out")? = quant::quantized_size_bytes(n, clusters).ffi()?;
        Ok(())
    })
}

/// Bitmask delta of `target` against `base`, both `n` F16 bit patterns.
///
/// # Safety
/// `base` and `target` must point to `n` elements; `out` to a writable buffer.
#[no_mangle]
pub unsafe extern "C" fn bs_delta_encode(
    base: *const u16,
    target: *const u16,
    n: usize,
    out: *mut BsBuffer,
) -> BsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let b = TensorBlob::from_f16_bits("", vec![n as u64], slice_arg(base, n, "base")?).ffi()?;
        let t =
            TensorBlob::from_f16_bits("", vec![n as u64], slice_arg(target, n, "target")?).ffi()?;
        *out = BsBuffer::from_vec(bitmask::encode_delta(&b, &t).ffi()?.to_bytes());
        Ok(())
    })
}

/// Applies an encoded delta to `base` (`n` elements), writing `n` elements to `out`.
///
/// # Safety
/// `base` and `out` must hold `n` elements; `record` must hold `record_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bs_delta_decode(
    base: *const u16,
    n: usize,
    record: *const u8,
    record_len: usize,
    out: *mut u16,
) -> BsStatus {
    guard(|| {
        let rec = DeltaRecord::from_bytes(slice_arg(record, record_len, "record")?).ffi()?;
        let b = TensorBlob::from_f16_bits(
            rec.name(),
            rec.shape().to_vec(),
            slice_arg(base, n, "base")?,
        )
        .map_err(|_| {
            (
                BsStatus::Mismatch,
                format!("base has {n} elements, record covers {}", rec.total()),
            )
        })?;
        let bits = bitmask::decode_delta(&b, &rec).ffi()?.f16_bits();
        if n > 0 && out.is_null() {
            return Err(invalid("out is null"));
        }
        std::ptr::copy_nonoverlapping(bits.as_ptr(), out, n);
        Ok(())
    })
}

/// Cluster-quantizes `n` F32 values with `clusters` clusters (2..=16).
///
/// # Safety
/// `values` must point to `n` floats; `out` to a writable buffer.
#[no_mangle]
pub unsafe extern "C" fn bs_quantize_f32(
    values: *const f32,
    n: usize,
    clusters: usize,
    out: *mut BsBuffer,
) -> BsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = TensorBlob::from_f32("", vec![n as u64], slice_arg(values, n, "values")?).ffi()?;
        *out = BsBuffer::from_vec(quant::compress(&t, clusters).ffi()?.to_bytes());
        Ok(())
    })
}

/// Reconstructs `n` F32 values from a quantized blob.
///
/// # Safety
/// `data` must hold `len` bytes; `out` must hold `n` floats.
#[no_mangle]
pub unsafe extern "C" fn bs_dequantize_f32(
    data: *const u8,
    len: usize,
    out: *mut f32,
    n: usize,
) -> BsStatus {
    guard(|| {
        let q = QuantizedTensor::from_bytes(slice_arg(data, len, "data")?).ffi()?;
        if q.len() != n {
            return Err((
                BsStatus::Mismatch,
                format!("blob holds {} values, caller expects {n}", q.len()),
            ));
        }
        let v = quant::dequantize(&q).ffi()?.f32_values();
        if n > 0 && out.is_null() {
            return Err(invalid("out is null"));
        }
        std::ptr::copy_nonoverlapping(v.as_ptr(), out, n);
        Ok(())
    })
}

/// Opaque checkpoint store handle.
pub struct BsStore {
    inner: CheckpointStore,
}

/// Opens (creating if needed) a store rooted at `root`. `max_cached` and
/// `clusters` of 0 select the defaults.
///
/// # Safety
/// `root` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bs_store_open(
    root: *const c_char,
    max_cached: usize,
    clusters: usize,
    out: *mut *mut BsStore,
) -> BsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut cfg = StoreConfig::new(path_arg(root, "root")?);
        if max_cached > 0 {
            cfg.max_cached_iteration = max_cached;
        }
        if clusters > 0 {
            cfg.clusters = clusters;
        }
        let cfg = cfg.with_env_override().ffi()?;
        let store = CheckpointStore::open(cfg).ffi()?;
        *out = Box::into_raw(Box::new(BsStore { inner: store }));
        Ok(())
    })
}

/// # Safety
/// `store` must be null or a handle from [`bs_store_open`] not yet closed.
#[no_mangle]
pub unsafe extern "C" fn bs_store_close(store: *mut BsStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Saves the checkpoint file at `input_path` as `iteration`. Base or delta
/// is chosen by the store; `kind_out` (optional) receives 0 for base, 1 for delta.
///
/// # Safety
/// `store` must be a live handle; `input_path` NUL-terminated; `kind_out` null or valid.
#[no_mangle]
pub unsafe extern "C" fn bs_store_save_file(
    store: *mut BsStore,
    iteration: u64,
    input_path: *const c_char,
    kind_out: *mut u32,
) -> BsStatus {
    guard(|| {
        let s = &mut out_arg(store, "store")?.inner;
        let mut ckpt = Checkpoint::read_file(&path_arg(input_path, "input_path")?).ffi()?;
        ckpt.iteration = iteration;
        let prev = match s.plan(iteration).ffi()?.kind {
            CheckpointKind::Delta => Some(s.load_checkpoint(None).ffi()?),
            CheckpointKind::Base => None,
        };
        let m = s.save_checkpoint(&ckpt, prev.as_ref()).ffi()?;
        if let Some(k) = kind_out.as_mut() {
            *k = (m.kind == CheckpointKind::Delta) as u32;
        }
        Ok(())
    })
}

/// Reconstructs `iteration` (the latest when `has_iteration` is 0) into a
/// checkpoint file at `output_path`.
///
/// # Safety
/// `store` must be a live handle; `output_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bs_store_load_file(
    store: *const BsStore,
    has_iteration: i32,
    iteration: u64,
    output_path: *const c_char,
) -> BsStatus {
    guard(|| {
        let s = &store
            .as_ref()
            .ok_or_else(|| invalid("store is null"))?
            .inner;
        let ckpt = s
            .load_checkpoint((has_iteration != 0).then_some(iteration))
            .ffi()?;
        ckpt.write_file(&path_arg(output_path, "output_path")?)
            .ffi()?;
        Ok(())
    })
}

/// Reads the tracker: latest committed iteration and its base.
///
/// # Safety
/// `store` must be a live handle; `latest` and `base` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bs_store_latest(
    store: *const BsStore,
    latest: *mut u64,
    base: *mut u64,
) -> BsStatus {
    guard(|| {
        let s = &store
            .as_ref()
            .ok_or_else(|| invalid("store is null"))?
            .inner;
        let t = s.read_tracker().ffi()?;
        *out_arg(latest, "latest")? = t.latest_iteration;
        *out_arg(base, "base")? = t.latest_base_iteration;
        Ok(())
    })
}
