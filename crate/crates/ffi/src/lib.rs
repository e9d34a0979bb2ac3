//! C interface to the meddds classifier, metrics, latency recorder and
//! doctor node.
//!
//! Every object is an opaque handle created by a `*_new*` function and
//! released with the matching `*_free`. Fallible calls return an
//! [`MdStatus`]; on failure the message is kept per thread and can be read
//! with [`md_last_error_message`]. Handles may be used from any thread but
//! not from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::net::Ipv4Addr;
use std::panic::{self, AssertUnwindSafe};
use std::ptr;
use std::time::Duration;

use meddds::evaluation::{self, ConfusionMatrix, EvalError};
use meddds::inference::{Classifier, ExternalAdapter, InferenceError, QuadrantLinearModel};
use meddds::nodes::{DoctorNode, NodeConfig, NodeError, SimPipeline};
use meddds::pubsub::Reliability;
use meddds::samples::{Label, SampleId, XrayImageSample};
use meddds::telemetry::{self, LatencyRecorder};
use meddds::transport::{FaultProfile, Locator};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Io = 4,
    Timeout = 5,
    Protocol = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MdMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MdLatencyStats {
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub max_us: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MdClassification {
    pub sample_id: [u8; 16],
    /// 0 COVID19, 1 NORMAL, 2 LUNG_OPACITY, 3 VIRAL_PNEUMONIA.
    pub label: u8,
    pub confidences: [f64; 4],
    pub inference_duration_us: u64,
    /// Round trip measured by the doctor node.
    pub rtt_us: u64,
}

pub struct MdClassifier {
    inner: Box<dyn Classifier>,
}

pub struct MdConfusionMatrix {
    inner: ConfusionMatrix,
}

pub struct MdLatencyRecorder {
    inner: LatencyRecorder,
}

enum Doctor {
    Udp(DoctorNode),
    Simulated(SimPipeline),
}

pub struct MdDoctorNode {
    inner: Doctor,
}

struct Failure(MdStatus, String);

impl Failure {
    fn invalid(msg: impl ToString) -> Self {
        Failure(MdStatus::InvalidArgument, msg.to_string())
    }
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        let status = match e {
            InferenceError::ImageTooSmall { .. } => MdStatus::InvalidArgument,
            InferenceError::AdapterTimeout(_) => MdStatus::Timeout,
            InferenceError::AdapterIo(_) => MdStatus::Io,
            _ => MdStatus::Protocol,
        };
        Failure(status, e.to_string())
    }
}

impl From<NodeError> for Failure {
    fn from(e: NodeError) -> Self {
        let status = match e {
            NodeError::Timeout => MdStatus::Timeout,
            NodeError::Config(_) | NodeError::Sample(_) | NodeError::Pgm(_) => MdStatus::InvalidArgument,
            NodeError::Transport(_) | NodeError::Telemetry(_) => MdStatus::Io,
            NodeError::PubSub(_) => MdStatus::Protocol,
        };
        Failure(status, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::invalid(e)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MdStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            MdStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller promises a non-null `p` points to a live object.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(MdStatus::NullPointer, format!("{what} is null")))
}

fn non_null_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: as above, and the caller holds no other reference to it.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(MdStatus::NullPointer, format!("{what} is null")))
}

fn string_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MdStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and NUL-terminated by contract.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Failure::invalid(format!("{what} is not UTF-8")))
}

fn image_arg(width: u32, height: u32, pixels: *const u8, len: usize) -> Result<XrayImageSample, Failure> {
    if pixels.is_null() {
        return Err(Failure(MdStatus::NullPointer, "pixels is null".into()));
    }
    // SAFETY: `pixels` points to `len` readable bytes by contract.
    let data = unsafe { std::slice::from_raw_parts(pixels, len) }.to_vec();
    XrayImageSample::new(width, height, data).map_err(Failure::invalid)
}

fn sample_id_arg(p: *const u8) -> Result<SampleId, Failure> {
    if p.is_null() {
        return Err(Failure(MdStatus::NullPointer, "sample_id is null".into()));
    }
    let mut id = [0u8; 16];
    // SAFETY: 16 readable bytes by contract.
    unsafe { ptr::copy_nonoverlapping(p, id.as_mut_ptr(), 16) };
    Ok(SampleId(id))
}

fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    let slot = non_null_mut(out, "out")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

fn release<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn md_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// including the terminator, or 0 if there is no message.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn md_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

// ---- classifier ---------------------------------------------------------

/// The built-in quadrant model.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn md_classifier_new_builtin(out: *mut *mut MdClassifier) -> MdStatus {
    guard(|| emit(out, MdClassifier { inner: Box::new(QuadrantLinearModel::new()) }))
}

/// An external command; the PGM path is appended as its last argument.
/// `timeout_ms == 0` keeps the default of 30 s.
///
/// # Safety
/// `command` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn md_classifier_new_adapter(
    command: *const c_char,
    timeout_ms: u64,
    out: *mut *mut MdClassifier,
) -> MdStatus {
    guard(|| {
        let mut adapter = ExternalAdapter::new(string_arg(command, "command")?)?;
        if timeout_ms > 0 {
            adapter = adapter.with_timeout(Duration::from_millis(timeout_ms));
        }
        emit(out, MdClassifier { inner: Box::new(adapter) })
    })
}

/// Classifies a row-major 8-bit grayscale image.
///
/// # Safety
/// `pixels` must point to `pixels_len` bytes, `confidences` to 4 doubles
/// and `label` to one byte; `label` may be null.
#[no_mangle]
pub unsafe extern "C" fn md_classifier_classify(
    classifier: *const MdClassifier,
    width: u32,
    height: u32,
    pixels: *const u8,
    pixels_len: usize,
    confidences: *mut f64,
    label: *mut u8,
) -> MdStatus {
    guard(|| {
        let c = non_null(classifier, "classifier")?;
        if confidences.is_null() {
            return Err(Failure(MdStatus::NullPointer, "confidences is null".into()));
        }
        let image = image_arg(width, height, pixels, pixels_len)?;
        let scores = c.inner.classify(&image)?;
        ptr::copy_nonoverlapping(scores.as_ptr(), confidences, 4);
        if !label.is_null() {
            *label = Label::argmax(&scores).index() as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `classifier` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn md_classifier_free(classifier: *mut MdClassifier) {
    release(classifier);
}

// ---- confusion matrix ---------------------------------------------------

#[no_mangle]
pub extern "C" fn md_confusion_new() -> *mut MdConfusionMatrix {
    Box::into_raw(Box::new(MdConfusionMatrix { inner: ConfusionMatrix::default() }))
}

/// # Safety
/// `cm` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn md_confusion_add(cm: *mut MdConfusionMatrix, truth: u8, predicted: u8) -> MdStatus {
    guard(|| {
        let cm = non_null_mut(cm, "matrix")?;
        let t = Label::from_index(truth).map_err(Failure::invalid)?;
        let p = Label::from_index(predicted).map_err(Failure::invalid)?;
        cm.inner.add(t, p);
        Ok(())
    })
}

/// # Safety
/// `cm` must be a live handle and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn md_confusion_count(
    cm: *const MdConfusionMatrix,
    truth: u8,
    predicted: u8,
    count: *mut u64,
) -> MdStatus {
    guard(|| {
        let cm = non_null(cm, "matrix")?;
        let out = non_null_mut(count, "count")?;
        let t = Label::from_index(truth).map_err(Failure::invalid)?;
        let p = Label::from_index(predicted).map_err(Failure::invalid)?;
        *out = cm.inner.counts[t.index()][p.index()];
        Ok(())
    })
}

/// Accuracy and macro precision/recall. Fails with
/// `MD_STATUS_INVALID_ARGUMENT` on an empty matrix.
///
/// # Safety
/// `cm` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_confusion_metrics(cm: *const MdConfusionMatrix, out: *mut MdMetrics) -> MdStatus {
    guard(|| {
        let cm = non_null(cm, "matrix")?;
        let out = non_null_mut(out, "out")?;
        let m = evaluation::metrics(&cm.inner)?;
        *out = MdMetrics { accuracy: m.accuracy, macro_precision: m.macro_precision, macro_recall: m.macro_recall };
        Ok(())
    })
}

/// # Safety
/// `cm` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn md_confusion_free(cm: *mut MdConfusionMatrix) {
    release(cm);
}

// ---- latency recorder ---------------------------------------------------

#[no_mangle]
pub extern "C" fn md_recorder_new() -> *mut MdLatencyRecorder {
    Box::into_raw(Box::new(MdLatencyRecorder { inner: LatencyRecorder::new() }))
}

/// # Safety
/// `recorder` must be a live handle and `sample_id` point to 16 bytes.
#[no_mangle]
pub unsafe extern "C" fn md_recorder_publish(
    recorder: *const MdLatencyRecorder,
    sample_id: *const u8,
    t_us: u64,
) -> MdStatus {
    guard(|| {
        non_null(recorder, "recorder")?.inner.record_publish(sample_id_arg(sample_id)?, t_us);
        Ok(())
    })
}

/// Matches a result to its publish. `MD_STATUS_NOT_FOUND` marks an orphan.
///
/// # Safety
/// `recorder` must be a live handle, `sample_id` point to 16 bytes and
/// `rtt_us` be null or writable.
#[no_mangle]
pub unsafe extern "C" fn md_recorder_result(
    recorder: *const MdLatencyRecorder,
    sample_id: *const u8,
    t_us: u64,
    rtt_us: *mut u64,
) -> MdStatus {
    guard(|| {
        let r = non_null(recorder, "recorder")?;
        let id = sample_id_arg(sample_id)?;
        let record = r
            .inner
            .record_result(id, t_us)
            .ok_or_else(|| Failure(MdStatus::NotFound, format!("no publish recorded for {id}")))?;
        if !rtt_us.is_null() {
            *rtt_us = record.rtt_us();
        }
        Ok(())
    })
}

/// # Safety
/// `recorder` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_recorder_stats(recorder: *const MdLatencyRecorder, out: *mut MdLatencyStats) -> MdStatus {
    guard(|| {
        let r = non_null(recorder, "recorder")?;
        let out = non_null_mut(out, "out")?;
        let s = telemetry::latency_stats(&r.inner.records()).map_err(|e| Failure(MdStatus::NotFound, e.to_string()))?;
        *out = MdLatencyStats {
            count: s.count as u64,
            mean_us: s.mean_us,
            p50_us: s.p50_us,
            p95_us: s.p95_us,
            max_us: s.max_us,
        };
        Ok(())
    })
}

/// # Safety
/// `recorder` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn md_recorder_free(recorder: *mut MdLatencyRecorder) {
    release(recorder);
}

// ---- doctor node --------------------------------------------------------

fn reliability(reliable: bool) -> Reliability {
    if reliable {
        Reliability::Reliable
    } else {
        Reliability::BestEffort
    }
}

/// A doctor node on UDP. `group` ("a.b.c.d:port") and `interface`
/// ("a.b.c.d") may be null for the defaults.
///
/// # Safety
/// Strings must be null or NUL-terminated; `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn md_doctor_new_udp(
    group: *const c_char,
    interface: *const c_char,
    reliable: bool,
    out: *mut *mut MdDoctorNode,
) -> MdStatus {
    guard(|| {
        let mut config = NodeConfig { reliability: reliability(reliable), ..NodeConfig::default() };
        if !group.is_null() {
            config.discovery_group = string_arg(group, "group")?.parse::<Locator>().map_err(Failure::invalid)?;
        }
        if !interface.is_null() {
            config.interface = string_arg(interface, "interface")?.parse::<Ipv4Addr>().map_err(Failure::invalid)?;
        }
        config.validate()?;
        let node = DoctorNode::start(config.udp_transport()?, &config)?;
        emit(out, MdDoctorNode { inner: Doctor::Udp(node) })
    })
}

/// A doctor node wired to a built-in inference node over an in-process
/// simulated network with the given per-datagram loss.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn md_doctor_new_simulated(
    loss_probability: f64,
    seed: u64,
    reliable: bool,
    out: *mut *mut MdDoctorNode,
) -> MdStatus {
    guard(|| {
        let profile = FaultProfile::lossy(loss_probability, seed);
        profile.validate().map_err(Failure::invalid)?;
        let config =
            NodeConfig { reliability: reliability(reliable), simulated: Some(profile), ..NodeConfig::default() };
        let pipeline = SimPipeline::start(&config, profile)?;
        emit(out, MdDoctorNode { inner: Doctor::Simulated(pipeline) })
    })
}

/// Publishes one image and waits up to `timeout_ms` for its result.
///
/// # Safety
/// `doctor` must be a live handle, `pixels` point to `pixels_len` bytes and
/// `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn md_doctor_send(
    doctor: *const MdDoctorNode,
    width: u32,
    height: u32,
    pixels: *const u8,
    pixels_len: usize,
    timeout_ms: u64,
    out: *mut MdClassification,
) -> MdStatus {
    guard(|| {
        let d = non_null(doctor, "doctor")?;
        let out = non_null_mut(out, "out")?;
        let image = image_arg(width, height, pixels, pixels_len)?;
        let node = match &d.inner {
            Doctor::Udp(n) => n,
            Doctor::Simulated(p) => &p.doctor,
        };
        let (result, record) = node.send(image, Duration::from_millis(timeout_ms))?;
        *out = MdClassification {
            sample_id: result.sample_id.0,
            label: result.label.index() as u8,
            confidences: result.confidences,
            inference_duration_us: result.inference_duration_us,
            rtt_us: record.rtt_us(),
        };
        Ok(())
    })
}

/// # Safety
/// `doctor` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn md_doctor_free(doctor: *mut MdDoctorNode) {
    release(doctor);
}
