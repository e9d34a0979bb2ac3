//! Classifiers for the inference node and the node's service loop.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::pubsub::{Participant, PubSubError, Qos, Reliability, TopicSpec};
use crate::samples::{self, ClassificationResult, Label, SampleError, XrayImageSample};

pub const IMAGES_TOPIC: &str = "xray/images";
pub const IMAGES_TYPE: &str = "XrayImageSample";
pub const RESULTS_TOPIC: &str = "xray/results";
pub const RESULTS_TYPE: &str = "ClassificationResult";
pub const DEFAULT_ADAPTER_TIMEOUT: Duration = Duration::from_secs(30);

pub fn images_topic() -> TopicSpec {
    TopicSpec::new(IMAGES_TOPIC, IMAGES_TYPE)
}

pub fn results_topic() -> TopicSpec {
    TopicSpec::new(RESULTS_TOPIC, RESULTS_TYPE)
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("image {width}x{height} is too small, need at least 2x2")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("adapter did not answer within {0:?}")]
    AdapterTimeout(Duration),
    #[error("adapter protocol error: {0}")]
    AdapterProtocolError(String),
    #[error("adapter exited with {status}: {stderr}")]
    AdapterExitFailure { status: String, stderr: String },
    #[error("adapter I/O failure: {0}")]
    AdapterIo(#[from] io::Error),
}

pub trait Classifier: Send {
    fn name(&self) -> &str;

    /// Four class confidences summing to 1.
    fn classify(&self, image: &XrayImageSample) -> Result<[f64; 4], InferenceError>;
}

/// Softmax with the maximum logit subtracted first.
pub fn softmax(logits: &[f64; 4]) -> [f64; 4] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|z| (z - max).exp());
    let sum: f64 = exp.iter().sum();
    exp.map(|e| e / sum)
}

/// Mean intensity in [0, 1] of the four quadrants: top-left, top-right,
/// bottom-left, bottom-right. An odd middle row or column goes to the
/// bottom or right quadrants.
pub fn quadrant_features(image: &XrayImageSample) -> Result<[f64; 4], InferenceError> {
    let (w, h) = (image.width as usize, image.height as usize);
    if w < 2 || h < 2 {
        return Err(InferenceError::ImageTooSmall { width: image.width, height: image.height });
    }
    let (mx, my) = (w / 2, h / 2);
    let mut sums = [0u64; 4];
    for (y, row) in image.pixels.chunks_exact(w).enumerate() {
        let base = if y < my { 0 } else { 2 };
        sums[base] += row[..mx].iter().map(|&p| u64::from(p)).sum::<u64>();
        sums[base + 1] += row[mx..].iter().map(|&p| u64::from(p)).sum::<u64>();
    }
    let areas = [mx * my, (w - mx) * my, mx * (h - my), (w - mx) * (h - my)];
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = sums[k] as f64 / (areas[k] as f64 * 255.0);
    }
    Ok(out)
}

/// Fixed linear model over quadrant features.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantLinearModel {
    weights: [[f64; 4]; 4],
    bias: [f64; 4],
}

impl Default for QuadrantLinearModel {
    fn default() -> Self {
        let mut weights = [[0.0; 4]; 4];
        for (k, row) in weights.iter_mut().enumerate() {
            row[k] = 4.0;
        }
        QuadrantLinearModel { weights, bias: [0.0; 4] }
    }
}

impl QuadrantLinearModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn logits(&self, features: &[f64; 4]) -> [f64; 4] {
        let mut z = self.bias;
        for (k, row) in self.weights.iter().enumerate() {
            z[k] += row.iter().zip(features).map(|(w, m)| w * m).sum::<f64>();
        }
        z
    }
}

impl Classifier for QuadrantLinearModel {
    fn name(&self) -> &str {
        "quadrant-linear"
    }

    fn classify(&self, image: &XrayImageSample) -> Result<[f64; 4], InferenceError> {
        Ok(softmax(&self.logits(&quadrant_features(image)?)))
    }
}

/// Delegates classification to an external program.
///
/// The program is run as `<command...> <pgm_path>` and must print exactly
/// one line `<label_index> <c0> <c1> <c2> <c3>` and exit with status 0.
#[derive(Debug, Clone)]
pub struct ExternalAdapter {
    program: String,
    args: Vec<String>,
    timeout: Duration,
    display: String,
}

impl ExternalAdapter {
    /// `command` is split on whitespace into program and leading arguments.
    pub fn new(command: &str) -> Result<Self, InferenceError> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program =
            parts.next().ok_or_else(|| InferenceError::AdapterProtocolError("empty adapter command".into()))?;
        Ok(ExternalAdapter {
            program,
            args: parts.collect(),
            timeout: DEFAULT_ADAPTER_TIMEOUT,
            display: command.trim().to_string(),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Resolves the program the way the OS would, without running it.
    pub fn resolve_program(&self) -> Option<PathBuf> {
        let candidate = Path::new(&self.program);
        if self.program.contains('/') {
            return candidate.is_file().then(|| candidate.to_path_buf());
        }
        std::env::var_os("PATH")
            .iter()
            .flat_map(std::env::split_paths)
            .map(|dir| dir.join(&self.program))
            .find(|p| p.is_file())
    }

    fn run(&self, image_path: &Path) -> Result<String, InferenceError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(image_path)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());
        let deadline = Instant::now() + self.timeout;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(InferenceError::AdapterTimeout(self.timeout));
            }
            thread::sleep(Duration::from_millis(5));
        };
        let out = stdout.join().unwrap_or_default();
        if !status.success() {
            let err = stderr.join().unwrap_or_default();
            return Err(InferenceError::AdapterExitFailure {
                status: status.to_string(),
                stderr: String::from_utf8_lossy(&err).trim().to_string(),
            });
        }
        String::from_utf8(out).map_err(|_| InferenceError::AdapterProtocolError("output is not UTF-8".into()))
    }
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        buf
    })
}

/// Parses one adapter response line.
pub fn parse_adapter_output(output: &str) -> Result<[f64; 4], InferenceError> {
    let protocol = |m: String| InferenceError::AdapterProtocolError(m);
    let lines: Vec<&str> = output.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != 1 {
        return Err(protocol(format!("expected one line, got {}", lines.len())));
    }
    let fields: Vec<&str> = lines[0].split_whitespace().collect();
    if fields.len() != 5 {
        return Err(protocol(format!("expected 5 fields, got {}", fields.len())));
    }
    let label: u8 = fields[0].parse().map_err(|_| protocol(format!("bad label {:?}", fields[0])))?;
    let label = Label::from_index(label).map_err(|e| protocol(e.to_string()))?;
    let mut conf = [0.0; 4];
    for (c, f) in conf.iter_mut().zip(&fields[1..]) {
        *c = f.parse().map_err(|_| protocol(format!("bad confidence {f:?}")))?;
    }
    samples::validate_confidences(&conf).map_err(|e| protocol(e.to_string()))?;
    if Label::argmax(&conf) != label {
        return Err(protocol(format!("label {} is not the argmax", label.index())));
    }
    Ok(conf)
}

impl Classifier for ExternalAdapter {
    fn name(&self) -> &str {
        &self.display
    }

    fn classify(&self, image: &XrayImageSample) -> Result<[f64; 4], InferenceError> {
        let mut file = tempfile::Builder::new().prefix("meddds-").suffix(".pgm").tempfile()?;
        file.write_all(&samples::pgm_bytes(image))?;
        file.flush()?;
        parse_adapter_output(&self.run(file.path())?)
    }
}

#[derive(Debug, Default)]
struct NodeCounters {
    processed: AtomicU64,
    skipped: AtomicU64,
}

/// A running inference node: images in, results out.
pub struct InferenceNode {
    stop: Arc<AtomicBool>,
    counters: Arc<NodeCounters>,
    worker: Option<thread::JoinHandle<()>>,
}

/// Starts the inference service on `participant`. Images are classified
/// serially in delivery order; a sample that fails to decode or classify
/// is logged and skipped.
pub fn run_inference_node(
    participant: &Participant,
    classifier: Box<dyn Classifier>,
    reliability: Reliability,
) -> Result<InferenceNode, PubSubError> {
    let qos = Qos { reliability, ..Qos::default() };
    let reader = participant.create_reader(images_topic(), qos)?;
    let writer = participant.create_writer(results_topic(), qos)?;
    let stop = Arc::new(AtomicBool::new(false));
    let counters = Arc::new(NodeCounters::default());
    let worker = {
        let stop = Arc::clone(&stop);
        let counters = Arc::clone(&counters);
        thread::Builder::new()
            .name("meddds-infer".into())
            .spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let sample = match reader.recv_timeout(Duration::from_millis(100)) {
                        Ok(s) => s,
                        Err(PubSubError::Timeout) => continue,
                        Err(_) => return,
                    };
                    match process(classifier.as_ref(), &sample.payload) {
                        Ok(result) => {
                            log::info!(
                                "sample={} label={} inference_us={}",
                                result.sample_id,
                                result.label,
                                result.inference_duration_us
                            );
                            if let Err(e) = writer.write(result.encode()) {
                                log::error!("publishing result failed: {e}");
                                if e == PubSubError::Closed {
                                    return;
                                }
                            }
                            counters.processed.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(e) => {
                            log::warn!("skipping sample from {}: {e}", sample.writer);
                            counters.skipped.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
            })
            .map_err(|e| PubSubError::Transport(crate::transport::TransportError::NetworkUnavailable(e.to_string())))?
    };
    Ok(InferenceNode { stop, counters, worker: Some(worker) })
}

#[derive(Debug, Error)]
enum ProcessError {
    #[error(transparent)]
    Decode(#[from] SampleError),
    #[error(transparent)]
    Classify(#[from] InferenceError),
}

fn process(classifier: &dyn Classifier, payload: &[u8]) -> Result<ClassificationResult, ProcessError> {
    let image = XrayImageSample::decode(payload)?;
    let started = Instant::now();
    let confidences = classifier.classify(&image)?;
    let elapsed = started.elapsed().as_micros() as u64;
    Ok(ClassificationResult::new(image.sample_id, confidences, elapsed, samples::unix_time_us())?)
}

impl InferenceNode {
    pub fn processed(&self) -> u64 {
        self.counters.processed.load(Ordering::Relaxed)
    }

    pub fn skipped(&self) -> u64 {
        self.counters.skipped.load(Ordering::Relaxed)
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for InferenceNode {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> XrayImageSample {
        let pixels = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        XrayImageSample::new(w, h, pixels).unwrap()
    }

    // Reference softmax without max subtraction, fine for small logits.
    fn naive_softmax(z: &[f64; 4]) -> [f64; 4] {
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        z.map(|v| v.exp() / s)
    }

    #[test]
    fn quadrant_examples() {
        assert_eq!(quadrant_features(&image(4, 4, |_, _| 0)).unwrap(), [0.0; 4]);
        assert_eq!(quadrant_features(&image(4, 4, |_, _| 255)).unwrap(), [1.0; 4]);
        let bl = image(4, 4, |x, y| if x < 2 && y >= 2 { 255 } else { 0 });
        assert_eq!(quadrant_features(&bl).unwrap(), [0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            quadrant_features(&image(1, 5, |_, _| 0)),
            Err(InferenceError::ImageTooSmall { width: 1, height: 5 })
        ));
    }

    #[test]
    fn odd_sizes_assign_middle_to_bottom_right() {
        // 3x3: left column x<1, top row y<1.
        let img = image(3, 3, |x, y| if x >= 1 && y >= 1 { 255 } else { 0 });
        assert_eq!(quadrant_features(&img).unwrap(), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn classify_examples() {
        let model = QuadrantLinearModel::new();
        let zeros = model.classify(&image(4, 4, |_, _| 0)).unwrap();
        assert_eq!(zeros, [0.25; 4]);
        assert_eq!(Label::argmax(&zeros), Label::Covid19);

        let bl = image(4, 4, |x, y| if x < 2 && y >= 2 { 255 } else { 0 });
        let c = model.classify(&bl).unwrap();
        let e4 = 4f64.exp();
        let oracle = [1.0 / (e4 + 3.0), 1.0 / (e4 + 3.0), e4 / (e4 + 3.0), 1.0 / (e4 + 3.0)];
        for k in 0..4 {
            assert!((c[k] - oracle[k]).abs() < 1e-12);
        }
        assert_eq!(format!("{:.4} {:.4}", c[2], c[0]), "0.9479 0.0174");
        assert_eq!(Label::argmax(&c), Label::LungOpacity);
    }

    #[test]
    fn softmax_properties() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let s = softmax(&z);
        let n = naive_softmax(&z);
        for k in 0..4 {
            assert!((s[k] - n[k]).abs() < 1e-12);
        }
        let shifted = softmax(&z.map(|v| v + 123.0));
        for k in 0..4 {
            assert!((s[k] - shifted[k]).abs() < 1e-12);
        }
        let big = softmax(&[1000.0, 0.0, 0.0, 0.0]);
        assert!(big.iter().all(|v| v.is_finite()) && (big.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn separable_corpus_is_perfect() {
        let model = QuadrantLinearModel::new();
        for k in 0..4u32 {
            let img = image(8, 6, |x, y| {
                let q = u32::from(x >= 4) + 2 * u32::from(y >= 3);
                if q == k {
                    200
                } else {
                    10
                }
            });
            assert_eq!(Label::argmax(&model.classify(&img).unwrap()).index() as u32, k);
        }
    }

    #[test]
    fn adapter_output_parsing() {
        assert_eq!(parse_adapter_output("1 0.1 0.7 0.1 0.1\n").unwrap(), [0.1, 0.7, 0.1, 0.1]);
        for bad in [
            "1 0.5 0.5 0.5 0.5",
            "0 0.1 0.7 0.1 0.1",
            "1 0.1 0.7 0.1",
            "",
            "a b c d e",
            "1 0.1 0.7 0.1 0.1\n2 0 0 1 0",
            "7 0.25 0.25 0.25 0.25",
        ] {
            assert!(matches!(parse_adapter_output(bad), Err(InferenceError::AdapterProtocolError(_))), "{bad:?}");
        }
    }

    #[cfg(unix)]
    #[test]
    fn adapter_processes() {
        let img = image(4, 4, |_, _| 0);
        let echo = ExternalAdapter::new("echo 1 0.1 0.7 0.1 0.1").unwrap();
        // echo also prints the path, so the line has six fields.
        assert!(matches!(echo.classify(&img), Err(InferenceError::AdapterProtocolError(_))));

        assert!(ExternalAdapter::new("sh -c true").unwrap().resolve_program().is_some());
        let fail = ExternalAdapter::new("false").unwrap();
        assert!(matches!(fail.classify(&img), Err(InferenceError::AdapterExitFailure { .. })));
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("slow.sh");
        std::fs::write(&script, "sleep 5\n").unwrap();
        let slow =
            ExternalAdapter::new(&format!("sh {}", script.display())).unwrap().with_timeout(Duration::from_millis(100));
        let t = Instant::now();
        assert!(matches!(slow.classify(&img), Err(InferenceError::AdapterTimeout(_))));
        assert!(t.elapsed() < Duration::from_secs(3));
        assert!(ExternalAdapter::new("/no/such/program").unwrap().resolve_program().is_none());
        assert!(ExternalAdapter::new("   ").is_err());
    }
}
