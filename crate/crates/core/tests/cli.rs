use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use meddds::samples::{self, XrayImageSample};

fn meddds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meddds")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn bottom_left_pgm(dir: &Path) -> String {
    let pixels = (0..16u32).flat_map(|y| (0..16u32).map(move |x| if x < 8 && y >= 8 { 255 } else { 0 })).collect();
    let path = dir.join("bl.pgm");
    samples::save_pgm(&XrayImageSample::new(16, 16, pixels).unwrap(), &path).unwrap();
    path.to_str().unwrap().to_string()
}

/// A discovery group nobody else in this test run uses.
fn private_group(offset: u16) -> String {
    let port = 20_000 + (std::process::id() % 20_000) as u16 + offset;
    format!("239.255.0.7:{port}")
}

struct Background(Child);

impl Drop for Background {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn send_in_simulation_prints_classification() {
    let dir = tempfile::tempdir().unwrap();
    let img = bottom_left_pgm(dir.path());
    let csv = dir.path().join("one.csv");
    let o = meddds(&["send", &img, "--sim-loss", "0", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("label=LUNG_OPACITY confidence=0.9479 rtt_ms="), "{line}");
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 2);
}

#[test]
fn send_rejects_missing_and_malformed_images() {
    let dir = tempfile::tempdir().unwrap();
    let o = meddds(&["send", "/nonexistent.pgm", "--sim-loss", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let bad = dir.path().join("bad.pgm");
    std::fs::write(&bad, b"P2\n1 1\n255\n0\n").unwrap();
    let o = meddds(&["send", bad.to_str().unwrap(), "--sim-loss", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("P2"), "{}", stderr(&o));
}

#[test]
fn bench_in_simulation_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = meddds(&[
        "bench",
        "--sim-loss",
        "0",
        "--count",
        "5",
        "--rate",
        "0",
        "--size",
        "64",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("n=5 mean_rtt_ms="), "{text}");
    // 64x64 image: 33 + 4096 bytes in 4 fragments, plus one result.
    assert!(text.contains("completed=5 timeouts=0 orphans=0 data_packets=25"), "{text}");
    let latency = std::fs::read_to_string(out.join("latency.csv")).unwrap();
    assert_eq!(latency.lines().next(), Some("sample_id,t_publish_us,t_result_us,rtt_us"));
    assert_eq!(latency.lines().count(), 6);
    assert!(out.join("throughput.csv").exists());
}

#[test]
fn bench_best_effort_under_loss_reports_partial_completion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = meddds(&[
        "bench",
        "--sim-loss",
        "0.5",
        "--sim-seed",
        "3",
        "--reliability",
        "best-effort",
        "--count",
        "5",
        "--rate",
        "0",
        "--timeout-ms",
        "4000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("partial completion"));
}

#[test]
fn invalid_arguments_exit_with_usage_error() {
    assert_eq!(meddds(&["bench", "--sim-loss", "1.5"]).status.code(), Some(1));
    assert_eq!(meddds(&["bench", "--frag-size", "10", "--sim-loss", "0"]).status.code(), Some(1));
    assert_eq!(meddds(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(meddds(&["--help"]).status.code(), Some(0));
}

#[test]
fn split_is_deterministic_and_stratified() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.csv");
    let mut text = String::from("path,label\n");
    for (label, n) in [("COVID19", 23), ("NORMAL", 41), ("LUNG_OPACITY", 10), ("VIRAL_PNEUMONIA", 1)] {
        for i in 0..n {
            text.push_str(&format!("{label}/{i}.png,{label}\n"));
        }
    }
    std::fs::write(&manifest, text).unwrap();
    let run = |out: &Path| {
        let o =
            meddds(&["split", "--manifest", manifest.to_str().unwrap(), "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let printed = run(&a);
    assert_eq!(printed, run(&b));
    assert!(printed.contains("COVID19 train=19 val=2 test=2"), "{printed}");
    assert!(printed.contains("VIRAL_PNEUMONIA train=1 val=0 test=0"), "{printed}");
    for part in ["train.csv", "val.csv", "test.csv"] {
        assert_eq!(std::fs::read(a.join(part)).unwrap(), std::fs::read(b.join(part)).unwrap());
    }
    let rows: usize = ["train.csv", "val.csv", "test.csv"]
        .iter()
        .map(|p| std::fs::read_to_string(a.join(p)).unwrap().lines().count() - 1)
        .sum();
    assert_eq!(rows, 75);
}

#[test]
fn eval_reports_metrics_and_id_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.csv");
    let pred = dir.path().join("pred.csv");
    let cm = dir.path().join("cm.csv");
    std::fs::write(&truth, "sample_id,label\na,COVID19\nb,NORMAL\nc,3\n").unwrap();
    std::fs::write(&pred, "sample_id,label\nc,VIRAL_PNEUMONIA\na,0\nb,NORMAL\n").unwrap();
    let o = meddds(&[
        "eval",
        "--truth",
        truth.to_str().unwrap(),
        "--pred",
        pred.to_str().unwrap(),
        "--out",
        cm.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "accuracy=1.0000 macro_precision=1.0000 macro_recall=1.0000");
    assert_eq!(std::fs::read_to_string(&cm).unwrap().lines().count(), 5);

    std::fs::write(&pred, "sample_id,label\na,COVID19\nb,NORMAL\n").unwrap();
    let o = meddds(&["eval", "--truth", truth.to_str().unwrap(), "--pred", pred.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains('c'), "{}", stderr(&o));
}

#[test]
fn infer_with_missing_adapter_fails() {
    let o = meddds(&["infer", "--adapter", "/nonexistent/model.sh", "--interface", "127.0.0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("adapter"), "{}", stderr(&o));
}

#[test]
fn send_without_inference_node_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let img = bottom_left_pgm(dir.path());
    let group = private_group(0);
    let o = meddds(&["send", &img, "--group", &group, "--interface", "127.0.0.1", "--timeout-ms", "800"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("timed out"));
}

#[test]
fn infer_and_send_over_udp_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let img = bottom_left_pgm(dir.path());
    let group = private_group(1);
    let _infer = Background(
        Command::new(env!("CARGO_BIN_EXE_meddds"))
            .args(["infer", "--builtin", "--group", &group, "--interface", "127.0.0.1"])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    thread::sleep(Duration::from_millis(300));
    let o = meddds(&["send", &img, "--group", &group, "--interface", "127.0.0.1", "--timeout-ms", "5000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("label=LUNG_OPACITY confidence=0.9479"), "{}", stdout(&o));

    let out = dir.path().join("bench");
    let o = meddds(&[
        "bench",
        "--group",
        &group,
        "--interface",
        "127.0.0.1",
        "--count",
        "3",
        "--rate",
        "20",
        "--size",
        "128",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("completed=3 timeouts=0 orphans=0 data_packets=45"), "{}", stdout(&o));
}
