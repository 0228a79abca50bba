use std::process::Command;

use flash_lcsm::instrumentation::parse_records;
use flash_lcsm::RecordFormat;
use flash_lcsm_bench::{run_sweep, Check, Mode, SweepSpec};

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flash-bench"))
}

#[test]
fn lazy_and_hybrid_emit_one_record_per_token() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("records.csv");
    let status = bench()
        .args([
            "--B",
            "1",
            "--M",
            "2",
            "--D",
            "4",
            "--L",
            "64",
            "--mode",
            "lazy,relaxed-hybrid",
        ])
        .args(["--reps", "1", "--warmup", "0", "--output"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let recs = parse_records(
        std::io::BufReader::new(std::fs::File::open(&out).unwrap()),
        RecordFormat::Csv,
    )
    .unwrap();
    assert_eq!(recs.len(), 2 * 64);
    assert_eq!(recs.iter().filter(|r| r.mode == "lazy").count(), 64);
    let summary = String::from_utf8_lossy(&status.stdout);
    let hybrid = summary
        .lines()
        .find(|l| l.contains("relaxed-hybrid"))
        .unwrap();
    assert!(hybrid.contains("pass"), "{hybrid}");
}

#[test]
fn json_lines_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("records.jsonl");
    let st = bench()
        .args([
            "--M",
            "1",
            "--D",
            "2",
            "--L",
            "16",
            "--mode",
            "relaxed-fft",
            "--reps",
            "1",
            "--warmup",
            "0",
        ])
        .arg("--output")
        .arg(&out)
        .output()
        .unwrap();
    assert!(st.status.success());
    let recs = parse_records(
        std::io::BufReader::new(std::fs::File::open(&out).unwrap()),
        RecordFormat::JsonLines,
    )
    .unwrap();
    assert_eq!(recs.len(), 16);
}

#[test]
fn non_power_of_two_horizon_is_a_usage_error() {
    let o = bench().args(["--L", "48"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("power of two"));
}

#[test]
fn empty_mode_set_is_a_usage_error() {
    let o = bench().args(["--L", "16", "--mode", ""]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let mut spec = SweepSpec::default();
    spec.modes.clear();
    assert!(run_sweep(&spec).is_err());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    std::fs::write(
        &cfg,
        "M = 2\nD = 3\nL = 32, 64\nB = 1\nmodes = lazy, eager, relaxed-direct, generic, data-dependent\nreps = 1\nwarmup = 0\nblock_kinds = mlp, gate\nsampler = echo_noise\n",
    )
    .unwrap();
    let o = bench()
        .arg("--config")
        .arg(&cfg)
        .args(["--L", "32"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert_eq!(
        summary
            .lines()
            .filter(|l| l.starts_with("B1-M2-D3-L32"))
            .count(),
        5
    );
    assert!(!summary.contains("L64"));
}

#[test]
fn calibration_writes_one_line_per_side() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("dispatch.txt");
    let o = bench()
        .args([
            "--calibrate",
            "--L",
            "2048",
            "--M",
            "1",
            "--D",
            "2",
            "--reps",
            "1",
            "--dispatch-table",
        ])
        .arg(&table)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 11);
    // the written table loads back and drives a sweep
    let o = bench()
        .args([
            "--L",
            "64",
            "--M",
            "1",
            "--D",
            "2",
            "--mode",
            "lazy,relaxed-hybrid",
            "--reps",
            "1",
            "--warmup",
            "0",
        ])
        .arg("--dispatch-table")
        .arg(&table)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_is_deterministic_and_audited() {
    let mut spec = SweepSpec::default();
    spec.set("L", "128").unwrap();
    spec.set("M", "2").unwrap();
    spec.set("D", "4").unwrap();
    spec.set("B", "2").unwrap();
    spec.set("modes", "lazy,relaxed-hybrid,relaxed-direct")
        .unwrap();
    spec.set("sampler", "echo_noise").unwrap();
    spec.reps = 1;
    spec.warmup = 0;
    let a = run_sweep(&spec).unwrap();
    let b = run_sweep(&spec).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.max_error.map(f64::to_bits), y.max_error.map(f64::to_bits));
        assert_eq!(x.flops, y.flops);
    }
    for r in a.rows.iter().filter(|r| r.mode.is_relaxed()) {
        assert_eq!(r.audit, Check::Pass);
        assert_eq!(r.oracle, Check::Pass);
        assert!(r.speedup.is_some());
    }
    assert!(a.rows.iter().any(|r| r.mode == Mode::Lazy));
}

#[test]
fn half_memory_layer_parallel_run_checks_second_half() {
    let o = bench()
        .args([
            "--L",
            "128",
            "--M",
            "3",
            "--D",
            "4",
            "--B",
            "2",
            "--mode",
            "lazy,relaxed-hybrid",
        ])
        .args([
            "--half-memory",
            "--layer-parallel",
            "--max-parallel-tile",
            "16",
            "--reps",
            "1",
            "--warmup",
            "0",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8_lossy(&o.stdout);
    let row = summary
        .lines()
        .find(|l| l.contains("relaxed-hybrid"))
        .unwrap();
    assert!(row.contains("pass"), "{row}");
}
