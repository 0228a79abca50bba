//! Exact counters for the inference engines: τ-call histograms, analytic
//! FLOPs, activation-position traffic, scratch watermarks and timers, plus
//! the per-token benchmark records and their CSV / JSON-lines encoding.
//!
//! FLOPs are charged from size formulas, not measured:
//!
//! * direct tile of `L1` inputs and `L2` outputs: `2 * L1 * L2` per channel-lane
//! * one DFT of order `n`: `5 * n * log2(n)` per channel-lane
//! * pointwise spectrum product of order `n`: `6 * n` per channel-lane
//! * one multiply-add in a red cell or lazy/eager strip: 2 per channel-lane

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// FLOPs of one order-`n` DFT on a single channel-lane.
pub fn dft_flops(n: usize) -> u64 {
    if n <= 1 {
        return 0;
    }
    5 * n as u64 * n.trailing_zeros() as u64
}

/// Run-wide counters. All counters only ever increase during a run.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    enabled: bool,
    lanes_channels: u64,
    layer_tau_calls: Vec<BTreeMap<usize, u64>>,
    pub flops: u64,
    pub positions_accessed: u64,
    pub peak_scratch: usize,
    pub dft_calls: u64,
    pub red_updates: u64,
    pub madds: u64,
    counters: BTreeMap<String, u64>,
    timers: BTreeMap<String, Duration>,
}

impl Ledger {
    /// Ledger for `layers` layers, each τ invocation covering
    /// `channels * lanes` independent channel-lanes.
    pub fn new(layers: usize, channels: usize, lanes: usize) -> Self {
        Self {
            enabled: true,
            lanes_channels: (channels * lanes) as u64,
            layer_tau_calls: vec![BTreeMap::new(); layers],
            ..Self::default()
        }
    }

    /// A ledger that records nothing.
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn layers(&self) -> usize {
        self.layer_tau_calls.len()
    }

    pub fn record_tau(&mut self, layer: usize, side: usize) {
        if self.enabled {
            *self.layer_tau_calls[layer].entry(side).or_insert(0) += 1;
        }
    }

    pub fn add_flops(&mut self, flops: u64) {
        if self.enabled {
            self.flops += flops;
        }
    }

    pub fn add_dfts(&mut self, n: u64) {
        if self.enabled {
            self.dft_calls += n;
        }
    }

    pub fn add_positions(&mut self, n: u64) {
        if self.enabled {
            self.positions_accessed += n;
        }
    }

    pub fn add_madds(&mut self, n: u64) {
        if self.enabled {
            self.madds += n;
        }
    }

    pub fn add_red(&mut self) {
        if self.enabled {
            self.red_updates += 1;
        }
    }

    pub fn observe_scratch(&mut self, elements: usize) {
        if self.enabled {
            self.peak_scratch = self.peak_scratch.max(elements);
        }
    }

    pub fn bump(&mut self, name: &str, n: u64) {
        if self.enabled {
            *self.counters.entry(name.to_string()).or_insert(0) += n;
        }
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    pub fn add_time(&mut self, name: &str, d: Duration) {
        if self.enabled {
            *self.timers.entry(name.to_string()).or_default() += d;
        }
    }

    pub fn timer(&self, name: &str) -> Duration {
        self.timers.get(name).copied().unwrap_or_default()
    }

    /// τ invocations of each side at one layer.
    pub fn layer_histogram(&self, layer: usize) -> &BTreeMap<usize, u64> {
        &self.layer_tau_calls[layer]
    }

    /// τ invocations of each side summed over layers (each invocation
    /// covers every channel and lane of a tile).
    pub fn tau_histogram(&self) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for layer in &self.layer_tau_calls {
            for (&side, &n) in layer {
                *out.entry(side).or_insert(0) += n;
            }
        }
        out
    }

    /// τ calls counted per channel-lane.
    pub fn tau_channel_histogram(&self) -> BTreeMap<usize, u64> {
        self.tau_histogram()
            .into_iter()
            .map(|(side, n)| (side, n * self.lanes_channels))
            .collect()
    }

    pub fn total_tau_calls(&self) -> u64 {
        self.tau_histogram().values().sum()
    }

    /// Fold counters from a per-task ledger of the same shape.
    pub fn merge(&mut self, other: &Ledger) {
        if !self.enabled {
            return;
        }
        for (mine, theirs) in self.layer_tau_calls.iter_mut().zip(&other.layer_tau_calls) {
            for (&side, &n) in theirs {
                *mine.entry(side).or_insert(0) += n;
            }
        }
        self.flops += other.flops;
        self.positions_accessed += other.positions_accessed;
        self.peak_scratch = self.peak_scratch.max(other.peak_scratch);
        self.dft_calls += other.dft_calls;
        self.red_updates += other.red_updates;
        self.madds += other.madds;
        for (k, v) in &other.counters {
            *self.counters.entry(k.clone()).or_insert(0) += v;
        }
        for (k, v) in &other.timers {
            *self.timers.entry(k.clone()).or_default() += *v;
        }
    }
}

/// Which closed-form counts a run is audited against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditMode {
    Relaxed,
    Lazy,
    Eager,
}

/// Shape of a completed run, for audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunShape {
    pub horizon: usize,
    pub layers: usize,
    pub channels: usize,
    pub lanes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRow {
    pub item: String,
    pub expected: u64,
    pub actual: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.expected == r.actual)
    }

    pub fn mismatches(&self) -> impl Iterator<Item = &AuditRow> {
        self.rows.iter().filter(|r| r.expected != r.actual)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>14} {:>14}", "item", "expected", "actual")?;
        for r in &self.rows {
            let flag = if r.expected == r.actual {
                ""
            } else {
                "  <-- mismatch"
            };
            writeln!(
                f,
                "{:<28} {:>14} {:>14}{flag}",
                r.item, r.expected, r.actual
            )?;
        }
        Ok(())
    }
}

/// Expected per-layer τ histogram of the square schedule: `2^(P-1-q)` calls
/// of side `2^q` for every `q < P`.
pub fn expected_layer_histogram(horizon: usize) -> BTreeMap<usize, u64> {
    let p = horizon.trailing_zeros();
    (0..p).map(|q| (1usize << q, 1u64 << (p - 1 - q))).collect()
}

/// Check a completed from-scratch run against its closed-form counts.
pub fn audit_counts(ledger: &Ledger, shape: RunShape, mode: AuditMode) -> Result<AuditReport> {
    if !shape.horizon.is_power_of_two() || shape.horizon < 2 {
        return Err(invalid(format!(
            "audit requires a power-of-two horizon >= 2, got {}",
            shape.horizon
        )));
    }
    if ledger.layers() != shape.layers {
        return Err(invalid(format!(
            "ledger tracks {} layers, shape says {}",
            ledger.layers(),
            shape.layers
        )));
    }
    let l = shape.horizon as u64;
    let m = shape.layers as u64;
    let mut rows = Vec::new();
    match mode {
        AuditMode::Relaxed => {
            let per_layer = expected_layer_histogram(shape.horizon);
            for layer in 0..shape.layers {
                let got = ledger.layer_histogram(layer);
                let sides: std::collections::BTreeSet<usize> =
                    per_layer.keys().chain(got.keys()).copied().collect();
                for side in sides {
                    rows.push(AuditRow {
                        item: format!("layer {layer} side {side}"),
                        expected: per_layer.get(&side).copied().unwrap_or(0),
                        actual: got.get(&side).copied().unwrap_or(0),
                    });
                }
            }
            for (side, n) in &per_layer {
                rows.push(AuditRow {
                    item: format!("all layers side {side}"),
                    expected: n * m,
                    actual: ledger.tau_histogram().get(side).copied().unwrap_or(0),
                });
            }
            rows.push(AuditRow {
                item: "tau calls total".into(),
                expected: m * (l - 1),
                actual: ledger.total_tau_calls(),
            });
            rows.push(AuditRow {
                item: "red updates".into(),
                expected: m * l,
                actual: ledger.red_updates,
            });
        }
        AuditMode::Lazy | AuditMode::Eager => {
            rows.push(AuditRow {
                item: "tau calls total".into(),
                expected: 0,
                actual: ledger.total_tau_calls(),
            });
            let lanes_channels = (shape.channels * shape.lanes) as u64;
            rows.push(AuditRow {
                item: "multiply-adds".into(),
                expected: m * lanes_channels * l * (l + 1) / 2,
                actual: ledger.madds,
            });
            rows.push(AuditRow {
                item: "red updates".into(),
                expected: m * l,
                actual: ledger.red_updates,
            });
        }
    }
    Ok(AuditReport { rows })
}

/// One generated token's instrumentation row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub run_id: String,
    pub mode: String,
    #[serde(rename = "impl")]
    pub impl_name: String,
    #[serde(rename = "B")]
    pub lanes: usize,
    #[serde(rename = "M")]
    pub layers: usize,
    #[serde(rename = "D")]
    pub channels: usize,
    #[serde(rename = "L")]
    pub horizon: usize,
    pub token_index: usize,
    pub tile_side: usize,
    /// Nanoseconds.
    pub mixer_duration: u64,
    /// Nanoseconds.
    pub block_duration: u64,
    /// Nanoseconds.
    pub total_duration: u64,
    pub flops_cumulative: u64,
}

pub const RECORD_HEADER: [&str; 13] = [
    "run_id",
    "mode",
    "impl",
    "B",
    "M",
    "D",
    "L",
    "token_index",
    "tile_side",
    "mixer_duration",
    "block_duration",
    "total_duration",
    "flops_cumulative",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    JsonLines,
}

impl RecordFormat {
    /// `.jsonl` / `.json` select JSON lines, anything else CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::JsonLines,
            _ => Self::Csv,
        }
    }
}

pub fn emit_records<W: Write>(
    records: &[BenchRecord],
    sink: W,
    format: RecordFormat,
) -> Result<()> {
    match format {
        RecordFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(sink);
            w.write_record(RECORD_HEADER)?;
            for r in records {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        RecordFormat::JsonLines => {
            let mut sink = sink;
            for r in records {
                serde_json::to_writer(&mut sink, r)?;
                sink.write_all(b"\n")?;
            }
            sink.flush()?;
        }
    }
    Ok(())
}

pub fn parse_records<R: BufRead>(source: R, format: RecordFormat) -> Result<Vec<BenchRecord>> {
    match format {
        RecordFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(source);
            let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
            if header != RECORD_HEADER {
                return Err(invalid(format!("unexpected record header {header:?}")));
            }
            rdr.deserialize().map(|r| r.map_err(Into::into)).collect()
        }
        RecordFormat::JsonLines => source
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .map(|line| Ok(serde_json::from_str(&line?)?))
            .collect(),
    }
}

/// Median of a set of durations (lower median for even counts).
pub fn median(samples: &mut [Duration]) -> Duration {
    if samples.is_empty() {
        return Duration::ZERO;
    }
    samples.sort_unstable();
    samples[(samples.len() - 1) / 2]
}
