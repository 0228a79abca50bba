//! Running a sweep: every shape in the cross product, every mode, with
//! warm-up and repetitions, then oracle and count checks.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use flash_lcsm::data_dependent::{
    generate_data_dependent, lazy_oracle_data_dependent, rule_family,
};
use flash_lcsm::engine::TokenTiming;
use flash_lcsm::framework::{generic_generate, lcsm_components, GenericLayer, GenericOptions};
use flash_lcsm::instrumentation::{audit_counts, emit_records, median};
use flash_lcsm::tau::{calibrate, CalibrationShape};
use flash_lcsm::{
    relative_error, AuditMode, Baseline, BenchRecord, DispatchTable, ExecMode, Ledger, Model,
    ModelConfig, RecordFormat, RunOptions, RunShape, Sampler, TauImplKind,
};

use crate::config::{ImplChoice, Mode, SweepSpec};
use crate::Result;

const ORACLE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Pass,
    Fail,
    NotApplicable,
}

impl Check {
    fn label(self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Fail => "FAIL",
            Self::NotApplicable => "n/a",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub run_id: String,
    pub mode: Mode,
    pub impl_name: String,
    /// Median cumulative mixer time; `None` for modes without a per-token
    /// breakdown.
    pub mixer: Option<Duration>,
    /// Median end-to-end time.
    pub total: Duration,
    /// Lazy time over this mode's time, on mixer time when both have it and
    /// end-to-end time otherwise.
    pub speedup: Option<f64>,
    pub audit: Check,
    pub oracle: Check,
    pub max_error: Option<f64>,
    pub tau_calls: u64,
    pub flops: u64,
}

#[derive(Debug, Default)]
pub struct SweepReport {
    pub rows: Vec<SummaryRow>,
    pub records: Vec<BenchRecord>,
    pub skipped: Vec<String>,
    pub mismatches: Vec<String>,
    pub audit_failures: Vec<String>,
}

impl SweepReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:<15} {:<18} {:>11} {:>11} {:>8} {:>6} {:>6} {:>10} {:>9}",
            "run",
            "mode",
            "impl",
            "mixer_ms",
            "total_ms",
            "speedup",
            "audit",
            "oracle",
            "max_err",
            "tau_calls"
        );
        for r in &self.rows {
            let ms = |d: Duration| format!("{:.3}", d.as_secs_f64() * 1e3);
            let _ = writeln!(
                s,
                "{:<20} {:<15} {:<18} {:>11} {:>11} {:>8} {:>6} {:>6} {:>10} {:>9}",
                r.run_id,
                r.mode.name(),
                r.impl_name,
                r.mixer.map(ms).unwrap_or_else(|| "-".into()),
                ms(r.total),
                r.speedup
                    .map(|x| format!("{x:.2}"))
                    .unwrap_or_else(|| "-".into()),
                r.audit.label(),
                r.oracle.label(),
                r.max_error
                    .map(|e| format!("{e:.2e}"))
                    .unwrap_or_else(|| "-".into()),
                r.tau_calls,
            );
        }
        for note in &self.skipped {
            let _ = writeln!(s, "skipped: {note}");
        }
        s
    }
}

/// Deterministic first token from the seed.
fn first_token(len: usize, seed: u64) -> Vec<f64> {
    (0..len)
        .map(|k| ((k as f64 + 1.0) * 0.618_033_988_75 + seed as f64 * 0.414_213_562_37).sin())
        .collect()
}

fn records_from(
    tokens: &[TokenTiming],
    run_id: &str,
    mode: Mode,
    impl_name: &str,
    c: &ModelConfig,
) -> Vec<BenchRecord> {
    tokens
        .iter()
        .map(|t| BenchRecord {
            run_id: run_id.to_string(),
            mode: mode.name().to_string(),
            impl_name: impl_name.to_string(),
            lanes: c.lanes,
            layers: c.layers,
            channels: c.channels,
            horizon: c.horizon,
            token_index: t.position,
            tile_side: t.tile_side,
            mixer_duration: t.mixer.as_nanos() as u64,
            block_duration: t.block.as_nanos() as u64,
            total_duration: t.total.as_nanos() as u64,
            flops_cumulative: t.flops_cumulative,
        })
        .collect()
}

/// Output of one repetition of one mode.
struct ModeRun {
    /// Comparable activations: every level flattened, or only positions
    /// `L/2 + 1 ..= L` for half-memory runs.
    values: Vec<f64>,
    half: bool,
    ledger: Ledger,
    tokens: Option<Vec<TokenTiming>>,
    total: Duration,
}

fn all_levels(store: &flash_lcsm::ActivationStore) -> Vec<f64> {
    (0..=store.layers())
        .flat_map(|l| store.level(l).to_vec())
        .collect()
}

struct Shape<'a> {
    spec: &'a SweepSpec,
    model: &'a Model,
    base_table: &'a DispatchTable,
    first: &'a [f64],
}

impl Shape<'_> {
    fn sampler(&self) -> Sampler {
        Sampler::new(self.spec.sampler, self.spec.seed)
    }

    fn table(&self, mode: Mode) -> Option<DispatchTable> {
        let chosen = |c: ImplChoice| match c {
            ImplChoice::Hybrid => self.base_table.clone(),
            ImplChoice::Forced(k) => DispatchTable::uniform(k),
        };
        match mode {
            Mode::RelaxedDirect => Some(DispatchTable::uniform(TauImplKind::Direct)),
            Mode::RelaxedFft => Some(DispatchTable::uniform(TauImplKind::FftCyclicCached)),
            Mode::RelaxedHybrid | Mode::Generic => Some(chosen(self.spec.implementation)),
            _ => None,
        }
    }

    fn impl_name(&self, mode: Mode) -> String {
        match mode {
            Mode::Lazy | Mode::Eager => "none".into(),
            Mode::RelaxedDirect => TauImplKind::Direct.name().into(),
            Mode::RelaxedFft => TauImplKind::FftCyclicCached.name().into(),
            Mode::RelaxedHybrid | Mode::Generic => self.spec.implementation.name().into(),
            Mode::DataDependent => "parallelogram".into(),
        }
    }

    fn options(&self, table: DispatchTable) -> RunOptions {
        RunOptions {
            mode: if self.spec.layer_parallel {
                ExecMode::LayerParallel
            } else {
                ExecMode::Sequential
            },
            table,
            max_parallel_tile: self.spec.max_parallel_tile,
            deterministic: self.spec.deterministic,
            instrument: true,
        }
    }

    fn run(&self, mode: Mode) -> Result<ModeRun> {
        let c = self.model.config();
        let started = Instant::now();
        let table = self.table(mode).unwrap_or_default();
        let out = match mode {
            Mode::Lazy | Mode::Eager => {
                let base = if mode == Mode::Lazy {
                    Baseline::Lazy
                } else {
                    Baseline::Eager
                };
                let g = self.model.generate_baseline(
                    &mut self.sampler(),
                    self.first,
                    base,
                    &self.options(table),
                )?;
                ModeRun {
                    values: all_levels(&g.store),
                    half: false,
                    ledger: g.ledger,
                    tokens: Some(g.tokens),
                    total: started.elapsed(),
                }
            }
            Mode::RelaxedDirect | Mode::RelaxedFft | Mode::RelaxedHybrid
                if self.spec.half_memory =>
            {
                let g = self.model.generate_half_memory(
                    &mut self.sampler(),
                    self.first,
                    &self.options(table),
                )?;
                ModeRun {
                    values: g.store.positions(c.horizon / 2 + 1, c.horizon)?,
                    half: true,
                    ledger: g.ledger,
                    tokens: Some(g.tokens),
                    total: started.elapsed(),
                }
            }
            Mode::RelaxedDirect | Mode::RelaxedFft | Mode::RelaxedHybrid => {
                let g =
                    self.model
                        .generate(&mut self.sampler(), self.first, &self.options(table))?;
                ModeRun {
                    values: all_levels(&g.store),
                    half: false,
                    ledger: g.ledger,
                    tokens: Some(g.tokens),
                    total: started.elapsed(),
                }
            }
            Mode::Generic => {
                let (mixers, ranges) = lcsm_components(self.model, &table)?;
                let layers: Vec<GenericLayer<'_>> = (0..c.layers)
                    .map(|k| GenericLayer {
                        mixer: &mixers[k],
                        range: &ranges[k],
                        block: self.model.blocks().layer(k + 1),
                    })
                    .collect();
                let mut opts = GenericOptions::new(c.horizon);
                opts.layer_parallel = self.spec.layer_parallel;
                opts.seed = self.spec.seed;
                let g = generic_generate(&layers, &mut self.sampler(), self.first, &opts)?;
                ModeRun {
                    values: g.activations.concat(),
                    half: false,
                    ledger: g.ledger,
                    tokens: None,
                    total: started.elapsed(),
                }
            }
            Mode::DataDependent => {
                let rule = rule_family(self.spec.seed);
                let g = generate_data_dependent(
                    c,
                    rule.as_ref(),
                    self.model.blocks(),
                    &mut self.sampler(),
                    self.first,
                )?;
                ModeRun {
                    values: g.activations.concat(),
                    half: false,
                    ledger: g.ledger,
                    tokens: None,
                    total: started.elapsed(),
                }
            }
        };
        Ok(out)
    }
}

/// Run every configuration and mode of `spec`. Oracle mismatches and audit
/// failures are collected in the report, not raised.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepReport> {
    spec.validate()?;
    let base_table = match &spec.dispatch_table {
        Some(p) => DispatchTable::load(p)?,
        None => DispatchTable::default(),
    };
    let mut report = SweepReport::default();
    for &b in &spec.lanes {
        for &m in &spec.layers {
            for &d in &spec.channels {
                for &l in &spec.horizons {
                    run_shape(spec, &base_table, b, m, d, l, &mut report)?;
                }
            }
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_shape(
    spec: &SweepSpec,
    base_table: &DispatchTable,
    b: usize,
    m: usize,
    d: usize,
    l: usize,
    report: &mut SweepReport,
) -> Result<()> {
    let config = ModelConfig::new(m, d, l, b, spec.seed).with_block_kinds(spec.kinds_for(m));
    let model = Model::seeded(config)?;
    let first = first_token(b * d, spec.seed);
    let shape = Shape {
        spec,
        model: &model,
        base_table,
        first: &first,
    };
    let run_id = format!("B{b}-M{m}-D{d}-L{l}");
    let run_shape = RunShape {
        horizon: l,
        layers: m,
        channels: d,
        lanes: b,
    };

    let mut lazy: Option<(Vec<f64>, Duration, Option<Duration>)> = None;
    let mut order = spec.modes.clone();
    order.sort_by_key(|&mode| mode != Mode::Lazy);
    order.dedup();
    let mut rows = Vec::new();
    for mode in order {
        if matches!(mode, Mode::Generic) && b != 1 {
            report
                .skipped
                .push(format!("{run_id} {mode}: generic inference runs one lane"));
            continue;
        }
        for _ in 0..spec.warmup {
            shape.run(mode)?;
        }
        let mut totals = Vec::with_capacity(spec.reps);
        let mut mixers = Vec::with_capacity(spec.reps);
        let mut last = None;
        for _ in 0..spec.reps {
            let r = shape.run(mode)?;
            totals.push(r.total);
            if let Some(t) = &r.tokens {
                mixers.push(t.iter().map(|x| x.mixer).sum::<Duration>());
            }
            last = Some(r);
        }
        let r = last.expect("reps >= 1");
        let total = median(&mut totals);
        let mixer = (!mixers.is_empty()).then(|| median(&mut mixers));
        let impl_name = shape.impl_name(mode);

        let audit_mode = match mode {
            Mode::Lazy => Some(AuditMode::Lazy),
            Mode::Eager => Some(AuditMode::Eager),
            _ if mode.is_relaxed() && !r.half => Some(AuditMode::Relaxed),
            Mode::Generic => Some(AuditMode::Relaxed),
            _ => None,
        };
        let audit = match audit_mode {
            None => Check::NotApplicable,
            Some(am) => {
                let shape_for = RunShape {
                    lanes: if mode == Mode::Generic { 1 } else { b },
                    ..run_shape
                };
                let a = audit_counts(&r.ledger, shape_for, am)?;
                if a.passed() {
                    Check::Pass
                } else {
                    report.audit_failures.push(format!("{run_id} {mode}\n{a}"));
                    Check::Fail
                }
            }
        };

        let (oracle, max_error) = match (&lazy, mode) {
            (_, Mode::Lazy) => (Check::NotApplicable, None),
            (None, _) => (Check::NotApplicable, None),
            (Some(_), Mode::DataDependent) => {
                let rule = rule_family(spec.seed);
                let o = lazy_oracle_data_dependent(
                    model.config(),
                    rule.as_ref(),
                    model.blocks(),
                    &mut shape.sampler(),
                    &first,
                )?;
                judge(
                    relative_error(&r.values, &o.activations.concat()),
                    &run_id,
                    mode,
                    report,
                )
            }
            (Some((want, ..)), _) => {
                let want = if r.half {
                    half_slice(want, m, b, l, d)
                } else {
                    want.clone()
                };
                judge(relative_error(&r.values, &want), &run_id, mode, report)
            }
        };

        let speedup = lazy.as_ref().and_then(|(_, lt, lm)| match (lm, mixer) {
            (Some(lm), Some(mm)) if mm > Duration::ZERO => {
                Some(lm.as_secs_f64() / mm.as_secs_f64())
            }
            _ if total > Duration::ZERO => Some(lt.as_secs_f64() / total.as_secs_f64()),
            _ => None,
        });
        if let Some(t) = &r.tokens {
            report
                .records
                .extend(records_from(t, &run_id, mode, &impl_name, model.config()));
        }
        if mode == Mode::Lazy {
            lazy = Some((r.values.clone(), total, mixer));
        }
        rows.push(SummaryRow {
            run_id: run_id.clone(),
            mode,
            impl_name,
            mixer,
            total,
            speedup,
            audit,
            oracle,
            max_error,
            tau_calls: r.ledger.total_tau_calls(),
            flops: r.ledger.flops,
        });
    }
    report.rows.extend(rows);
    Ok(())
}

fn judge(err: f64, run_id: &str, mode: Mode, report: &mut SweepReport) -> (Check, Option<f64>) {
    if err <= ORACLE_TOL {
        (Check::Pass, Some(err))
    } else {
        report.mismatches.push(format!(
            "{run_id} {mode}: relative error {err:.3e} exceeds {ORACLE_TOL:e}"
        ));
        (Check::Fail, Some(err))
    }
}

/// Positions `L/2 + 1 ..= L` of a flattened full run, in the order of
/// `ActivationStore::positions`.
fn half_slice(full: &[f64], m: usize, b: usize, l: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((m + 1) * b * (l / 2) * d);
    for level in 0..=m {
        for lane in 0..b {
            let base = (level * b + lane) * l * d;
            out.extend_from_slice(&full[base + (l / 2) * d..base + l * d]);
        }
    }
    out
}

/// Write the sweep's records to `path` (CSV, or JSON lines for `.jsonl` /
/// `.json`).
pub fn write_records(records: &[BenchRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    emit_records(records, &mut w, RecordFormat::from_path(path))?;
    w.flush()?;
    Ok(())
}

/// Time every τ implementation per side, keep the fastest, and write the
/// table to `out`.
pub fn run_calibration(
    sides: &[usize],
    reps: usize,
    shape: CalibrationShape,
    out: &Path,
) -> Result<DispatchTable> {
    let table = calibrate(sides, reps, shape)?;
    table.save(out)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_slice_picks_second_half() {
        // 1 layer, 1 lane, L=4, D=1: levels [0,1,2,3] and [10,11,12,13]
        let full = [0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0];
        assert_eq!(half_slice(&full, 1, 1, 4, 1), [2.0, 3.0, 12.0, 13.0]);
    }

    #[test]
    fn first_token_is_deterministic() {
        assert_eq!(first_token(4, 3), first_token(4, 3));
        assert_ne!(first_token(4, 3), first_token(4, 4));
    }
}
