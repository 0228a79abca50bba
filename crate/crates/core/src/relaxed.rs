//! Single-stream online convolution: the relaxed tile schedule and the
//! lazy / eager baselines.
//!
//! Every runner pulls `y_i` from a provider that sees only the already
//! finalized outputs `z_1 .. z_{i-1}`, so a run cannot read ahead.

use std::collections::BTreeMap;

use crate::error::{invalid, require_pow2, Result};
use crate::fft::KernelDftCache;
use crate::filters::FilterBank;
use crate::instrumentation::Ledger;
use crate::tau::{apply_tile, DispatchTable, LayerFilter, TauImplKind, TauScratch, TileTask};

/// Largest power of two dividing `i`.
pub fn tile_side(i: usize) -> Result<usize> {
    if i == 0 {
        return Err(invalid("tile side is undefined for position 0"));
    }
    Ok(1 << i.trailing_zeros())
}

/// Gray tile unlocked at global iteration `i` of a schedule that started
/// after position `origin`: the square tile of side `U(i - origin)` ending at
/// `i`. `None` at or beyond the last iteration. The caller clips outputs
/// past `horizon`.
pub fn gray_tile(i: usize, origin: usize, horizon: usize) -> Option<TileTask> {
    if i <= origin || i >= horizon {
        return None;
    }
    let side = 1 << (i - origin).trailing_zeros();
    Some(TileTask::square(i, side))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub iteration: usize,
    /// Position whose same-position (`rho_0`) term is applied.
    pub red: usize,
    pub gray: Option<TileTask>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSchedule {
    pub entries: Vec<ScheduleEntry>,
    pub horizon: usize,
}

impl TileSchedule {
    pub fn gray_tiles(&self) -> impl Iterator<Item = &TileTask> {
        self.entries.iter().filter_map(|e| e.gray.as_ref())
    }

    /// Gray tile count per side.
    pub fn side_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for t in self.gray_tiles() {
            *h.entry(t.src_len()).or_default() += 1;
        }
        h
    }
}

pub fn build_schedule(horizon: usize) -> Result<TileSchedule> {
    require_pow2(horizon, "horizon L")?;
    if horizon < 2 {
        return Err(invalid("horizon L must be at least 2"));
    }
    let entries = (1..=horizon)
        .map(|i| ScheduleEntry {
            iteration: i,
            red: i,
            gray: gray_tile(i, 0, horizon),
        })
        .collect();
    Ok(TileSchedule { entries, horizon })
}

/// Outputs of a finished single-stream run.
#[derive(Debug, Clone)]
pub struct ConvRun {
    pub z: Vec<f64>,
    pub ledger: Ledger,
}

fn check_inputs(rho: &[f64], horizon: usize) -> Result<()> {
    require_pow2(horizon, "horizon L")?;
    if rho.len() < horizon {
        return Err(invalid(format!(
            "filter has {} taps, horizon {horizon} needs at least that many",
            rho.len()
        )));
    }
    Ok(())
}

/// Streaming relaxed convolution: push `y_i`, get `z_i` back.
#[derive(Debug)]
pub struct OnlineConv {
    rho: Vec<f64>,
    horizon: usize,
    next: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    table: DispatchTable,
    cache: Option<KernelDftCache>,
    scratch: TauScratch,
    ledger: Ledger,
}

impl OnlineConv {
    pub fn new(rho: &[f64], horizon: usize, table: DispatchTable) -> Result<Self> {
        check_inputs(rho, horizon)?;
        let rho = rho[..horizon].to_vec();
        let cache = if table
            .kinds_for_horizon(horizon)
            .contains(&TauImplKind::FftCyclicCached)
        {
            let bank = FilterBank::new(1, horizon, 1, rho.clone())?;
            Some(KernelDftCache::build(&bank, horizon)?)
        } else {
            None
        };
        Ok(Self {
            rho,
            horizon,
            next: 1,
            y: vec![0.0; horizon],
            z: vec![0.0; horizon],
            table,
            cache,
            scratch: TauScratch::default(),
            ledger: Ledger::new(1, 1, 1),
        })
    }

    /// One-based position the next `push` fills.
    pub fn position(&self) -> usize {
        self.next
    }

    /// Finalized outputs `z_1 .. z_{position-1}`.
    pub fn finalized(&self) -> &[f64] {
        &self.z[..self.next - 1]
    }

    /// Whole accumulator; entries at and after `position` are partial sums.
    pub fn partial(&self) -> &[f64] {
        &self.z
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Feed `y_i` and return the finalized `z_i`. The gray tile of iteration
    /// `i` is applied before returning.
    pub fn push(&mut self, y: f64) -> Result<f64> {
        let i = self.next;
        if i > self.horizon {
            return Err(invalid(format!(
                "stream already holds {} positions",
                self.horizon
            )));
        }
        self.y[i - 1] = y;
        self.z[i - 1] += y * self.rho[0];
        self.ledger.add_red();
        self.ledger.add_madds(1);
        self.ledger.add_flops(2);
        self.ledger.add_positions(2);
        let out = self.z[i - 1];
        if let Some(task) = gray_tile(i, 0, self.horizon) {
            let side = task.src_len();
            let filt = LayerFilter {
                rows: &self.rho,
                cols: &self.rho,
                taps: self.horizon,
                width: 1,
                cache: self.cache.as_ref(),
                layer: 0,
                channel_base: 0,
            };
            let cost = apply_tile(
                self.table.lookup(side),
                &filt,
                &task,
                &self.y[i - side..i],
                &mut self.z[i..i + side],
                &mut self.scratch,
            )?;
            self.ledger.record_tau(0, side);
            self.ledger.add_flops(cost.flops);
            self.ledger.add_dfts(cost.dfts);
            self.ledger.add_positions(2 * side as u64);
            self.ledger.observe_scratch(self.scratch.elements());
        }
        self.next += 1;
        Ok(out)
    }

    pub fn finish(self) -> ConvRun {
        ConvRun {
            z: self.z,
            ledger: self.ledger,
        }
    }
}

/// Relaxed schedule. `provider(i, z_done)` returns `y_i` given `z_1 .. z_{i-1}`.
pub fn run_relaxed<F>(
    mut provider: F,
    rho: &[f64],
    horizon: usize,
    table: &DispatchTable,
) -> Result<ConvRun>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    let mut conv = OnlineConv::new(rho, horizon, table.clone())?;
    for i in 1..=horizon {
        let y = provider(i, conv.finalized())?;
        conv.push(y)?;
    }
    Ok(conv.finish())
}

fn run_strips<F, G>(mut provider: F, rho: &[f64], horizon: usize, mut gray: G) -> Result<ConvRun>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
    G: FnMut(usize, &[f64], &mut [f64], &mut Ledger),
{
    check_inputs(rho, horizon)?;
    let mut y = vec![0.0; horizon];
    let mut z = vec![0.0; horizon];
    let mut ledger = Ledger::new(1, 1, 1);
    for i in 1..=horizon {
        let yi = provider(i, &z[..i - 1])?;
        y[i - 1] = yi;
        z[i - 1] += yi * rho[0];
        ledger.add_red();
        ledger.add_madds(1);
        ledger.add_flops(2);
        ledger.add_positions(2);
        if i < horizon {
            gray(i, &y[..i], &mut z, &mut ledger);
        }
    }
    Ok(ConvRun { z, ledger })
}

/// Lazy baseline: at iteration `i`, the full strip `y_1 .. y_i` is summed
/// into `z_{i+1}`.
pub fn run_lazy<F>(provider: F, rho: &[f64], horizon: usize) -> Result<ConvRun>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    run_strips(provider, rho, horizon, |i, y, z, ledger| {
        let t = i + 1;
        let acc: f64 = y
            .iter()
            .enumerate()
            .map(|(j, v)| v * rho[t - (j + 1)])
            .sum();
        z[t - 1] += acc;
        ledger.add_madds(i as u64);
        ledger.add_flops(2 * i as u64);
        ledger.add_positions(i as u64 + 1);
    })
}

/// Eager baseline: at iteration `i`, `y_i` is pushed into every later output.
pub fn run_eager<F>(provider: F, rho: &[f64], horizon: usize) -> Result<ConvRun>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    run_strips(provider, rho, horizon, |i, y, z, ledger| {
        let yi = y[i - 1];
        for t in i + 1..=horizon {
            z[t - 1] += yi * rho[t - i];
        }
        let n = (horizon - i) as u64;
        ledger.add_madds(n);
        ledger.add_flops(2 * n);
        ledger.add_positions(n + 1);
    })
}
