//! The range-contribution primitive τ and its implementations.
//!
//! `τ(y, [l, r], ρ, [l', r'])_t = Σ_{i=l..r} y_i · ρ_{t−i}` for `t ∈ [l', r']`,
//! with `r ≤ l'`. Positions are one-based at the public boundary, filter lags
//! zero-based (`ρ_0` multiplies the same-position input).
//!
//! Three implementations are provided:
//!
//! * [`TauImplKind::Direct`]: the defining double sum, `O(L1·L2)`.
//! * [`TauImplKind::FftPadded`]: linear convolution of `y[l..=r]` against
//!   `ρ[l'−r ..= r'−l]` with zero padding, keeping the middle outputs.
//! * [`TauImplKind::FftCyclicCached`]: for square schedule tiles only; one
//!   order-`2U` cyclic convolution against a cached spectrum of `ρ[0..2U]`,
//!   i.e. one forward and one inverse DFT per channel.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::fft::{plan, KernelDftCache};
use crate::filters::FilterBank;
use crate::instrumentation::{dft_flops, median};
use crate::rng::stream_rng;

/// A contribution tile: inputs `[src_lo, src_hi]` to outputs `[dst_lo, dst_hi]`,
/// one-based and inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileTask {
    pub src_lo: usize,
    pub src_hi: usize,
    pub dst_lo: usize,
    pub dst_hi: usize,
}

impl TileTask {
    pub fn new(src_lo: usize, src_hi: usize, dst_lo: usize, dst_hi: usize) -> Result<Self> {
        let task = Self {
            src_lo,
            src_hi,
            dst_lo,
            dst_hi,
        };
        task.validate()?;
        Ok(task)
    }

    /// The schedule tile of side `side` unlocked at iteration `i`:
    /// `[i−U+1, i] → [i+1, i+U]`.
    pub fn square(i: usize, side: usize) -> Self {
        debug_assert!(side >= 1 && i >= side);
        Self {
            src_lo: i + 1 - side,
            src_hi: i,
            dst_lo: i + 1,
            dst_hi: i + side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_lo == 0 {
            return Err(invalid("positions are one-based; src_lo must be >= 1"));
        }
        if self.src_lo > self.src_hi || self.dst_lo > self.dst_hi {
            return Err(invalid(format!("empty range in tile {self}")));
        }
        if self.src_hi > self.dst_lo {
            return Err(invalid(format!(
                "tile {self} is not causal: src_hi must not exceed dst_lo"
            )));
        }
        Ok(())
    }

    pub fn src_len(&self) -> usize {
        self.src_hi - self.src_lo + 1
    }

    pub fn dst_len(&self) -> usize {
        self.dst_hi - self.dst_lo + 1
    }

    /// Smallest and largest filter lag the tile touches.
    pub fn lag_range(&self) -> (usize, usize) {
        (self.dst_lo - self.src_hi, self.dst_hi - self.src_lo)
    }

    /// Side `U` if this is a square schedule tile `[i−U+1, i] → [i+1, i+U]`
    /// with `U` a power of two.
    pub fn schedule_side(&self) -> Option<usize> {
        let side = self.src_len();
        (side == self.dst_len() && self.dst_lo == self.src_hi + 1 && side.is_power_of_two())
            .then_some(side)
    }
}

impl fmt::Display for TileTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}] -> [{}, {}]",
            self.src_lo, self.src_hi, self.dst_lo, self.dst_hi
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TauImplKind {
    Direct,
    FftPadded,
    FftCyclicCached,
}

impl TauImplKind {
    pub const ALL: [TauImplKind; 3] = [Self::Direct, Self::FftPadded, Self::FftCyclicCached];

    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::FftPadded => "fft_padded",
            Self::FftCyclicCached => "fft_cyclic_cached",
        }
    }
}

impl fmt::Display for TauImplKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TauImplKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "direct" => Ok(Self::Direct),
            "fft_padded" | "fft-padded" => Ok(Self::FftPadded),
            "fft_cyclic_cached" | "fft-cyclic-cached" | "fft_cyclic" => Ok(Self::FftCyclicCached),
            other => Err(Error::Parse(format!(
                "unknown tau implementation {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Calibrated,
    Default,
}

/// Tile sides at or below this use [`TauImplKind::Direct`] in the
/// uncalibrated table.
pub const DEFAULT_CROSSOVER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fallback {
    Crossover(usize),
    Uniform(TauImplKind),
}

/// Tile side → τ implementation. Total: sides without an explicit entry use
/// the table's fallback rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchTable {
    entries: BTreeMap<usize, TauImplKind>,
    fallback: Fallback,
    provenance: Provenance,
}

impl Default for DispatchTable {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            fallback: Fallback::Crossover(DEFAULT_CROSSOVER),
            provenance: Provenance::Default,
        }
    }
}

impl DispatchTable {
    /// Every side routed to `kind`.
    pub fn uniform(kind: TauImplKind) -> Self {
        Self {
            entries: BTreeMap::new(),
            fallback: Fallback::Uniform(kind),
            provenance: Provenance::Default,
        }
    }

    pub fn from_entries(entries: BTreeMap<usize, TauImplKind>, provenance: Provenance) -> Self {
        Self {
            entries,
            provenance,
            ..Self::default()
        }
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn entries(&self) -> &BTreeMap<usize, TauImplKind> {
        &self.entries
    }

    pub fn set(&mut self, side: usize, kind: TauImplKind) {
        self.entries.insert(side, kind);
    }

    pub fn lookup(&self, side: usize) -> TauImplKind {
        if let Some(&kind) = self.entries.get(&side) {
            return kind;
        }
        match self.fallback {
            Fallback::Uniform(kind) => kind,
            Fallback::Crossover(limit) if side <= limit => TauImplKind::Direct,
            Fallback::Crossover(_) => TauImplKind::FftCyclicCached,
        }
    }

    /// Every distinct implementation used for sides `1 .. horizon/2`.
    pub fn kinds_for_horizon(&self, horizon: usize) -> Vec<TauImplKind> {
        let mut kinds: Vec<_> = std::iter::successors(Some(1usize), |s| Some(s * 2))
            .take_while(|&s| s <= (horizon / 2).max(1))
            .map(|s| self.lookup(s))
            .collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    /// Argmin of the median timing per side; ties go to the earlier kind in
    /// [`TauImplKind::ALL`].
    pub fn from_timings(timings: &CalibrationTimings) -> Self {
        let entries = timings
            .samples
            .iter()
            .filter_map(|(&side, per_kind)| {
                per_kind
                    .iter()
                    .map(|(&kind, samples)| (median(&mut samples.clone()), kind))
                    .min()
                    .map(|(_, kind)| (side, kind))
            })
            .collect();
        Self::from_entries(entries, Provenance::Calibrated)
    }

    /// `U<TAB>impl_name` per explicit entry, ascending by side.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(side, kind)| format!("{side}\t{kind}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(side), Some(kind), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse(format!(
                    "dispatch table line {}: expected `U<TAB>impl`, got {line:?}",
                    lineno + 1
                )));
            };
            let side: usize = side.parse().map_err(|_| {
                Error::Parse(format!(
                    "dispatch table line {}: bad side {side:?}",
                    lineno + 1
                ))
            })?;
            if !side.is_power_of_two() {
                return Err(Error::Parse(format!(
                    "dispatch table line {}: side {side} is not a power of two",
                    lineno + 1
                )));
            }
            entries.insert(side, kind.parse()?);
        }
        Ok(Self::from_entries(entries, Provenance::Calibrated))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Analytic cost of one batched τ invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TileCost {
    pub flops: u64,
    pub dfts: u64,
}

impl std::ops::AddAssign for TileCost {
    fn add_assign(&mut self, rhs: Self) {
        self.flops += rhs.flops;
        self.dfts += rhs.dfts;
    }
}

/// Reusable working memory for τ calls.
#[derive(Debug, Default)]
pub struct TauScratch {
    spec: Vec<Complex64>,
    spec2: Vec<Complex64>,
    acc: Vec<f64>,
}

impl TauScratch {
    /// Live scratch size in f64 units (a complex value counts as two).
    pub fn elements(&self) -> usize {
        2 * (self.spec.capacity() + self.spec2.capacity()) + self.acc.capacity()
    }
}

/// One layer's filters as seen by the batched kernels.
///
/// `rows` is `taps × width` row-major (direct kernel), `cols` is
/// `width × taps` (padded FFT). The cached-spectrum kernel looks channel
/// `c` up as `(layer, channel_base + c)`.
#[derive(Debug, Clone, Copy)]
pub struct LayerFilter<'a> {
    pub rows: &'a [f64],
    pub cols: &'a [f64],
    pub taps: usize,
    pub width: usize,
    pub cache: Option<&'a KernelDftCache>,
    pub layer: usize,
    pub channel_base: usize,
}

/// Batched τ over `width` channels of one lane.
///
/// `src` holds rows `src_lo..=src_hi` (row-major, `width` wide). The
/// contributions to rows `dst_lo ..` are added into `dst`, which may hold
/// fewer than `dst_len` rows when the tile is clipped at the horizon.
pub fn apply_tile(
    kind: TauImplKind,
    filt: &LayerFilter<'_>,
    task: &TileTask,
    src: &[f64],
    dst: &mut [f64],
    scratch: &mut TauScratch,
) -> Result<TileCost> {
    let w = filt.width;
    debug_assert_eq!(src.len(), task.src_len() * w);
    debug_assert!(dst.len().is_multiple_of(w) && dst.len() <= task.dst_len() * w);
    let (_, lag_hi) = task.lag_range();
    if lag_hi >= filt.taps {
        return Err(invalid(format!(
            "tile {task} needs filter lag {lag_hi}, filter has {} taps",
            filt.taps
        )));
    }
    match kind {
        TauImplKind::Direct => Ok(direct(filt, task, src, dst, scratch)),
        TauImplKind::FftPadded => fft_padded(filt, task, src, dst, scratch),
        TauImplKind::FftCyclicCached => fft_cyclic(filt, task, src, dst, scratch),
    }
}

fn direct(
    filt: &LayerFilter<'_>,
    task: &TileTask,
    src: &[f64],
    dst: &mut [f64],
    scratch: &mut TauScratch,
) -> TileCost {
    let w = filt.width;
    let l1 = task.src_len();
    scratch.acc.clear();
    scratch.acc.resize(w, 0.0);
    let acc = &mut scratch.acc[..];
    let rows = dst.len() / w;
    for (r, out) in dst.chunks_exact_mut(w).enumerate() {
        let t = task.dst_lo + r;
        acc.fill(0.0);
        for j in 0..l1 {
            let lag = t - (task.src_lo + j);
            let y = &src[j * w..(j + 1) * w];
            let rho = &filt.rows[lag * w..(lag + 1) * w];
            for ((a, &yv), &rv) in acc.iter_mut().zip(y).zip(rho) {
                *a += yv * rv;
            }
        }
        for (o, a) in out.iter_mut().zip(acc.iter()) {
            *o += *a;
        }
    }
    TileCost {
        flops: 2 * (l1 * rows * w) as u64,
        dfts: 0,
    }
}

fn fft_padded(
    filt: &LayerFilter<'_>,
    task: &TileTask,
    src: &[f64],
    dst: &mut [f64],
    scratch: &mut TauScratch,
) -> Result<TileCost> {
    let w = filt.width;
    let l1 = task.src_len();
    let (lag_lo, lag_hi) = task.lag_range();
    let rho_len = lag_hi - lag_lo + 1;
    let n = (l1 + rho_len - 1).next_power_of_two();
    let p = plan(n)?;
    let rows = dst.len() / w;
    scratch.spec.resize(n, Complex64::default());
    scratch.spec2.resize(n, Complex64::default());
    for c in 0..w {
        let ys = &mut scratch.spec[..n];
        ys.fill(Complex64::default());
        for (j, v) in ys.iter_mut().take(l1).enumerate() {
            v.re = src[j * w + c];
        }
        let rs = &mut scratch.spec2[..n];
        rs.fill(Complex64::default());
        let col = &filt.cols[c * filt.taps + lag_lo..][..rho_len];
        for (v, &r) in rs.iter_mut().zip(col) {
            v.re = r;
        }
        p.forward(ys);
        p.forward(rs);
        for (a, b) in ys.iter_mut().zip(rs.iter()) {
            *a *= b;
        }
        p.inverse(ys);
        for r in 0..rows {
            dst[r * w + c] += ys[r + l1 - 1].re;
        }
    }
    Ok(TileCost {
        flops: w as u64 * (3 * dft_flops(n) + 6 * n as u64),
        dfts: 3 * w as u64,
    })
}

fn fft_cyclic(
    filt: &LayerFilter<'_>,
    task: &TileTask,
    src: &[f64],
    dst: &mut [f64],
    scratch: &mut TauScratch,
) -> Result<TileCost> {
    let side = task.schedule_side().ok_or_else(|| {
        invalid(format!(
            "cached cyclic τ needs a square schedule tile [i-U+1, i] -> [i+1, i+U], got {task}"
        ))
    })?;
    let cache = filt.cache.ok_or_else(|| {
        Error::Precondition("cached cyclic τ called without a kernel cache".into())
    })?;
    let w = filt.width;
    let n = 2 * side;
    let p = plan(n)?;
    let rows = dst.len() / w;
    scratch.spec.resize(n, Complex64::default());
    for c in 0..w {
        let kernel = cache.get(filt.layer, filt.channel_base + c, side)?;
        let buf = &mut scratch.spec[..n];
        buf.fill(Complex64::default());
        for (j, v) in buf.iter_mut().take(side).enumerate() {
            v.re = src[j * w + c];
        }
        p.forward(buf);
        for (a, k) in buf.iter_mut().zip(kernel) {
            *a *= k;
        }
        p.inverse(buf);
        for r in 0..rows {
            dst[r * w + c] += buf[side + r].re;
        }
    }
    Ok(TileCost {
        flops: w as u64 * (2 * dft_flops(n) + 6 * n as u64),
        dfts: 2 * w as u64,
    })
}

fn check_single_channel(y: &[f64], rho: &[f64], task: &TileTask) -> Result<()> {
    task.validate()?;
    if y.len() < task.src_hi {
        return Err(invalid(format!(
            "input holds {} positions, tile {task} reads up to {}",
            y.len(),
            task.src_hi
        )));
    }
    let (_, lag_hi) = task.lag_range();
    if rho.len() <= lag_hi {
        return Err(invalid(format!(
            "filter has {} taps, tile {task} needs lag {lag_hi}",
            rho.len()
        )));
    }
    Ok(())
}

fn single_channel(
    kind: TauImplKind,
    y: &[f64],
    rho: &[f64],
    cache: Option<(&KernelDftCache, usize, usize)>,
    task: &TileTask,
) -> Result<Vec<f64>> {
    let filt = LayerFilter {
        rows: rho,
        cols: rho,
        taps: rho.len(),
        width: 1,
        cache: cache.map(|(c, _, _)| c),
        layer: cache.map_or(0, |(_, l, _)| l),
        channel_base: cache.map_or(0, |(_, _, ch)| ch),
    };
    let mut out = vec![0.0; task.dst_len()];
    apply_tile(
        kind,
        &filt,
        task,
        &y[task.src_lo - 1..task.src_hi],
        &mut out,
        &mut TauScratch::default(),
    )?;
    Ok(out)
}

/// Direct evaluation of the defining sum. `y[p − 1]` holds position `p`;
/// `rho[k]` is lag `k`.
pub fn tau_direct(y: &[f64], rho: &[f64], task: &TileTask) -> Result<Vec<f64>> {
    check_single_channel(y, rho, task)?;
    single_channel(TauImplKind::Direct, y, rho, None, task)
}

/// Zero-padded FFT convolution of `y[l..=r]` against `ρ[l'−r ..= r'−l]`.
pub fn tau_fft(y: &[f64], rho: &[f64], task: &TileTask) -> Result<Vec<f64>> {
    check_single_channel(y, rho, task)?;
    single_channel(TauImplKind::FftPadded, y, rho, None, task)
}

/// Order-`2U` cyclic convolution against the cached spectrum of
/// `ρ[layer, 0..2U, channel]`.
pub fn tau_fft_cyclic_cached(
    y: &[f64],
    cache: &KernelDftCache,
    layer: usize,
    channel: usize,
    task: &TileTask,
) -> Result<Vec<f64>> {
    task.validate()?;
    if y.len() < task.src_hi {
        return Err(invalid(format!(
            "input holds {} positions, tile {task} reads up to {}",
            y.len(),
            task.src_hi
        )));
    }
    let side = task.schedule_side().ok_or_else(|| {
        invalid(format!(
            "cached cyclic τ needs a square schedule tile, got {task}"
        ))
    })?;
    cache.get(layer, channel, side)?;
    let filt = LayerFilter {
        rows: &[],
        cols: &[],
        taps: 2 * side,
        width: 1,
        cache: Some(cache),
        layer,
        channel_base: channel,
    };
    let mut out = vec![0.0; side];
    apply_tile(
        TauImplKind::FftCyclicCached,
        &filt,
        task,
        &y[task.src_lo - 1..task.src_hi],
        &mut out,
        &mut TauScratch::default(),
    )?;
    Ok(out)
}

/// Route to the table's implementation for the tile's side.
pub fn tau_dispatch(
    y: &[f64],
    rho: &[f64],
    cache: Option<(&KernelDftCache, usize, usize)>,
    task: &TileTask,
    table: &DispatchTable,
) -> Result<Vec<f64>> {
    match table.lookup(task.src_len()) {
        TauImplKind::Direct => tau_direct(y, rho, task),
        TauImplKind::FftPadded => tau_fft(y, rho, task),
        TauImplKind::FftCyclicCached => {
            let (cache, layer, channel) = cache.ok_or_else(|| {
                Error::Precondition("dispatch chose cached cyclic τ but no cache was given".into())
            })?;
            tau_fft_cyclic_cached(y, cache, layer, channel, task)
        }
    }
}

/// Tensor shape a calibration tile is timed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationShape {
    pub lanes: usize,
    pub layers: usize,
    pub channels: usize,
}

/// Raw timing samples: side → implementation → one duration per repetition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTimings {
    pub samples: BTreeMap<usize, BTreeMap<TauImplKind, Vec<Duration>>>,
}

/// Time each candidate on one batched square tile per side: every layer and
/// lane of `shape`, `reps` times after one warm-up pass.
pub fn measure(
    sides: &[usize],
    reps: usize,
    shape: CalibrationShape,
    candidates: &[TauImplKind],
) -> Result<CalibrationTimings> {
    if sides.is_empty() {
        return Err(invalid("calibration needs at least one tile side"));
    }
    if candidates.is_empty() {
        return Err(invalid("calibration needs at least one implementation"));
    }
    if shape.lanes == 0 || shape.layers == 0 || shape.channels == 0 {
        return Err(invalid("calibration shape must be positive"));
    }
    for &s in sides {
        crate::error::require_pow2(s, "calibration tile side")?;
    }
    let reps = reps.max(1);
    let max_side = *sides.iter().max().expect("nonempty");
    let horizon = 2 * max_side;
    let w = shape.channels;
    let filters = FilterBank::seeded(shape.layers, horizon, w, 0xCA1, 0.5);
    let cols = filters.to_channel_major();
    let cache = if candidates.contains(&TauImplKind::FftCyclicCached) {
        Some(KernelDftCache::build(&filters, horizon)?)
    } else {
        None
    };
    let mut rng = stream_rng(0xCA1, 2);
    let mut scratch = TauScratch::default();
    let mut timings = CalibrationTimings::default();
    for &side in sides {
        let task = TileTask::square(side, side);
        let src: Vec<f64> = (0..shape.lanes * side * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut dst = vec![0.0; shape.lanes * side * w];
        for &kind in candidates {
            let run = |scratch: &mut TauScratch, dst: &mut [f64]| -> Result<()> {
                for layer in 0..shape.layers {
                    let filt = LayerFilter {
                        rows: filters.layer(layer),
                        cols: &cols[layer * w * horizon..][..w * horizon],
                        taps: horizon,
                        width: w,
                        cache: cache.as_ref(),
                        layer,
                        channel_base: 0,
                    };
                    for lane in 0..shape.lanes {
                        let span = lane * side * w..(lane + 1) * side * w;
                        apply_tile(
                            kind,
                            &filt,
                            &task,
                            &src[span.clone()],
                            &mut dst[span],
                            scratch,
                        )?;
                    }
                }
                Ok(())
            };
            run(&mut scratch, &mut dst)?;
            let mut samples = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                run(&mut scratch, &mut dst)?;
                samples.push(start.elapsed());
            }
            timings
                .samples
                .entry(side)
                .or_default()
                .insert(kind, samples);
        }
    }
    Ok(timings)
}

/// Measure every implementation and pick the fastest per side.
pub fn calibrate(sides: &[usize], reps: usize, shape: CalibrationShape) -> Result<DispatchTable> {
    Ok(DispatchTable::from_timings(&measure(
        sides,
        reps,
        shape,
        &TauImplKind::ALL,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::dft_invocations;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn direct_examples() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let rho = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let task = TileTask::new(1, 2, 3, 4).unwrap();
        assert_eq!(tau_direct(&y, &rho, &task).unwrap(), vec![7.0, 10.0]);

        let mut delta = [0.0; 8];
        delta[0] = 1.0;
        assert_eq!(tau_direct(&y, &delta, &task).unwrap(), vec![0.0, 0.0]);

        let ones = [1.0; 8];
        let task = TileTask::new(1, 4, 5, 8).unwrap();
        assert_eq!(tau_direct(&ones, &ones, &task).unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn fft_matches_direct_examples() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let rho = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let task = TileTask::new(1, 2, 3, 4).unwrap();
        assert!(close(
            &tau_fft(&y, &rho, &task).unwrap(),
            &[7.0, 10.0],
            1e-9
        ));
        assert!(close(
            &tau_fft(&[0.0; 4], &rho, &task).unwrap(),
            &[0.0, 0.0],
            1e-9
        ));
        let single = TileTask::new(2, 2, 3, 3).unwrap();
        let got = tau_fft(&y, &rho, &single).unwrap();
        assert!((got[0] - y[1] * rho[1]).abs() < 1e-12);
    }

    #[test]
    fn rejects_acausal_tiles() {
        assert!(matches!(
            TileTask::new(1, 3, 2, 4),
            Err(Error::InvalidArgument(_))
        ));
        assert!(TileTask::new(0, 1, 2, 2).is_err());
        assert!(TileTask::new(2, 1, 3, 3).is_err());
        let bad = TileTask {
            src_lo: 2,
            src_hi: 3,
            dst_lo: 1,
            dst_hi: 1,
        };
        assert!(tau_direct(&[1.0; 4], &[1.0; 4], &bad).is_err());
        // src_hi == dst_lo is allowed and includes the lag-0 term
        let touching = TileTask::new(1, 2, 2, 2).unwrap();
        assert_eq!(
            tau_direct(&[1.0, 2.0], &[3.0, 5.0], &touching).unwrap(),
            vec![2.0 * 3.0 + 5.0]
        );
    }

    #[test]
    fn cyclic_single_term_and_dft_count() {
        let rho = [0.5, -2.0, 0.25, 1.0];
        let bank = FilterBank::new(1, 4, 1, rho.to_vec()).unwrap();
        let cache = KernelDftCache::build(&bank, 4).unwrap();
        let y = [3.0, 7.0];
        let before = dft_invocations();
        let out = tau_fft_cyclic_cached(&y, &cache, 0, 0, &TileTask::square(1, 1)).unwrap();
        assert_eq!(dft_invocations() - before, 2);
        assert!((out[0] - 3.0 * -2.0).abs() < 1e-12);

        let before = dft_invocations();
        let out = tau_fft_cyclic_cached(&y, &cache, 0, 0, &TileTask::square(2, 2)).unwrap();
        assert_eq!(dft_invocations() - before, 2);
        let want = tau_direct(&y, &rho, &TileTask::square(2, 2)).unwrap();
        assert!(close(&out, &want, 1e-9));
    }

    #[test]
    fn cyclic_rejects_non_square() {
        let bank = FilterBank::delta(1, 8, 1);
        let cache = KernelDftCache::build(&bank, 8).unwrap();
        let task = TileTask::new(1, 2, 4, 5).unwrap();
        assert!(matches!(
            tau_fft_cyclic_cached(&[1.0; 8], &cache, 0, 0, &task),
            Err(Error::InvalidArgument(_))
        ));
        // side 8 is beyond the cache built for horizon 8
        let task = TileTask::square(8, 8);
        assert!(matches!(
            tau_fft_cyclic_cached(&[1.0; 16], &cache, 0, 0, &task),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn cyclic_fold_misses_read_window() {
        // For U = 2 the linear convolution has 3U - 1 = 5 outputs (0..=4);
        // folding index 4 onto 0 leaves the read window [2, 3] intact.
        let y = [1.0, 1.0];
        let rho = [1.0, 1.0, 1.0, 1.0];
        let full = crate::fft::linear_convolve(&y, &rho).unwrap();
        assert_eq!(full.len(), 5);
        let cyc = crate::fft::cyclic_convolve(&y, &rho, 4).unwrap();
        assert!((cyc[0] - (full[0] + full[4])).abs() < 1e-12);
        assert!(close(&cyc[2..4], &full[2..4], 1e-12));
    }

    #[test]
    fn default_table() {
        let t = DispatchTable::default();
        assert_eq!(t.provenance(), Provenance::Default);
        for side in [1, 2, 4, 8] {
            assert_eq!(t.lookup(side), TauImplKind::Direct);
        }
        for side in [16, 32, 1024] {
            assert_eq!(t.lookup(side), TauImplKind::FftCyclicCached);
        }
        assert_eq!(
            DispatchTable::uniform(TauImplKind::FftPadded).lookup(1),
            TauImplKind::FftPadded
        );
    }

    #[test]
    fn table_text_round_trip() {
        let mut t = DispatchTable::from_entries(BTreeMap::new(), Provenance::Calibrated);
        t.set(1, TauImplKind::Direct);
        t.set(64, TauImplKind::FftCyclicCached);
        t.set(4, TauImplKind::FftPadded);
        let text = t.to_text();
        assert_eq!(text, "1\tdirect\n4\tfft_padded\n64\tfft_cyclic_cached\n");
        assert_eq!(DispatchTable::parse(&text).unwrap(), t);
        assert!(DispatchTable::parse("3\tdirect\n").is_err());
        assert!(DispatchTable::parse("4\tquantum\n").is_err());
        assert!(DispatchTable::parse("4\n").is_err());
    }

    #[test]
    fn argmin_from_recorded_timings_is_deterministic() {
        let ns = Duration::from_nanos;
        let mut timings = CalibrationTimings::default();
        timings.samples.insert(
            1,
            BTreeMap::from([
                (TauImplKind::Direct, vec![ns(10), ns(12), ns(11)]),
                (TauImplKind::FftCyclicCached, vec![ns(30), ns(5), ns(40)]),
            ]),
        );
        timings.samples.insert(
            16,
            BTreeMap::from([
                (TauImplKind::Direct, vec![ns(90)]),
                (TauImplKind::FftPadded, vec![ns(80)]),
                (TauImplKind::FftCyclicCached, vec![ns(50)]),
            ]),
        );
        let a = DispatchTable::from_timings(&timings);
        let b = DispatchTable::from_timings(&timings);
        assert_eq!(a, b);
        assert_eq!(a.lookup(1), TauImplKind::Direct);
        assert_eq!(a.lookup(16), TauImplKind::FftCyclicCached);
        assert_eq!(a.provenance(), Provenance::Calibrated);
    }

    #[test]
    fn calibrate_small() {
        let shape = CalibrationShape {
            lanes: 1,
            layers: 1,
            channels: 2,
        };
        let t = calibrate(&[1, 2], 3, shape).unwrap();
        assert_eq!(t.entries().len(), 2);
        assert!(TauImplKind::ALL.contains(&t.lookup(1)));
        let forced = DispatchTable::from_timings(
            &measure(&[1, 4, 8], 1, shape, &[TauImplKind::FftPadded]).unwrap(),
        );
        assert!(forced
            .entries()
            .values()
            .all(|&k| k == TauImplKind::FftPadded));
        assert!(calibrate(&[], 1, shape).is_err());
    }
}
