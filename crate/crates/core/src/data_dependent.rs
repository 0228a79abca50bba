//! Relaxed inference when the filters themselves are causal functions of
//! the data.
//!
//! Positions here are zero-based: `a_{l,0}` and `rho_{l,0}` exist. The filter
//! tap at lag `i` of layer `l` is produced by a [`FilterRule`] from the
//! history `a_{l-1,0..=i}`, so it is only known once that history is. Gray
//! work follows the parallelogram tiling of relaxed multiplication: with
//! `U` the largest power of two dividing `i + 1`,
//!
//! * if `i + 1 = U`, halve `U` and add `a[U..2U) * rho[U..2U)` into outputs
//!   `2U ..= 4U - 2`;
//! * otherwise add `a[U..2U) * rho[i-U+1..=i]` and
//!   `rho[U..2U) * a[i-U+1..=i]` into outputs `i + 1 ..= i + 2U - 1`.
//!
//! Each product is a full (untruncated) linear convolution, zero-padded to
//! order `2U`; outputs past the horizon are dropped.

use std::cell::Cell;

use num_complex::Complex64;

use crate::engine::{relative_error, BlockScratch, BlockStack, ModelConfig, Sampler};
use crate::error::{invalid, Error, Result};
use crate::fft::plan;
use crate::filters::FilterBank;
use crate::instrumentation::{dft_flops, Ledger};
use crate::rng::stream_rng;

/// Read-only view of `a_{l-1, 0..=limit}` handed to a [`FilterRule`].
///
/// Reading past `limit` is recorded and turned into a contract violation by
/// the engine; the read itself returns zeros.
pub struct History<'a> {
    rows: &'a [f64],
    prefix: &'a [f64],
    width: usize,
    limit: usize,
    violation: Cell<Option<usize>>,
}

const ZEROS: [f64; 0] = [];

impl<'a> History<'a> {
    /// `rows` and `prefix` (running sums of `rows`) must hold at least
    /// `limit + 1` rows of `width` values.
    pub fn new(rows: &'a [f64], prefix: &'a [f64], width: usize, limit: usize) -> Self {
        Self {
            rows,
            prefix,
            width,
            limit,
            violation: Cell::new(None),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Highest readable position.
    pub fn limit(&self) -> usize {
        self.limit
    }

    fn check(&self, pos: usize) -> bool {
        if pos > self.limit {
            let worst = self.violation.get().map_or(pos, |p| p.max(pos));
            self.violation.set(Some(worst));
            return false;
        }
        true
    }

    /// Row `a_{l-1, pos}`; empty if `pos` is beyond the limit.
    pub fn get(&self, pos: usize) -> &'a [f64] {
        if !self.check(pos) {
            return &ZEROS;
        }
        &self.rows[pos * self.width..(pos + 1) * self.width]
    }

    /// Mean of channel `c` over positions `0 ..= pos`.
    pub fn prefix_mean(&self, pos: usize, c: usize) -> f64 {
        if !self.check(pos) {
            return 0.0;
        }
        self.prefix[pos * self.width + c] / (pos + 1) as f64
    }

    /// Position of the furthest read past the limit, if any.
    pub fn violation(&self) -> Option<usize> {
        self.violation.get()
    }
}

/// Produces `rho_{l, lag}` (one value per channel) from `a_{l-1, 0..=lag}`.
pub trait FilterRule: Sync {
    fn name(&self) -> &str;
    /// `layer` is one-based.
    fn tap(&self, layer: usize, lag: usize, history: &History<'_>, out: &mut [f64]);
}

/// Ignores the data: taps come from a fixed bank.
#[derive(Debug, Clone)]
pub struct ConstantRule {
    pub bank: FilterBank,
}

impl FilterRule for ConstantRule {
    fn name(&self) -> &str {
        "constant"
    }

    fn tap(&self, layer: usize, lag: usize, _h: &History<'_>, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.bank.tap(layer - 1, lag, c);
        }
    }
}

/// `rho_i = tanh(mean(a_{0..=i})) / (i + 1)` per channel.
#[derive(Debug, Clone, Copy, Default)]
pub struct TanhMeanRule;

impl FilterRule for TanhMeanRule {
    fn name(&self) -> &str {
        "tanh_mean"
    }

    fn tap(&self, _layer: usize, lag: usize, h: &History<'_>, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = h.prefix_mean(lag, c).tanh() / (lag + 1) as f64;
        }
    }
}

/// `rho_i = g · tanh(s · mean(a_{0..=i})) · lambda^i`.
#[derive(Debug, Clone, Copy)]
pub struct LagDecayedMean {
    pub gain: f64,
    pub sharpness: f64,
    pub decay: f64,
}

impl FilterRule for LagDecayedMean {
    fn name(&self) -> &str {
        "lag_decayed_mean"
    }

    fn tap(&self, _layer: usize, lag: usize, h: &History<'_>, out: &mut [f64]) {
        let w = self.gain * self.decay.powi(lag as i32);
        for (c, o) in out.iter_mut().enumerate() {
            *o = w * (self.sharpness * h.prefix_mean(lag, c)).tanh();
        }
    }
}

/// `rho_i = g · sigmoid(s · a_i + t · a_0) · lambda^i`: a gate on the newest
/// history row.
#[derive(Debug, Clone, Copy)]
pub struct GatedPrefix {
    pub gain: f64,
    pub s: f64,
    pub t: f64,
    pub decay: f64,
}

impl FilterRule for GatedPrefix {
    fn name(&self) -> &str {
        "gated_prefix"
    }

    fn tap(&self, _layer: usize, lag: usize, h: &History<'_>, out: &mut [f64]) {
        let w = self.gain * self.decay.powi(lag as i32);
        let (now, first) = (h.get(lag), h.get(0));
        for (c, o) in out.iter_mut().enumerate() {
            let x = self.s * now[c] + self.t * first[c];
            *o = w / (1.0 + (-x).exp());
        }
    }
}

/// Seeded member of the test rule family.
pub fn rule_family(seed: u64) -> Box<dyn FilterRule> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 9);
    let decay = rng.random_range(0.5..0.95);
    let gain = rng.random_range(0.1..0.5) * (1.0 - decay);
    if rng.random_bool(0.5) {
        Box::new(LagDecayedMean {
            gain,
            sharpness: rng.random_range(0.5..3.0),
            decay,
        })
    } else {
        Box::new(GatedPrefix {
            gain,
            s: rng.random_range(-2.0..2.0),
            t: rng.random_range(-2.0..2.0),
            decay,
        })
    }
}

/// Activations and the filters revealed during a run.
#[derive(Debug, Clone)]
pub struct DdRun {
    /// Levels `0 ..= M`, each `[lane][position][channel]` with `L` positions.
    pub activations: Vec<Vec<f64>>,
    /// Per layer, `[lane][lag][channel]`.
    pub filters: Vec<Vec<f64>>,
    pub ledger: Ledger,
}

impl DdRun {
    /// Largest relative difference over all levels.
    pub fn max_relative_error(&self, oracle: &DdRun) -> f64 {
        self.activations
            .iter()
            .zip(&oracle.activations)
            .map(|(a, b)| relative_error(a, b))
            .fold(0.0, f64::max)
    }
}

/// A gray tile of the parallelogram schedule (zero-based positions).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdTile {
    /// `a[lo..lo+side) * rho[lo..lo+side)` into outputs from `2 * lo`.
    Square { lo: usize, side: usize },
    /// `a[u..2u) * rho[i-u+1..=i]` and `rho[u..2u) * a[i-u+1..=i]` into
    /// outputs from `i + 1`.
    Parallelogram { i: usize, u: usize },
}

impl DdTile {
    /// Every `(activation index, filter lag)` pair the tile adds.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        match *self {
            DdTile::Square { lo, side } => (lo..lo + side)
                .flat_map(|s| (lo..lo + side).map(move |k| (s, k)))
                .collect(),
            DdTile::Parallelogram { i, u } => {
                let mut v = Vec::with_capacity(2 * u * u);
                for s in u..2 * u {
                    for k in i + 1 - u..=i {
                        v.push((s, k));
                        v.push((k, s));
                    }
                }
                v
            }
        }
    }
}

/// Gray tiles after iteration `i >= 1`, largest first.
///
/// The leading tile uses the largest power of two `U` dividing `i + 1`
/// (halved into a square when `i + 1 = U`). Every smaller power of two
/// dividing `i + 1` contributes its own parallelogram as well; without them
/// pairs such as `(1, 3)` would never be added.
pub fn dd_tiles(i: usize) -> Vec<DdTile> {
    let j = i + 1;
    let top = j.trailing_zeros();
    let mut tiles = Vec::with_capacity(top as usize + 1);
    for k in (0..=top).rev() {
        let u = 1usize << k;
        if 2 * u == j {
            tiles.push(DdTile::Square { lo: u, side: u });
        } else if 2 * u < j {
            tiles.push(DdTile::Parallelogram { i, u });
        }
    }
    tiles
}

/// All gray tiles of a run of horizon `L` (iterations `1 ..= L - 1`).
pub fn dd_schedule(horizon: usize) -> Vec<(usize, DdTile)> {
    (1..horizon)
        .flat_map(|i| dd_tiles(i).into_iter().map(move |t| (i, t)))
        .collect()
}

struct DdState<'a> {
    config: &'a ModelConfig,
    rule: &'a dyn FilterRule,
    acts: Vec<Vec<f64>>,
    prefix: Vec<Vec<f64>>,
    rho: Vec<Vec<f64>>,
    rho_ready: Vec<Option<usize>>,
    ledger: Ledger,
}

impl<'a> DdState<'a> {
    fn new(config: &'a ModelConfig, rule: &'a dyn FilterRule, first_token: &[f64]) -> Result<Self> {
        config.validate()?;
        let (m, d, l, b) = (config.layers, config.channels, config.horizon, config.lanes);
        if first_token.len() != b * d {
            return Err(invalid(format!(
                "first token has {} values, expected B*D = {}",
                first_token.len(),
                b * d
            )));
        }
        let mut acts = vec![vec![0.0; b * l * d]; m + 1];
        for lane in 0..b {
            acts[0][lane * l * d..lane * l * d + d]
                .copy_from_slice(&first_token[lane * d..(lane + 1) * d]);
        }
        Ok(Self {
            config,
            rule,
            acts,
            prefix: vec![vec![0.0; b * l * d]; m + 1],
            rho: vec![vec![0.0; b * l * d]; m],
            rho_ready: vec![None; m],
            ledger: Ledger::new(m, d, b),
        })
    }

    fn lane_span(&self, lane: usize) -> std::ops::Range<usize> {
        let n = self.config.horizon * self.config.channels;
        lane * n..(lane + 1) * n
    }

    /// Running sums of level `level` through position `pos`.
    fn extend_prefix(&mut self, level: usize, pos: usize) {
        let d = self.config.channels;
        for lane in 0..self.config.lanes {
            let span = self.lane_span(lane);
            let (a, p) = (
                &self.acts[level][span.clone()],
                &mut self.prefix[level][span],
            );
            for c in 0..d {
                let prev = if pos == 0 { 0.0 } else { p[(pos - 1) * d + c] };
                p[pos * d + c] = prev + a[pos * d + c];
            }
        }
    }

    /// `rho_{layer, lag}` for every lane from `a_{layer-1, 0..=lag}`.
    fn reveal(&mut self, layer: usize, lag: usize) -> Result<()> {
        let d = self.config.channels;
        let mut tap = vec![0.0; d];
        for lane in 0..self.config.lanes {
            let span = self.lane_span(lane);
            let h = History::new(
                &self.acts[layer - 1][span.clone()],
                &self.prefix[layer - 1][span.clone()],
                d,
                lag,
            );
            self.rule.tap(layer, lag, &h, &mut tap);
            if let Some(pos) = h.violation() {
                return Err(Error::ContractViolation(format!(
                    "rule {:?} read position {pos} while producing lag {lag} of layer {layer}",
                    self.rule.name()
                )));
            }
            if !tap.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericFailure {
                    layer,
                    position: lag,
                });
            }
            self.rho[layer - 1][span.start + lag * d..span.start + (lag + 1) * d]
                .copy_from_slice(&tap);
        }
        self.rho_ready[layer - 1] = Some(lag);
        Ok(())
    }

    fn block(
        &mut self,
        blocks: &BlockStack,
        layer: usize,
        pos: usize,
        scratch: &mut BlockScratch,
    ) -> Result<()> {
        let d = self.config.channels;
        for lane in 0..self.config.lanes {
            let o = self.lane_span(lane).start + pos * d;
            let (lo, hi) = self.acts.split_at_mut(layer);
            let slot = &mut hi[0][o..o + d];
            blocks
                .layer(layer)
                .apply(slot, &lo[layer - 1][o..o + d], scratch);
            if !slot.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericFailure {
                    layer,
                    position: pos,
                });
            }
        }
        self.ledger.add_red();
        Ok(())
    }

    fn sample(&mut self, sampler: &mut Sampler, pos: usize) {
        let (d, m) = (self.config.channels, self.config.layers);
        let mut next = vec![0.0; d];
        for lane in 0..self.config.lanes {
            let o = self.lane_span(lane).start;
            sampler.next_token(
                pos + 1,
                lane,
                &self.acts[m][o + (pos - 1) * d..o + pos * d],
                &mut next,
            );
            self.acts[0][o + pos * d..o + (pos + 1) * d].copy_from_slice(&next);
        }
    }

    fn finish(self) -> DdRun {
        DdRun {
            activations: self.acts,
            filters: self.rho,
            ledger: self.ledger,
        }
    }
}

fn check_blocks(config: &ModelConfig, blocks: &BlockStack) -> Result<()> {
    if blocks.len() != config.layers || blocks.width() != config.channels {
        return Err(invalid("block stack does not match the configuration"));
    }
    Ok(())
}

/// Relaxed inference with data-dependent filters.
pub fn generate_data_dependent(
    config: &ModelConfig,
    rule: &dyn FilterRule,
    blocks: &BlockStack,
    sampler: &mut Sampler,
    first_token: &[f64],
) -> Result<DdRun> {
    check_blocks(config, blocks)?;
    let mut st = DdState::new(config, rule, first_token)?;
    let (m, d, l) = (config.layers, config.channels, config.horizon);
    let mut bs = BlockScratch::default();
    let mut conv = ConvScratch::default();

    // Position 0: a_{l,0} = block(a_{l-1,0} * rho_{l,0}).
    st.extend_prefix(0, 0);
    for layer in 1..=m {
        st.reveal(layer, 0)?;
        for lane in 0..config.lanes {
            let o = st.lane_span(lane).start;
            let (lo, hi) = st.acts.split_at_mut(layer);
            let (a, r) = (&lo[layer - 1][o..o + d], &st.rho[layer - 1][o..o + d]);
            for ((s, x), y) in hi[0][o..o + d].iter_mut().zip(a).zip(r) {
                *s += x * y;
            }
        }
        st.block(blocks, layer, 0, &mut bs)?;
        st.extend_prefix(layer, 0);
    }
    st.sample(sampler, 1);
    st.extend_prefix(0, 1);

    for i in 1..l {
        for layer in 1..=m {
            st.reveal(layer, i)?;
            for lane in 0..config.lanes {
                let o = st.lane_span(lane).start;
                let (lo, hi) = st.acts.split_at_mut(layer);
                let prev = &lo[layer - 1];
                let rho = &st.rho[layer - 1];
                let slot = &mut hi[0][o + i * d..o + (i + 1) * d];
                for c in 0..d {
                    slot[c] = slot[c]
                        + prev[o + i * d + c] * rho[o + c]
                        + prev[o + c] * rho[o + i * d + c];
                }
            }
            st.block(blocks, layer, i, &mut bs)?;
            st.extend_prefix(layer, i);
            st.ledger.add_madds(2 * (d * config.lanes) as u64);
            st.ledger.add_flops(4 * (d * config.lanes) as u64);
            st.ledger.add_positions(2);
            gray_step(&mut st, &mut conv, layer, i)?;
        }
        if i + 1 < l {
            st.sample(sampler, i + 1);
            st.extend_prefix(0, i + 1);
        }
    }
    Ok(st.finish())
}

#[derive(Default)]
struct ConvScratch {
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
    d: Vec<Complex64>,
}

fn gray_step(st: &mut DdState<'_>, cs: &mut ConvScratch, layer: usize, i: usize) -> Result<()> {
    for tile in dd_tiles(i) {
        apply_dd_tile(st, cs, layer, i, tile)?;
    }
    Ok(())
}

fn apply_dd_tile(
    st: &mut DdState<'_>,
    cs: &mut ConvScratch,
    layer: usize,
    i: usize,
    tile: DdTile,
) -> Result<()> {
    let (d, l) = (st.config.channels, st.config.horizon);
    let ready = st.rho_ready[layer - 1].unwrap_or(0);
    let (u, out_lo, max_rho) = match tile {
        DdTile::Square { lo, side } => (side, 2 * lo, lo + side - 1),
        DdTile::Parallelogram { i, u } => (u, i + 1, i.max(2 * u - 1)),
    };
    if max_rho > ready {
        return Err(Error::ContractViolation(format!(
            "tile at iteration {i} of layer {layer} needs lag {max_rho}, only {ready} revealed"
        )));
    }
    if out_lo >= l {
        return Ok(());
    }
    let rows = (2 * u - 1).min(l - out_lo);
    let n = 2 * u;
    let p = plan(n)?;
    for buf in [&mut cs.a, &mut cs.b, &mut cs.c, &mut cs.d] {
        buf.resize(n, Complex64::default());
    }
    let mut dfts = 0u64;
    for lane in 0..st.config.lanes {
        let o = st.lane_span(lane).start;
        let (lower, upper) = st.acts.split_at_mut(layer);
        let prev = &lower[layer - 1][o..o + l * d];
        let out = &mut upper[0][o..o + l * d];
        let rho = &st.rho[layer - 1][o..o + l * d];
        for c in 0..d {
            let load = |buf: &mut [Complex64], src: &[f64], start: usize| {
                buf.fill(Complex64::default());
                for (k, v) in buf.iter_mut().take(u).enumerate() {
                    v.re = src[(start + k) * d + c];
                }
            };
            match tile {
                DdTile::Square { lo, .. } => {
                    load(&mut cs.a, prev, lo);
                    load(&mut cs.b, rho, lo);
                    p.forward(&mut cs.a);
                    p.forward(&mut cs.b);
                    for (x, y) in cs.a.iter_mut().zip(&cs.b) {
                        *x *= y;
                    }
                    dfts += 3;
                }
                DdTile::Parallelogram { i, u } => {
                    load(&mut cs.a, prev, u);
                    load(&mut cs.b, rho, i + 1 - u);
                    load(&mut cs.c, rho, u);
                    load(&mut cs.d, prev, i + 1 - u);
                    for buf in [&mut cs.a, &mut cs.b, &mut cs.c, &mut cs.d] {
                        p.forward(buf);
                    }
                    for k in 0..n {
                        cs.a[k] = cs.a[k] * cs.b[k] + cs.c[k] * cs.d[k];
                    }
                    dfts += 5;
                }
            }
            p.inverse(&mut cs.a);
            for r in 0..rows {
                out[(out_lo + r) * d + c] += cs.a[r].re;
            }
        }
    }
    let per = dfts / (d * st.config.lanes) as u64;
    st.ledger.record_tau(layer - 1, u);
    st.ledger.add_dfts(dfts);
    st.ledger
        .add_flops((d * st.config.lanes) as u64 * (per * dft_flops(n) + 8 * n as u64));
    st.ledger.add_positions(2 * u as u64 + rows as u64);
    st.ledger.bump(
        if matches!(tile, DdTile::Square { .. }) {
            "square_tiles"
        } else {
            "parallelogram_tiles"
        },
        1,
    );
    Ok(())
}

/// Direct `O(L^2)` evaluation with filters revealed in the same causal order.
pub fn lazy_oracle_data_dependent(
    config: &ModelConfig,
    rule: &dyn FilterRule,
    blocks: &BlockStack,
    sampler: &mut Sampler,
    first_token: &[f64],
) -> Result<DdRun> {
    check_blocks(config, blocks)?;
    let mut st = DdState::new(config, rule, first_token)?;
    let (m, d, l) = (config.layers, config.channels, config.horizon);
    let mut bs = BlockScratch::default();
    st.extend_prefix(0, 0);
    for i in 0..l {
        for layer in 1..=m {
            st.reveal(layer, i)?;
            for lane in 0..config.lanes {
                let o = st.lane_span(lane).start;
                let (lo, hi) = st.acts.split_at_mut(layer);
                let prev = &lo[layer - 1];
                let rho = &st.rho[layer - 1];
                let slot = &mut hi[0][o + i * d..o + (i + 1) * d];
                for (c, s) in slot.iter_mut().enumerate() {
                    *s = (0..=i)
                        .map(|j| prev[o + j * d + c] * rho[o + (i - j) * d + c])
                        .sum();
                }
            }
            st.ledger.add_madds(((i + 1) * d * config.lanes) as u64);
            st.block(blocks, layer, i, &mut bs)?;
            st.extend_prefix(layer, i);
        }
        if i + 1 < l {
            st.sample(sampler, i + 1);
            st.extend_prefix(0, i + 1);
        }
    }
    Ok(st.finish())
}

/// Analytic FFT work of both tilings, counting an order-`n` convolution as
/// `n · log2(n)` and ignoring clipping at the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsComparison {
    pub horizon: usize,
    /// Parallelogram tiling: two order-`2u` products per parallelogram and
    /// one per square, summed over every tile of [`dd_schedule`].
    pub data_dependent: f64,
    /// Square tiling with cached kernel spectra: one order-`2U` product per
    /// iteration.
    pub data_independent: f64,
    pub ratio: f64,
}

pub fn flops_comparison(horizon: usize) -> Result<FlopsComparison> {
    crate::error::require_pow2(horizon, "horizon L")?;
    if horizon < 2 {
        return Err(invalid("horizon L must be at least 2"));
    }
    let unit = |n: usize| n as f64 * (n as f64).log2();
    let mut dd = 0.0;
    for (_, tile) in dd_schedule(horizon) {
        dd += match tile {
            DdTile::Square { side, .. } => unit(2 * side),
            DdTile::Parallelogram { u, .. } => 2.0 * unit(2 * u),
        };
    }
    let di: f64 = (1..horizon).map(|i| unit(2 << i.trailing_zeros())).sum();
    let ratio = if di == 0.0 { 1.0 } else { dd / di };
    Ok(FlopsComparison {
        horizon,
        data_dependent: dd,
        data_independent: di,
        ratio,
    })
}
