//! Multi-layer autoregressive inference.
//!
//! Each iteration `i` runs the red chain (same-position filter tap, then the
//! block) up through the layers, samples the next input, and applies the
//! gray tile of side `U(i)` to every layer. Gray work of different layers
//! touches disjoint memory, so it can run concurrently without changing a
//! single floating-point operation.

pub mod blocks;
pub mod sampler;
pub mod store;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{invalid, require_pow2, Error, Result};
use crate::fft::{linear_convolve, KernelDftCache};
use crate::filters::FilterBank;
use crate::instrumentation::{dft_flops, BenchRecord, Ledger};
use crate::relaxed::gray_tile;
use crate::tau::{apply_tile, DispatchTable, LayerFilter, TauImplKind, TauScratch, TileTask};

pub use blocks::{Block, BlockKind, BlockScratch, BlockStack, Gate, Mlp};
pub use sampler::{Sampler, SamplerSpec};
pub use store::{relative_error, ActivationStore};

/// Absolute-tap mass of seeded filters; keeps the echo loop bounded.
pub const DEFAULT_FILTER_GAIN: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub channels: usize,
    pub horizon: usize,
    pub lanes: usize,
    pub block_kinds: Vec<BlockKind>,
    pub seed: u64,
}

impl ModelConfig {
    /// All-MLP configuration.
    pub fn new(layers: usize, channels: usize, horizon: usize, lanes: usize, seed: u64) -> Self {
        Self {
            layers,
            channels,
            horizon,
            lanes,
            block_kinds: vec![BlockKind::Mlp; layers],
            seed,
        }
    }

    /// MLP, GATE, MLP, ...
    pub fn alternating(mut self) -> Self {
        self.block_kinds = (0..self.layers)
            .map(|l| {
                if l % 2 == 0 {
                    BlockKind::Mlp
                } else {
                    BlockKind::Gate
                }
            })
            .collect();
        self
    }

    pub fn with_block_kinds(mut self, kinds: Vec<BlockKind>) -> Self {
        self.block_kinds = kinds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.lanes == 0 {
            return Err(invalid(format!(
                "M, D and B must be positive (got M={}, D={}, B={})",
                self.layers, self.channels, self.lanes
            )));
        }
        require_pow2(self.horizon, "horizon L")?;
        if self.horizon < 2 {
            return Err(invalid("horizon L must be at least 2"));
        }
        if self.block_kinds.len() != self.layers {
            return Err(invalid(format!(
                "{} block kinds given for {} layers",
                self.block_kinds.len(),
                self.layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    LayerParallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Lazy,
    Eager,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: ExecMode,
    pub table: DispatchTable,
    /// Tiles wider than this run layer by layer even in layer-parallel mode.
    pub max_parallel_tile: Option<usize>,
    /// Run layer tasks one after another on the calling thread.
    pub deterministic: bool,
    /// Record the ledger and per-token timings.
    pub instrument: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: ExecMode::Sequential,
            table: DispatchTable::default(),
            max_parallel_tile: None,
            deterministic: false,
            instrument: true,
        }
    }
}

impl RunOptions {
    pub fn with_table(table: DispatchTable) -> Self {
        Self {
            table,
            ..Self::default()
        }
    }

    pub fn layer_parallel(mut self) -> Self {
        self.mode = ExecMode::LayerParallel;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TokenTiming {
    pub position: usize,
    /// Gray tile side at this iteration; 0 when there is none.
    pub tile_side: usize,
    pub mixer: Duration,
    pub block: Duration,
    pub total: Duration,
    pub flops_cumulative: u64,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub store: ActivationStore,
    pub ledger: Ledger,
    pub tokens: Vec<TokenTiming>,
}

impl Generation {
    pub fn mixer_time(&self) -> Duration {
        self.tokens.iter().map(|t| t.mixer).sum()
    }

    pub fn total_time(&self) -> Duration {
        self.tokens.iter().map(|t| t.total).sum()
    }

    pub fn bench_records(&self, run_id: &str, mode: &str, impl_name: &str) -> Vec<BenchRecord> {
        let s = &self.store;
        self.tokens
            .iter()
            .map(|t| BenchRecord {
                run_id: run_id.to_string(),
                mode: mode.to_string(),
                impl_name: impl_name.to_string(),
                lanes: s.lanes(),
                layers: s.layers(),
                channels: s.channels(),
                horizon: s.last_position(),
                token_index: t.position,
                tile_side: t.tile_side,
                mixer_duration: t.mixer.as_nanos() as u64,
                block_duration: t.block.as_nanos() as u64,
                total_duration: t.total.as_nanos() as u64,
                flops_cumulative: t.flops_cumulative,
            })
            .collect()
    }
}

/// Result of the half-activation mode: positions `L/2 + 1 ..= L` only.
#[derive(Debug, Clone)]
pub struct HalfGeneration {
    pub store: ActivationStore,
    pub ledger: Ledger,
    pub tokens: Vec<TokenTiming>,
    /// Peak auxiliary elements live while the largest tile was processed.
    pub big_tile_scratch: usize,
}

/// Activations primed through the prompt.
#[derive(Debug, Clone)]
pub struct PrefillState {
    pub store: ActivationStore,
    pub prompt_len: usize,
    pub ledger: Ledger,
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    filters: FilterBank,
    cols: Vec<f64>,
    blocks: BlockStack,
    cache: OnceLock<KernelDftCache>,
}

impl Model {
    pub fn new(config: ModelConfig, filters: FilterBank, blocks: BlockStack) -> Result<Self> {
        config.validate()?;
        if filters.layers() != config.layers || filters.channels() != config.channels {
            return Err(invalid(format!(
                "filter bank is {}x{} (layers x channels), config wants {}x{}",
                filters.layers(),
                filters.channels(),
                config.layers,
                config.channels
            )));
        }
        if filters.taps() < config.horizon {
            return Err(invalid(format!(
                "filters have {} taps, horizon is {}",
                filters.taps(),
                config.horizon
            )));
        }
        if blocks.len() != config.layers || blocks.width() != config.channels {
            return Err(invalid("block stack does not match the configuration"));
        }
        let cols = filters.to_channel_major();
        Ok(Self {
            config,
            filters,
            cols,
            blocks,
            cache: OnceLock::new(),
        })
    }

    /// Seeded filters (gain [`DEFAULT_FILTER_GAIN`]) and blocks.
    pub fn seeded(config: ModelConfig) -> Result<Self> {
        Self::seeded_with_gain(config, DEFAULT_FILTER_GAIN)
    }

    pub fn seeded_with_gain(config: ModelConfig, gain: f64) -> Result<Self> {
        config.validate()?;
        let filters = FilterBank::seeded(
            config.layers,
            config.horizon,
            config.channels,
            config.seed,
            gain,
        );
        let blocks = BlockStack::seeded(&config.block_kinds, config.channels, config.seed);
        Self::new(config, filters, blocks)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn filters(&self) -> &FilterBank {
        &self.filters
    }

    pub fn blocks(&self) -> &BlockStack {
        &self.blocks
    }

    /// Cached filter-prefix spectra, built on first use.
    pub fn cache(&self) -> Result<&KernelDftCache> {
        if let Some(c) = self.cache.get() {
            return Ok(c);
        }
        let built = KernelDftCache::build(&self.filters, self.config.horizon)?;
        Ok(self.cache.get_or_init(|| built))
    }

    /// Filters of one-based layer `layer` for the batched kernels.
    pub(crate) fn layer_filter<'a>(
        &'a self,
        layer: usize,
        cache: Option<&'a KernelDftCache>,
    ) -> LayerFilter<'a> {
        let taps = self.filters.taps();
        let d = self.config.channels;
        LayerFilter {
            rows: self.filters.layer(layer - 1),
            cols: &self.cols[(layer - 1) * d * taps..][..d * taps],
            taps,
            width: d,
            cache,
            layer: layer - 1,
            channel_base: 0,
        }
    }

    fn check_first_token(&self, first_token: &[f64]) -> Result<()> {
        let want = self.config.lanes * self.config.channels;
        if first_token.len() != want {
            return Err(invalid(format!(
                "first token has {} values, expected B*D = {want}",
                first_token.len()
            )));
        }
        Ok(())
    }

    fn needs_cache(&self, op: GrayOp<'_>, horizon: usize) -> bool {
        matches!(op, GrayOp::Relaxed(t) if t.kinds_for_horizon(horizon).contains(&TauImplKind::FftCyclicCached))
    }

    /// Relaxed generation of positions `1 ..= L`.
    pub fn generate(
        &self,
        sampler: &mut Sampler,
        first_token: &[f64],
        opts: &RunOptions,
    ) -> Result<Generation> {
        self.generate_with(sampler, first_token, GrayOp::Relaxed(&opts.table), opts)
    }

    /// Lazy or eager quadratic baseline with the same red chain and sampler.
    pub fn generate_baseline(
        &self,
        sampler: &mut Sampler,
        first_token: &[f64],
        strategy: Baseline,
        opts: &RunOptions,
    ) -> Result<Generation> {
        let op = match strategy {
            Baseline::Lazy => GrayOp::Lazy,
            Baseline::Eager => GrayOp::Eager,
        };
        self.generate_with(sampler, first_token, op, opts)
    }

    fn generate_with(
        &self,
        sampler: &mut Sampler,
        first_token: &[f64],
        op: GrayOp<'_>,
        opts: &RunOptions,
    ) -> Result<Generation> {
        self.check_first_token(first_token)?;
        let c = &self.config;
        let mut run = Run::new(
            self,
            ActivationStore::new(c.layers, c.lanes, c.channels, c.horizon, 0),
            opts,
            op,
        )?;
        for lane in 0..c.lanes {
            run.store
                .get_mut(0, lane, 1)
                .copy_from_slice(&first_token[lane * c.channels..(lane + 1) * c.channels]);
        }
        run.store.watermark[0] = 1;
        for i in 1..=c.horizon {
            run.iteration(i, 0, sampler, true)?;
        }
        Ok(run.finish())
    }

    /// Fill positions `1 ..= P` from a known prompt (lane-major
    /// `[lane][position][channel]`) and push every prompt contribution into
    /// the accumulators of positions `P + 1 ..= L`.
    pub fn prefill(&self, prompt: &[f64], prompt_len: usize) -> Result<PrefillState> {
        let c = &self.config;
        if prompt_len >= c.horizon {
            return Err(invalid(format!(
                "prompt length {prompt_len} must be below the horizon {}",
                c.horizon
            )));
        }
        if prompt.len() != c.lanes * prompt_len * c.channels {
            return Err(invalid(format!(
                "prompt has {} values, expected B*P*D = {}",
                prompt.len(),
                c.lanes * prompt_len * c.channels
            )));
        }
        let (l, d, p) = (c.horizon, c.channels, prompt_len);
        let mut store = ActivationStore::new(c.layers, c.lanes, d, l, 0);
        let mut ledger = Ledger::new(c.layers, d, c.lanes);
        if p == 0 {
            return Ok(PrefillState {
                store,
                prompt_len: 0,
                ledger,
            });
        }
        for lane in 0..c.lanes {
            for pos in 1..=p {
                let src = &prompt[(lane * p + pos - 1) * d..][..d];
                store.get_mut(0, lane, pos).copy_from_slice(src);
            }
        }
        store.watermark[0] = p;
        let mut column = vec![0.0; p];
        let mut bscratch = BlockScratch::default();
        let mut prev_row = vec![0.0; d];
        for layer in 1..=c.layers {
            for lane in 0..c.lanes {
                for ch in 0..d {
                    for (pos, v) in column.iter_mut().enumerate() {
                        *v = store.get(layer - 1, lane, pos + 1)[ch];
                    }
                    let rho = &self.cols[((layer - 1) * d + ch) * self.filters.taps()..][..l];
                    let conv = linear_convolve(&column, rho)?;
                    for pos in 1..=l {
                        store.get_mut(layer, lane, pos)[ch] += conv[pos - 1];
                    }
                    let n = (p + l - 1).next_power_of_two();
                    ledger.add_flops(3 * dft_flops(n) + 6 * n as u64);
                    ledger.add_dfts(3);
                }
                for pos in 1..=p {
                    prev_row.copy_from_slice(store.get(layer - 1, lane, pos));
                    let slot = store.get_mut(layer, lane, pos);
                    self.blocks
                        .layer(layer)
                        .apply(slot, &prev_row, &mut bscratch);
                    if !slot.iter().all(|v| v.is_finite()) {
                        return Err(Error::NumericFailure {
                            layer,
                            position: pos,
                        });
                    }
                }
            }
            ledger.add_positions((p + l) as u64);
            store.watermark[layer] = p;
        }
        Ok(PrefillState {
            store,
            prompt_len: p,
            ledger,
        })
    }

    /// Continue relaxed generation after [`Model::prefill`]. The sampler
    /// produces position `P + 1` from the prompt's last top-level output.
    pub fn resume(
        &self,
        state: PrefillState,
        sampler: &mut Sampler,
        opts: &RunOptions,
    ) -> Result<Generation> {
        let p = state.prompt_len;
        if p == 0 {
            return Err(invalid(
                "resume needs a non-empty prefill; use generate for P = 0",
            ));
        }
        let op = GrayOp::Relaxed(&opts.table);
        let mut run = Run::new(self, state.store, opts, op)?;
        run.ledger.merge(&state.ledger);
        run.sample(p, sampler)?;
        for i in p + 1..=self.config.horizon {
            run.iteration(i, p, sampler, true)?;
        }
        Ok(run.finish())
    }

    /// Relaxed generation holding only `L/2` positions per level.
    ///
    /// The first half runs normally. At `i = L/2` the largest tile is applied
    /// layer by layer, one channel column at a time, writing each layer's
    /// tile output over its own input level; the levels are then shifted up
    /// by one so that level `l` holds the second-half accumulators of layer
    /// `l`. The second half then runs at origin `L/2`.
    pub fn generate_half_memory(
        &self,
        sampler: &mut Sampler,
        first_token: &[f64],
        opts: &RunOptions,
    ) -> Result<HalfGeneration> {
        self.check_first_token(first_token)?;
        let c = &self.config;
        let (l, d, half) = (c.horizon, c.channels, c.horizon / 2);
        let op = GrayOp::Relaxed(&opts.table);
        let mut run = Run::new(
            self,
            ActivationStore::new(c.layers, c.lanes, d, half, 0),
            opts,
            op,
        )?;
        for lane in 0..c.lanes {
            run.store
                .get_mut(0, lane, 1)
                .copy_from_slice(&first_token[lane * d..(lane + 1) * d]);
        }
        run.store.watermark[0] = 1;
        for i in 1..half {
            run.iteration(i, 0, sampler, true)?;
        }

        // i = L/2: red chain, then sample position L/2 + 1 aside.
        let t0 = Instant::now();
        let (mixer, block) = run.red_chain(half)?;
        let mut next = vec![0.0; c.lanes * d];
        for lane in 0..c.lanes {
            let last = run.store.get(c.layers, lane, half);
            sampler.next_token(half + 1, lane, last, &mut next[lane * d..(lane + 1) * d]);
        }

        let t1 = Instant::now();
        let kind = opts.table.lookup(half);
        let cache = if kind == TauImplKind::FftCyclicCached {
            Some(self.cache()?)
        } else {
            None
        };
        let task = TileTask::square(half, half);
        let mut scratch = TauScratch::default();
        let mut col_in = vec![0.0; half];
        let mut col_out = vec![0.0; half];
        let mut peak = 0usize;
        let taps = self.filters.taps();
        for layer in 1..=c.layers {
            for lane in 0..c.lanes {
                for ch in 0..d {
                    let column = &self.cols[((layer - 1) * d + ch) * taps..][..taps];
                    let filt = LayerFilter {
                        rows: column,
                        cols: column,
                        taps,
                        width: 1,
                        cache,
                        layer: layer - 1,
                        channel_base: ch,
                    };
                    let buf = &mut run.store.levels[layer - 1][lane * half * d..][..half * d];
                    for (pos, v) in col_in.iter_mut().enumerate() {
                        *v = buf[pos * d + ch];
                    }
                    col_out.fill(0.0);
                    let cost = apply_tile(kind, &filt, &task, &col_in, &mut col_out, &mut scratch)?;
                    for (pos, v) in col_out.iter().enumerate() {
                        buf[pos * d + ch] = *v;
                    }
                    run.ledger.add_flops(cost.flops);
                    run.ledger.add_dfts(cost.dfts);
                    peak = peak.max(scratch.elements() + col_in.len() + col_out.len() + next.len());
                }
            }
            run.ledger.record_tau(layer - 1, half);
            run.ledger.add_positions(2 * half as u64);
        }
        run.ledger.observe_scratch(peak);
        let store = &mut run.store;
        store.levels.rotate_right(1);
        store.levels[0].fill(0.0);
        store.origin = half;
        for w in store.watermark.iter_mut() {
            *w = half;
        }
        for lane in 0..c.lanes {
            store
                .get_mut(0, lane, half + 1)
                .copy_from_slice(&next[lane * d..(lane + 1) * d]);
        }
        store.watermark[0] = half + 1;
        let gray = t1.elapsed();
        run.push_token(half, half, mixer + gray, block, t0.elapsed());

        for i in half + 1..=l {
            run.iteration(i, 0, sampler, true)?;
        }
        let g = run.finish();
        Ok(HalfGeneration {
            store: g.store,
            ledger: g.ledger,
            tokens: g.tokens,
            big_tile_scratch: peak,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum GrayOp<'t> {
    Relaxed(&'t DispatchTable),
    Lazy,
    Eager,
}

#[derive(Debug, Default, Clone, Copy)]
struct GrayCost {
    flops: u64,
    dfts: u64,
    madds: u64,
    positions: u64,
}

struct Run<'m> {
    model: &'m Model,
    store: ActivationStore,
    ledger: Ledger,
    tokens: Vec<TokenTiming>,
    scratch: Vec<TauScratch>,
    bscratch: BlockScratch,
    cache: Option<&'m KernelDftCache>,
    op: GrayOp<'m>,
    opts: &'m RunOptions,
}

impl<'m> Run<'m> {
    fn new(
        model: &'m Model,
        store: ActivationStore,
        opts: &'m RunOptions,
        op: GrayOp<'m>,
    ) -> Result<Self> {
        let c = &model.config;
        let cache = if model.needs_cache(op, c.horizon) {
            Some(model.cache()?)
        } else {
            None
        };
        let ledger = if opts.instrument {
            Ledger::new(c.layers, c.channels, c.lanes)
        } else {
            Ledger::disabled()
        };
        Ok(Self {
            model,
            store,
            ledger,
            tokens: Vec::new(),
            scratch: (0..c.layers).map(|_| TauScratch::default()).collect(),
            bscratch: BlockScratch::default(),
            cache,
            op,
            opts,
        })
    }

    fn finish(self) -> Generation {
        Generation {
            store: self.store,
            ledger: self.ledger,
            tokens: self.tokens,
        }
    }

    fn push_token(
        &mut self,
        position: usize,
        tile_side: usize,
        mixer: Duration,
        block: Duration,
        total: Duration,
    ) {
        if self.opts.instrument {
            self.tokens.push(TokenTiming {
                position,
                tile_side,
                mixer,
                block,
                total,
                flops_cumulative: self.ledger.flops,
            });
        }
    }

    /// Red chain, sampling and gray work of iteration `i`; the gray tile is
    /// taken from the schedule started after position `origin`.
    fn iteration(
        &mut self,
        i: usize,
        origin: usize,
        sampler: &mut Sampler,
        sample: bool,
    ) -> Result<()> {
        let t0 = Instant::now();
        let (mixer, block) = self.red_chain(i)?;
        if sample && i < self.store.last_position() {
            self.sample(i, sampler)?;
        }
        let t1 = Instant::now();
        let side = self.gray(i, origin)?;
        let gray = t1.elapsed();
        self.push_token(i, side, mixer + gray, block, t0.elapsed());
        Ok(())
    }

    fn red_chain(&mut self, i: usize) -> Result<(Duration, Duration)> {
        let model = self.model;
        let c = &model.config;
        let d = c.channels;
        let timed = self.opts.instrument;
        let (mut mixer, mut block) = (Duration::ZERO, Duration::ZERO);
        for layer in 1..=c.layers {
            let rho0 = &model.filters.layer(layer - 1)[..d];
            let blk = model.blocks.layer(layer);
            let row = self.store.offset(0, i);
            let stride = self.store.rows() * d;
            let (lo, hi) = self.store.levels.split_at_mut(layer);
            let (prev, cur) = (&lo[layer - 1], &mut hi[0]);
            for lane in 0..c.lanes {
                let o = row + lane * stride;
                let a = &prev[o..o + d];
                let slot = &mut cur[o..o + d];
                let t = timed.then(Instant::now);
                for ((s, &x), &r) in slot.iter_mut().zip(a).zip(rho0) {
                    *s += x * r;
                }
                let t2 = timed.then(Instant::now);
                blk.apply(slot, a, &mut self.bscratch);
                if let (Some(t), Some(t2)) = (t, t2) {
                    mixer += t2 - t;
                    block += t2.elapsed();
                }
                if !slot.iter().all(|v| v.is_finite()) {
                    return Err(Error::NumericFailure { layer, position: i });
                }
            }
            self.store.watermark[layer] = i;
            self.ledger.add_red();
            self.ledger.add_madds((d * c.lanes) as u64);
            self.ledger.add_flops(2 * (d * c.lanes) as u64);
            self.ledger.add_positions(2);
        }
        Ok((mixer, block))
    }

    /// Write position `i + 1` of level 0 from the top level at `i`.
    fn sample(&mut self, i: usize, sampler: &mut Sampler) -> Result<()> {
        let c = &self.model.config;
        let d = c.channels;
        let mut next = vec![0.0; d];
        for lane in 0..c.lanes {
            sampler.next_token(i + 1, lane, self.store.get(c.layers, lane, i), &mut next);
            self.store.get_mut(0, lane, i + 1).copy_from_slice(&next);
        }
        self.store.watermark[0] = i + 1;
        Ok(())
    }

    /// Gray work of iteration `i` for every layer. Returns the tile side.
    fn gray(&mut self, i: usize, origin: usize) -> Result<usize> {
        let model = self.model;
        let c = &model.config;
        let last = self.store.last_position();
        let horizon = c.horizon;
        if i >= horizon || i >= last {
            return Ok(0);
        }
        let (task, side) = match self.op {
            GrayOp::Relaxed(_) => match gray_tile(i, origin, horizon) {
                Some(t) => (Some(t), t.src_len()),
                None => return Ok(0),
            },
            GrayOp::Lazy | GrayOp::Eager => (None, 1),
        };
        if let Some(t) = task {
            for layer in 1..=c.layers {
                if self.store.watermark[layer - 1] < t.src_hi {
                    return Err(Error::ContractViolation(format!(
                        "tile {t} of layer {layer} reads level {} beyond its finalized position {}",
                        layer - 1,
                        self.store.watermark[layer - 1]
                    )));
                }
            }
        }

        let d = c.channels;
        let store_origin = self.store.origin;
        let split = (i - store_origin) * d;
        let stride = self.store.rows() * d;
        let mut prefixes: Vec<Vec<&[f64]>> = Vec::with_capacity(c.layers + 1);
        let mut suffixes: Vec<Vec<&mut [f64]>> = Vec::with_capacity(c.layers + 1);
        for level in self.store.levels.iter_mut() {
            let mut pre = Vec::with_capacity(c.lanes);
            let mut suf = Vec::with_capacity(c.lanes);
            for lane in level.chunks_exact_mut(stride) {
                let (a, b) = lane.split_at_mut(split);
                pre.push(&*a);
                suf.push(b);
            }
            prefixes.push(pre);
            suffixes.push(suf);
        }
        let jobs: Vec<LayerJob<'_>> = prefixes
            .into_iter()
            .zip(suffixes.into_iter().skip(1))
            .zip(self.scratch.iter_mut())
            .enumerate()
            .map(|(k, ((src, dst), scratch))| LayerJob {
                layer: k + 1,
                src,
                dst,
                scratch,
            })
            .collect();

        let ctx = GrayCtx {
            model,
            op: self.op,
            cache: self.cache,
            task,
            i,
            store_origin,
            horizon: horizon.min(last),
        };
        let parallel = self.opts.mode == ExecMode::LayerParallel
            && !self.opts.deterministic
            && c.layers > 1
            && self.opts.max_parallel_tile.is_none_or(|cap| side <= cap);
        let costs: Vec<GrayCost> = if parallel {
            jobs.into_par_iter()
                .map(|job| ctx.run(job))
                .collect::<Result<_>>()?
        } else {
            jobs.into_iter()
                .map(|job| ctx.run(job))
                .collect::<Result<_>>()?
        };

        let scratch_live: Vec<usize> = self.scratch.iter().map(TauScratch::elements).collect();
        let live = if parallel {
            scratch_live.iter().sum()
        } else {
            scratch_live.iter().copied().max().unwrap_or(0)
        };
        self.ledger.observe_scratch(live);
        for (k, cost) in costs.iter().enumerate() {
            if task.is_some() {
                self.ledger.record_tau(k, side);
            }
            self.ledger.add_flops(cost.flops);
            self.ledger.add_dfts(cost.dfts);
            self.ledger.add_madds(cost.madds);
            self.ledger.add_positions(cost.positions);
        }
        Ok(if task.is_some() { side } else { 0 })
    }
}

struct LayerJob<'a> {
    layer: usize,
    /// Per lane: rows of the input level up to and including position `i`.
    src: Vec<&'a [f64]>,
    /// Per lane: rows of the output level after position `i`.
    dst: Vec<&'a mut [f64]>,
    scratch: &'a mut TauScratch,
}

struct GrayCtx<'a> {
    model: &'a Model,
    op: GrayOp<'a>,
    cache: Option<&'a KernelDftCache>,
    task: Option<TileTask>,
    i: usize,
    store_origin: usize,
    horizon: usize,
}

impl GrayCtx<'_> {
    fn run(&self, job: LayerJob<'_>) -> Result<GrayCost> {
        let d = self.model.config.channels;
        let lanes = job.src.len() as u64;
        let i = self.i;
        let mut cost = GrayCost::default();
        match self.op {
            GrayOp::Relaxed(table) => {
                let task = self.task.expect("relaxed gray step has a tile");
                let side = task.src_len();
                let kind = table.lookup(side);
                let filt = self.model.layer_filter(job.layer, self.cache);
                let rows = task.dst_hi.min(self.horizon) - i;
                let a = (task.src_lo - self.store_origin - 1) * d;
                let b = (task.src_hi - self.store_origin) * d;
                for (src, dst) in job.src.iter().zip(job.dst) {
                    let c = apply_tile(
                        kind,
                        &filt,
                        &task,
                        &src[a..b],
                        &mut dst[..rows * d],
                        job.scratch,
                    )?;
                    cost.flops += c.flops;
                    cost.dfts += c.dfts;
                }
                cost.positions = (side + rows) as u64;
            }
            GrayOp::Lazy => {
                // Full strip a_{l-1, 1..=i} into the accumulator at i + 1.
                let rho = self.model.filters.layer(job.layer - 1);
                let t = i + 1;
                let mut acc = vec![0.0; d];
                for (src, dst) in job.src.iter().zip(job.dst) {
                    acc.fill(0.0);
                    for j in 1..=i {
                        let y = &src[(j - 1) * d..j * d];
                        let r = &rho[(t - j) * d..(t - j + 1) * d];
                        for ((s, &yv), &rv) in acc.iter_mut().zip(y).zip(r) {
                            *s += yv * rv;
                        }
                    }
                    for (o, v) in dst[..d].iter_mut().zip(&acc) {
                        *o += *v;
                    }
                }
                cost.madds = i as u64 * d as u64 * lanes;
                cost.flops = 2 * cost.madds;
                cost.positions = i as u64 + 1;
            }
            GrayOp::Eager => {
                // a_{l-1, i} into every later accumulator.
                let rho = self.model.filters.layer(job.layer - 1);
                let n = self.horizon - i;
                for (src, dst) in job.src.iter().zip(job.dst) {
                    let y = &src[(i - 1) * d..i * d];
                    for k in 1..=n {
                        let r = &rho[k * d..(k + 1) * d];
                        for ((o, &yv), &rv) in dst[(k - 1) * d..k * d].iter_mut().zip(y).zip(r) {
                            *o += yv * rv;
                        }
                    }
                }
                cost.madds = n as u64 * d as u64 * lanes;
                cost.flops = 2 * cost.madds;
                cost.positions = n as u64 + 1;
            }
        }
        Ok(cost)
    }
}
