//! Contribution-based mixers and generic relaxed inference.
//!
//! A mixer is described by a per-pair contribution `cont(y, i, j)`, an
//! associative aggregator `agg` with a neutral element, and a readout
//! `read`. Inference then needs only a black-box range algorithm that
//! aggregates the contributions of an input range to an output range.
//!
//! To add a mixer, implement [`MixerSpec`] (and optionally a faster
//! [`RangeAlgorithm`]; [`DirectRange`] works for any spec) and pass one
//! [`GenericLayer`] per layer to [`generic_generate`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::engine::{Block, BlockScratch, Model, Sampler};
use crate::error::{invalid, Error, Result};
use crate::fft::KernelDftCache;
use crate::instrumentation::Ledger;
use crate::relaxed::gray_tile;
use crate::rng::stream_rng;
use crate::tau::{apply_tile, DispatchTable, TauImplKind, TauScratch, TileCost, TileTask};

/// A position mixer in contribution form.
///
/// Inputs `y` are row-major, one row of [`MixerSpec::input_width`] values per
/// position, with position `p` (one-based) in row `p - 1`.
pub trait MixerSpec: Sync {
    fn name(&self) -> &str;
    fn input_width(&self) -> usize;
    fn state_width(&self) -> usize;
    fn neutral(&self) -> Vec<f64>;
    /// `out = agg(left, right)`; `left` aggregates earlier inputs.
    fn agg(&self, left: &[f64], right: &[f64], out: &mut [f64]);
    /// Contribution of input `i` to output `j`, `i <= j`.
    fn cont(&self, y: &[f64], i: usize, j: usize, out: &mut [f64]);
    fn read(&self, state: &[f64], out: &mut [f64]);

    /// Left fold of `agg` over `states`, starting from the neutral element.
    fn agg_all(&self, states: &[&[f64]]) -> Vec<f64> {
        let mut acc = self.neutral();
        let mut tmp = vec![0.0; acc.len()];
        for s in states {
            self.agg(&acc, s, &mut tmp);
            std::mem::swap(&mut acc, &mut tmp);
        }
        acc
    }
}

/// Black-box `A(y, [l, r], [l', r'])`: for each `p` in the output range,
/// the aggregate of `cont(y, l, p), .., cont(y, r, p)`.
pub trait RangeAlgorithm: Sync {
    fn name(&self) -> &str;
    /// Write the first `out.len() / state_width` output states (clipped
    /// ranges write fewer rows than `dst_len`).
    fn apply(
        &self,
        spec: &dyn MixerSpec,
        y: &[f64],
        task: &TileTask,
        out: &mut [f64],
        scratch: &mut TauScratch,
    ) -> Result<TileCost>;
    /// Declared cost `T(L1, L2)` in FLOPs.
    fn declared_cost(&self, l1: usize, l2: usize) -> f64;
}

/// Fold of `cont` in input order. Works for every spec.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectRange;

impl RangeAlgorithm for DirectRange {
    fn name(&self) -> &str {
        "direct"
    }

    fn apply(
        &self,
        spec: &dyn MixerSpec,
        y: &[f64],
        task: &TileTask,
        out: &mut [f64],
        _scratch: &mut TauScratch,
    ) -> Result<TileCost> {
        let sw = spec.state_width();
        let mut c = vec![0.0; sw];
        let mut tmp = vec![0.0; sw];
        let rows = out.len() / sw;
        for (r, state) in out.chunks_exact_mut(sw).enumerate() {
            let p = task.dst_lo + r;
            state.copy_from_slice(&spec.neutral());
            for i in task.src_lo..=task.src_hi {
                spec.cont(y, i, p, &mut c);
                spec.agg(state, &c, &mut tmp);
                state.copy_from_slice(&tmp);
            }
        }
        Ok(TileCost {
            flops: 2 * (task.src_len() * rows * sw) as u64,
            dfts: 0,
        })
    }

    fn declared_cost(&self, l1: usize, l2: usize) -> f64 {
        2.0 * (l1 * l2) as f64
    }
}

/// LCSM mixer of one model layer: `cont(y, i, j) = y_i ⊙ rho_{j-i}`,
/// `agg = +`, `read = id`.
#[derive(Debug, Clone)]
pub struct LcsmMixer {
    width: usize,
    /// `taps x width`, row-major.
    rho: Vec<f64>,
}

impl LcsmMixer {
    pub fn new(width: usize, rho: Vec<f64>) -> Result<Self> {
        if width == 0 || rho.is_empty() || !rho.len().is_multiple_of(width) {
            return Err(invalid("LCSM filter must be taps x width"));
        }
        Ok(Self { width, rho })
    }

    pub fn from_model(model: &Model, layer: usize) -> Self {
        Self {
            width: model.config().channels,
            rho: model.filters().layer(layer - 1).to_vec(),
        }
    }
}

impl MixerSpec for LcsmMixer {
    fn name(&self) -> &str {
        "lcsm"
    }

    fn input_width(&self) -> usize {
        self.width
    }

    fn state_width(&self) -> usize {
        self.width
    }

    fn neutral(&self) -> Vec<f64> {
        vec![0.0; self.width]
    }

    fn agg(&self, left: &[f64], right: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(left).zip(right) {
            *o = a + b;
        }
    }

    fn cont(&self, y: &[f64], i: usize, j: usize, out: &mut [f64]) {
        let d = self.width;
        let row = &y[(i - 1) * d..i * d];
        let rho = &self.rho[(j - i) * d..(j - i + 1) * d];
        for ((o, a), r) in out.iter_mut().zip(row).zip(rho) {
            *o = a * r;
        }
    }

    fn read(&self, state: &[f64], out: &mut [f64]) {
        out.copy_from_slice(state);
    }
}

/// Cost constant of [`LcsmFftRange::declared_cost`].
pub const FFT_RANGE_COST_CONSTANT: f64 = 16.0;

/// τ-backed range algorithm for one layer of a [`Model`].
#[derive(Debug, Clone, Copy)]
pub struct LcsmFftRange<'a> {
    model: &'a Model,
    layer: usize,
    table: &'a DispatchTable,
    cache: Option<&'a KernelDftCache>,
}

impl<'a> LcsmFftRange<'a> {
    pub fn new(model: &'a Model, layer: usize, table: &'a DispatchTable) -> Result<Self> {
        if layer == 0 || layer > model.config().layers {
            return Err(invalid(format!("layer {layer} out of range")));
        }
        let cache = if table
            .kinds_for_horizon(model.config().horizon)
            .contains(&TauImplKind::FftCyclicCached)
        {
            Some(model.cache()?)
        } else {
            None
        };
        Ok(Self {
            model,
            layer,
            table,
            cache,
        })
    }
}

impl RangeAlgorithm for LcsmFftRange<'_> {
    fn name(&self) -> &str {
        "lcsm_tau"
    }

    fn apply(
        &self,
        _spec: &dyn MixerSpec,
        y: &[f64],
        task: &TileTask,
        out: &mut [f64],
        scratch: &mut TauScratch,
    ) -> Result<TileCost> {
        let d = self.model.config().channels;
        let kind = self.table.lookup(task.src_len());
        let filt = self.model.layer_filter(self.layer, self.cache);
        out.fill(0.0);
        apply_tile(
            kind,
            &filt,
            task,
            &y[(task.src_lo - 1) * d..task.src_hi * d],
            out,
            scratch,
        )
    }

    /// `c · D · (L1 + L2) · log2(L1 + L2)`.
    fn declared_cost(&self, l1: usize, l2: usize) -> f64 {
        let n = (l1 + l2) as f64;
        FFT_RANGE_COST_CONSTANT * self.model.config().channels as f64 * n * n.log2()
    }
}

/// One layer of a generic model.
pub struct GenericLayer<'a> {
    pub mixer: &'a dyn MixerSpec,
    pub range: &'a dyn RangeAlgorithm,
    pub block: &'a Block,
}

#[derive(Debug, Clone)]
pub struct GenericRun {
    /// Levels `0 ..= M`, each `L x D` row-major.
    pub activations: Vec<Vec<f64>>,
    pub ledger: Ledger,
}

#[derive(Debug, Clone, Copy)]
pub struct GenericOptions {
    pub horizon: usize,
    pub layer_parallel: bool,
    /// Samples for the pre-run associativity / query-independence checks.
    pub check_samples: usize,
    pub seed: u64,
}

impl GenericOptions {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            layer_parallel: false,
            check_samples: 32,
            seed: 0,
        }
    }
}

/// Relaxed inference for any contribution-form mixer stack, one lane.
///
/// The ledger's τ histogram counts range-algorithm calls; counters `cont`,
/// `agg`, `read` and `block` count the per-position red-step operations and
/// `flops_layer_<l>` the range-algorithm FLOPs of layer `l`.
pub fn generic_generate(
    layers: &[GenericLayer<'_>],
    sampler: &mut Sampler,
    first_token: &[f64],
    opts: &GenericOptions,
) -> Result<GenericRun> {
    let l = opts.horizon;
    crate::error::require_pow2(l, "horizon L")?;
    if l < 2 || layers.is_empty() {
        return Err(invalid(
            "generic inference needs L >= 2 and at least one layer",
        ));
    }
    let d = first_token.len();
    for (k, layer) in layers.iter().enumerate() {
        if layer.mixer.input_width() != d || layer.block.width() != d {
            return Err(invalid(format!(
                "layer {} width does not match the first token",
                k + 1
            )));
        }
        let a = verify_associativity(layer.mixer, opts.check_samples, opts.seed);
        if !a.passed {
            return Err(Error::ContractViolation(format!(
                "layer {} mixer {:?} fails associativity: {}",
                k + 1,
                layer.mixer.name(),
                a.detail
            )));
        }
        let q = verify_query_independence(layer.mixer, opts.check_samples, opts.seed);
        if !q.passed {
            return Err(Error::ContractViolation(format!(
                "layer {} mixer {:?} is not query independent: {}",
                k + 1,
                layer.mixer.name(),
                q.detail
            )));
        }
    }

    let m = layers.len();
    let mut acts = vec![vec![0.0; l * d]; m + 1];
    let mut states: Vec<Vec<f64>> = layers
        .iter()
        .map(|layer| layer.mixer.neutral().repeat(l))
        .collect();
    let mut scratch: Vec<TauScratch> = (0..m).map(|_| TauScratch::default()).collect();
    let mut ledger = Ledger::new(m, 1, 1);
    let mut bscratch = BlockScratch::default();
    acts[0][..d].copy_from_slice(first_token);

    for i in 1..=l {
        for (k, layer) in layers.iter().enumerate() {
            let spec = layer.mixer;
            let sw = spec.state_width();
            let mut c = vec![0.0; sw];
            spec.cont(&acts[k], i, i, &mut c);
            let slot = &mut states[k][(i - 1) * sw..i * sw];
            let mut merged = vec![0.0; sw];
            spec.agg(slot, &c, &mut merged);
            slot.copy_from_slice(&merged);
            let (lo, hi) = acts.split_at_mut(k + 1);
            let out = &mut hi[0][(i - 1) * d..i * d];
            spec.read(slot, out);
            layer
                .block
                .apply(out, &lo[k][(i - 1) * d..i * d], &mut bscratch);
            if !out.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericFailure {
                    layer: k + 1,
                    position: i,
                });
            }
            ledger.bump("cont", 1);
            ledger.bump("agg", 1);
            ledger.bump("read", 1);
            ledger.bump("block", 1);
            ledger.add_red();
        }
        if i < l {
            let mut next = vec![0.0; d];
            sampler.next_token(i + 1, 0, &acts[m][(i - 1) * d..i * d], &mut next);
            acts[0][i * d..(i + 1) * d].copy_from_slice(&next);
        }

        let Some(task) = gray_tile(i, 0, l) else {
            continue;
        };
        let side = task.src_len();
        let acts_ref = &acts;
        let work =
            |(k, (state, scratch)): (usize, (&mut Vec<f64>, &mut TauScratch))| -> Result<TileCost> {
                let layer = &layers[k];
                let spec = layer.mixer;
                let sw = spec.state_width();
                let mut part = vec![0.0; side * sw];
                let cost =
                    layer
                        .range
                        .apply(spec, &acts_ref[k][..i * d], &task, &mut part, scratch)?;
                let mut merged = vec![0.0; sw];
                for (r, contrib) in part.chunks_exact(sw).enumerate() {
                    let p = task.dst_lo + r;
                    let slot = &mut state[(p - 1) * sw..p * sw];
                    spec.agg(slot, contrib, &mut merged);
                    slot.copy_from_slice(&merged);
                }
                Ok(cost)
            };
        let costs: Vec<TileCost> = if opts.layer_parallel {
            states
                .par_iter_mut()
                .zip(scratch.par_iter_mut())
                .enumerate()
                .map(work)
                .collect::<Result<_>>()?
        } else {
            states
                .iter_mut()
                .zip(scratch.iter_mut())
                .enumerate()
                .map(work)
                .collect::<Result<_>>()?
        };
        for (k, cost) in costs.iter().enumerate() {
            ledger.record_tau(k, side);
            ledger.add_flops(cost.flops);
            ledger.add_dfts(cost.dfts);
            ledger.bump(&format!("flops_layer_{}", k + 1), cost.flops);
            ledger.add_positions(2 * side as u64);
        }
    }
    Ok(GenericRun {
        activations: acts,
        ledger,
    })
}

/// LCSM instantiation of a [`Model`]: per-layer mixers and τ-backed ranges.
pub fn lcsm_components<'a>(
    model: &'a Model,
    table: &'a DispatchTable,
) -> Result<(Vec<LcsmMixer>, Vec<LcsmFftRange<'a>>)> {
    let m = model.config().layers;
    let mixers = (1..=m).map(|l| LcsmMixer::from_model(model, l)).collect();
    let ranges = (1..=m)
        .map(|l| LcsmFftRange::new(model, l, table))
        .collect::<Result<_>>()?;
    Ok((mixers, ranges))
}

/// Upper bound on one layer's range-algorithm FLOPs over a full run:
/// `sum_q 2^(P-1-q) · T(2^q, 2^q)`.
pub fn declared_layer_budget(range: &dyn RangeAlgorithm, horizon: usize) -> f64 {
    let p = horizon.trailing_zeros();
    (0..p)
        .map(|q| (1u64 << (p - 1 - q)) as f64 * range.declared_cost(1 << q, 1 << q))
        .sum()
}

/// Direct evaluation of `read(agg(cont(y, 1, i), .., cont(y, i, i)))` for
/// every `i`, a single layer on fixed inputs.
pub fn direct_mixer_output(spec: &dyn MixerSpec, y: &[f64], horizon: usize) -> Vec<f64> {
    let sw = spec.state_width();
    let d = spec.input_width();
    let mut out = vec![0.0; horizon * d];
    let mut c = vec![0.0; sw];
    let mut tmp = vec![0.0; sw];
    for i in 1..=horizon {
        let mut state = spec.neutral();
        for j in 1..=i {
            spec.cont(y, j, i, &mut c);
            spec.agg(&state, &c, &mut tmp);
            state.copy_from_slice(&tmp);
        }
        spec.read(&state, &mut out[(i - 1) * d..i * d]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub passed: bool,
    /// Counterexample or violation description; empty on success.
    pub detail: String,
}

const CHECK_TOL: f64 = 1e-9;

fn differs(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .any(|(x, y)| !((x - y).abs() <= CHECK_TOL * (1.0 + x.abs().max(y.abs()))))
}

/// Random triples of states: both bracketings must agree, and the neutral
/// element must be a two-sided identity.
pub fn verify_associativity(spec: &dyn MixerSpec, samples: usize, seed: u64) -> CheckReport {
    let sw = spec.state_width();
    let mut rng = stream_rng(seed, 5);
    let mut draw = || -> Vec<f64> { (0..sw).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let neutral = spec.neutral();
    let (mut xy, mut l, mut yz, mut r) =
        (vec![0.0; sw], vec![0.0; sw], vec![0.0; sw], vec![0.0; sw]);
    for _ in 0..samples.max(1) {
        let (x, y, z) = (draw(), draw(), draw());
        spec.agg(&x, &y, &mut xy);
        spec.agg(&xy, &z, &mut l);
        spec.agg(&y, &z, &mut yz);
        spec.agg(&x, &yz, &mut r);
        if differs(&l, &r) {
            return CheckReport {
                passed: false,
                detail: format!("x={x:?} y={y:?} z={z:?}: (x.y).z={l:?} but x.(y.z)={r:?}"),
            };
        }
        spec.agg(&x, &neutral, &mut l);
        spec.agg(&neutral, &x, &mut r);
        if differs(&l, &x) || differs(&r, &x) {
            return CheckReport {
                passed: false,
                detail: format!("neutral element is not an identity for x={x:?}"),
            };
        }
    }
    CheckReport {
        passed: true,
        detail: String::new(),
    }
}

/// Perturb every input after `i` and require `cont(y, i, j)` to stay put.
pub fn verify_query_independence(spec: &dyn MixerSpec, samples: usize, seed: u64) -> CheckReport {
    const LEN: usize = 16;
    let d = spec.input_width();
    let sw = spec.state_width();
    let mut rng = stream_rng(seed, 6);
    let (mut before, mut after) = (vec![0.0; sw], vec![0.0; sw]);
    for _ in 0..samples.max(1) {
        let mut y: Vec<f64> = (0..LEN * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let i = rng.random_range(1..LEN);
        let j = rng.random_range(i + 1..=LEN);
        spec.cont(&y, i, j, &mut before);
        for v in &mut y[i * d..] {
            *v += rng.random_range(0.5..1.5);
        }
        spec.cont(&y, i, j, &mut after);
        if differs(&before, &after) {
            return CheckReport {
                passed: false,
                detail: format!("cont(y, {i}, {j}) changed after perturbing inputs beyond {i}"),
            };
        }
    }
    CheckReport {
        passed: true,
        detail: String::new(),
    }
}

/// Compare a range algorithm against [`DirectRange`] on random small tiles.
pub fn verify_range_algorithm(
    spec: &dyn MixerSpec,
    range: &dyn RangeAlgorithm,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let d = spec.input_width();
    let sw = spec.state_width();
    let mut rng = stream_rng(seed, 7);
    let mut scratch = TauScratch::default();
    for _ in 0..samples.max(1) {
        let y: Vec<f64> = (0..horizon * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let i = rng.random_range(1..horizon);
        let side = 1usize << i.trailing_zeros();
        let task = TileTask::square(i, side);
        let rows = side.min(horizon - i);
        let mut want = vec![0.0; rows * sw];
        let mut got = vec![0.0; rows * sw];
        DirectRange.apply(spec, &y, &task, &mut want, &mut scratch)?;
        range.apply(spec, &y, &task, &mut got, &mut scratch)?;
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if want
            .iter()
            .zip(&got)
            .any(|(a, b)| (a - b).abs() > 1e-9 * scale)
        {
            return Ok(CheckReport {
                passed: false,
                detail: format!(
                    "range {:?} disagrees with the direct fold on tile {task}",
                    range.name()
                ),
            });
        }
    }
    Ok(CheckReport {
        passed: true,
        detail: String::new(),
    })
}

/// Softmax attention in contribution form. State: `(sum_i w_i v_i, sum_i w_i)`
/// with `w_i = exp(q_j · k_i / sqrt(D))`. The weight depends on the query at
/// `j`, so it is not query independent.
#[derive(Debug, Clone)]
pub struct AttentionMixer {
    width: usize,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

impl AttentionMixer {
    pub fn seeded(width: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 8);
        let normal = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("positive std");
        let mut draw = || -> Vec<f64> {
            (0..width * width)
                .map(|_| normal.sample(&mut rng))
                .collect()
        };
        Self {
            width,
            wq: draw(),
            wk: draw(),
            wv: draw(),
        }
    }

    fn project(w: &[f64], x: &[f64], d: usize) -> Vec<f64> {
        (0..d)
            .map(|r| {
                w[r * d..(r + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

impl MixerSpec for AttentionMixer {
    fn name(&self) -> &str {
        "attention"
    }

    fn input_width(&self) -> usize {
        self.width
    }

    fn state_width(&self) -> usize {
        self.width + 1
    }

    fn neutral(&self) -> Vec<f64> {
        vec![0.0; self.width + 1]
    }

    fn agg(&self, left: &[f64], right: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(left).zip(right) {
            *o = a + b;
        }
    }

    fn cont(&self, y: &[f64], i: usize, j: usize, out: &mut [f64]) {
        let d = self.width;
        let q = Self::project(&self.wq, &y[(j - 1) * d..j * d], d);
        let k = Self::project(&self.wk, &y[(i - 1) * d..i * d], d);
        let v = Self::project(&self.wv, &y[(i - 1) * d..i * d], d);
        let w = (q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).exp();
        for (o, x) in out.iter_mut().zip(&v) {
            *o = w * x;
        }
        out[d] = w;
    }

    fn read(&self, state: &[f64], out: &mut [f64]) {
        let d = self.width;
        let den = state[d];
        for (o, s) in out.iter_mut().zip(&state[..d]) {
            *o = if den != 0.0 { s / den } else { 0.0 };
        }
    }
}

/// Scalar mixer whose `agg` is subtraction. Not associative.
#[derive(Debug, Clone, Copy, Default)]
pub struct SubtractionMixer;

impl MixerSpec for SubtractionMixer {
    fn name(&self) -> &str {
        "subtraction"
    }

    fn input_width(&self) -> usize {
        1
    }

    fn state_width(&self) -> usize {
        1
    }

    fn neutral(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn agg(&self, left: &[f64], right: &[f64], out: &mut [f64]) {
        out[0] = left[0] - right[0];
    }

    fn cont(&self, y: &[f64], i: usize, _j: usize, out: &mut [f64]) {
        out[0] = y[i - 1];
    }

    fn read(&self, state: &[f64], out: &mut [f64]) {
        out[0] = state[0];
    }
}

/// `cont(y, i, j) = w_{j-i} · y_i` with one weight sequence shared by all
/// channels.
#[derive(Debug, Clone)]
pub struct WeightedCumsum {
    width: usize,
    weights: Vec<f64>,
}

impl WeightedCumsum {
    pub fn new(width: usize, weights: Vec<f64>) -> Self {
        Self { width, weights }
    }
}

impl MixerSpec for WeightedCumsum {
    fn name(&self) -> &str {
        "weighted_cumsum"
    }

    fn input_width(&self) -> usize {
        self.width
    }

    fn state_width(&self) -> usize {
        self.width
    }

    fn neutral(&self) -> Vec<f64> {
        vec![0.0; self.width]
    }

    fn agg(&self, left: &[f64], right: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(left).zip(right) {
            *o = a + b;
        }
    }

    fn cont(&self, y: &[f64], i: usize, j: usize, out: &mut [f64]) {
        let d = self.width;
        let w = self.weights[j - i];
        for (o, x) in out.iter_mut().zip(&y[(i - 1) * d..i * d]) {
            *o = w * x;
        }
    }

    fn read(&self, state: &[f64], out: &mut [f64]) {
        out.copy_from_slice(state);
    }
}

/// Every contribution is the same fixed vector.
#[derive(Debug, Clone)]
pub struct ConstantMixer {
    value: Vec<f64>,
}

impl ConstantMixer {
    pub fn new(value: Vec<f64>) -> Self {
        Self { value }
    }
}

impl MixerSpec for ConstantMixer {
    fn name(&self) -> &str {
        "constant"
    }

    fn input_width(&self) -> usize {
        self.value.len()
    }

    fn state_width(&self) -> usize {
        self.value.len()
    }

    fn neutral(&self) -> Vec<f64> {
        vec![0.0; self.value.len()]
    }

    fn agg(&self, left: &[f64], right: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(left).zip(right) {
            *o = a + b;
        }
    }

    fn cont(&self, _y: &[f64], _i: usize, _j: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.value);
    }

    fn read(&self, state: &[f64], out: &mut [f64]) {
        out.copy_from_slice(state);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Mlp;

    #[test]
    fn associativity_fixtures() {
        assert!(verify_associativity(&LcsmMixer::new(2, vec![1.0; 8]).unwrap(), 50, 1).passed);
        assert!(verify_associativity(&AttentionMixer::seeded(3, 1), 50, 1).passed);
        let sub = verify_associativity(&SubtractionMixer, 50, 1);
        assert!(!sub.passed);
        assert!(!sub.detail.is_empty());
    }

    #[test]
    fn query_independence_fixtures() {
        assert!(
            verify_query_independence(&LcsmMixer::new(2, vec![0.5; 32]).unwrap(), 50, 2).passed
        );
        assert!(verify_query_independence(&ConstantMixer::new(vec![1.0, 2.0]), 50, 2).passed);
        assert!(!verify_query_independence(&AttentionMixer::seeded(3, 2), 50, 2).passed);
    }

    #[test]
    fn agg_all_folds_left() {
        let s = SubtractionMixer;
        assert_eq!(s.agg_all(&[&[5.0], &[2.0], &[1.0]]), vec![-8.0]);
        let c = ConstantMixer::new(vec![1.0]);
        assert_eq!(c.agg_all(&[]), vec![0.0]);
    }

    #[test]
    fn rejects_failing_specs_before_generation() {
        let block = Block::Mlp(Mlp::identity(1));
        let layer = GenericLayer {
            mixer: &SubtractionMixer,
            range: &DirectRange,
            block: &block,
        };
        let err = generic_generate(
            &[layer],
            &mut Sampler::echo(),
            &[1.0],
            &GenericOptions::new(8),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn cumsum_matches_direct_evaluation() {
        let l = 64;
        let w: Vec<f64> = (0..l).map(|k| 0.9f64.powi(k as i32)).collect();
        let spec = WeightedCumsum::new(2, w);
        let block = Block::Mlp(Mlp::identity(2));
        let layer = GenericLayer {
            mixer: &spec,
            range: &DirectRange,
            block: &block,
        };
        let run = generic_generate(
            &[layer],
            &mut Sampler::echo(),
            &[0.5, -0.25],
            &GenericOptions::new(l),
        )
        .unwrap();
        let want = direct_mixer_output(&spec, &run.activations[0], l);
        let e = crate::engine::relative_error(&run.activations[1], &want);
        assert!(e < 1e-9, "{e}");
        let h = run.ledger.layer_histogram(0);
        assert_eq!(h.values().sum::<u64>(), (l - 1) as u64);
        assert_eq!(run.ledger.counter("cont"), l as u64);
    }
}
