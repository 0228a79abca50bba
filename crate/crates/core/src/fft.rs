//! Radix-2 complex FFT, cyclic and linear convolution, and the per-tile
//! cache of filter-prefix spectra.
//!
//! Orders are restricted to powers of two. Plans (bit-reversal table plus
//! per-stage twiddles) are built once per order and shared through a global
//! read-mostly cache; a plan is immutable after construction.

use std::cell::Cell;
use std::sync::{Arc, OnceLock, RwLock};

use num_complex::Complex64;

use crate::error::{invalid, require_pow2, Error, Result};
use crate::filters::FilterBank;

thread_local! {
    static DFT_INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward or inverse transforms executed on the calling thread.
pub fn dft_invocations() -> u64 {
    DFT_INVOCATIONS.with(|c| c.get())
}

fn bump_dft_counter() {
    DFT_INVOCATIONS.with(|c| c.set(c.get() + 1));
}

/// Precomputed tables for one transform order.
#[derive(Debug)]
pub struct FftPlan {
    order: usize,
    rev: Vec<u32>,
    // Stage with butterfly span `m` stores its m/2 twiddles at offset m/2 - 1.
    twiddles: Vec<Complex64>,
}

impl FftPlan {
    pub fn new(order: usize) -> Result<Self> {
        require_pow2(order, "FFT order")?;
        let bits = order.trailing_zeros();
        let rev = (0..order as u32)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (32 - bits)
                }
            })
            .collect();
        let mut twiddles = Vec::with_capacity(order.saturating_sub(1));
        let mut m = 2;
        while m <= order {
            for k in 0..m / 2 {
                let angle = -2.0 * std::f64::consts::PI * k as f64 / m as f64;
                twiddles.push(Complex64::new(angle.cos(), angle.sin()));
            }
            m <<= 1;
        }
        Ok(Self {
            order,
            rev,
            twiddles,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// In-place forward transform (no normalization).
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    /// In-place inverse transform, scaled by 1/order.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
        let scale = 1.0 / self.order as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        assert_eq!(buf.len(), self.order, "buffer length must equal plan order");
        bump_dft_counter();
        let n = self.order;
        for i in 0..n {
            let j = self.rev[i] as usize;
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut m = 2;
        while m <= n {
            let half = m / 2;
            let tw = &self.twiddles[half - 1..half - 1 + half];
            for block in buf.chunks_exact_mut(m) {
                let (lo, hi) = block.split_at_mut(half);
                for ((a, b), w) in lo.iter_mut().zip(hi.iter_mut()).zip(tw) {
                    let w = if inverse { w.conj() } else { *w };
                    let t = *b * w;
                    *b = *a - t;
                    *a += t;
                }
            }
            m <<= 1;
        }
    }
}

type PlanSlots = RwLock<Vec<Option<Arc<FftPlan>>>>;

fn plan_slots() -> &'static PlanSlots {
    static SLOTS: OnceLock<PlanSlots> = OnceLock::new();
    SLOTS.get_or_init(|| RwLock::new(vec![None; 64]))
}

/// Shared plan for `order`, built on first use.
pub fn plan(order: usize) -> Result<Arc<FftPlan>> {
    require_pow2(order, "FFT order")?;
    let idx = order.trailing_zeros() as usize;
    if let Some(p) = plan_slots().read().expect("plan cache poisoned")[idx].as_ref() {
        return Ok(Arc::clone(p));
    }
    let built = Arc::new(FftPlan::new(order)?);
    let mut slots = plan_slots().write().expect("plan cache poisoned");
    Ok(Arc::clone(slots[idx].get_or_insert(built)))
}

/// The DFT of a sequence at a power-of-two order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<Complex64>,
}

impl Spectrum {
    pub fn from_values(values: Vec<Complex64>) -> Result<Self> {
        require_pow2(values.len(), "spectrum order")?;
        Ok(Self { values })
    }

    pub fn order(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }
}

/// Forward DFT of `x`, zero-extended to `order`.
pub fn forward_dft(x: &[Complex64], order: usize) -> Result<Spectrum> {
    require_pow2(order, "DFT order")?;
    if x.len() > order {
        return Err(invalid(format!(
            "input of length {} does not fit order {order}",
            x.len()
        )));
    }
    let mut values = vec![Complex64::default(); order];
    values[..x.len()].copy_from_slice(x);
    plan(order)?.forward(&mut values);
    Ok(Spectrum { values })
}

/// Forward DFT of a real sequence.
pub fn forward_dft_real(x: &[f64], order: usize) -> Result<Spectrum> {
    let cx: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    forward_dft(&cx, order)
}

/// Inverse DFT including the 1/order normalization.
pub fn inverse_dft(s: &Spectrum) -> Vec<Complex64> {
    let mut values = s.values.clone();
    plan(s.order())
        .expect("spectrum order is a power of two")
        .inverse(&mut values);
    values
}

/// Cyclic convolution of order `n`: `c[k] = sum_j a[j] * b[(k - j) mod n]`.
pub fn cyclic_convolve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    require_pow2(n, "cyclic convolution order")?;
    if a.len() > n || b.len() > n {
        return Err(invalid(format!(
            "operands of length {} and {} exceed order {n}",
            a.len(),
            b.len()
        )));
    }
    Ok(convolve_at_order(a, b, n))
}

/// Full linear convolution, length `|a| + |b| - 1`.
pub fn linear_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("linear convolution operands must be nonempty"));
    }
    let out_len = a.len() + b.len() - 1;
    let mut c = convolve_at_order(a, b, out_len.next_power_of_two());
    c.truncate(out_len);
    Ok(c)
}

fn convolve_at_order(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let p = plan(n).expect("order checked by caller");
    let mut fa = vec![Complex64::default(); n];
    let mut fb = vec![Complex64::default(); n];
    for (dst, &v) in fa.iter_mut().zip(a) {
        dst.re = v;
    }
    for (dst, &v) in fb.iter_mut().zip(b) {
        dst.re = v;
    }
    p.forward(&mut fa);
    p.forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    p.inverse(&mut fa);
    fa.into_iter().map(|c| c.re).collect()
}

/// Spectra of filter prefixes `rho[0 .. 2U]` at order `2U`, for every tile
/// side `U` in `1, 2, 4, .., L/2` and every (layer, channel).
#[derive(Debug, Clone)]
pub struct KernelDftCache {
    horizon: usize,
    layers: usize,
    channels: usize,
    // Indexed by log2(U); each holds layers * channels spectra of order 2U.
    per_side: Vec<Vec<Complex64>>,
}

impl KernelDftCache {
    pub fn build(filters: &FilterBank, horizon: usize) -> Result<Self> {
        require_pow2(horizon, "horizon L")?;
        if filters.taps() < horizon {
            return Err(invalid(format!(
                "filters have {} taps, horizon {horizon} requires at least that many",
                filters.taps()
            )));
        }
        let layers = filters.layers();
        let channels = filters.channels();
        let mut per_side = Vec::new();
        let mut side = 1;
        while side <= horizon / 2 {
            let order = 2 * side;
            let p = plan(order)?;
            let mut spectra = vec![Complex64::default(); layers * channels * order];
            for layer in 0..layers {
                for c in 0..channels {
                    let slot = &mut spectra[(layer * channels + c) * order..][..order];
                    for (k, v) in slot.iter_mut().enumerate() {
                        *v = Complex64::new(filters.tap(layer, k, c), 0.0);
                    }
                    p.forward(slot);
                }
            }
            per_side.push(spectra);
            side <<= 1;
        }
        Ok(Self {
            horizon,
            layers,
            channels,
            per_side,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Cached tile sides, ascending.
    pub fn sides(&self) -> Vec<usize> {
        (0..self.per_side.len()).map(|q| 1usize << q).collect()
    }

    /// Spectrum of `rho[layer, 0 .. 2*side, channel]` at order `2*side`.
    pub fn get(&self, layer: usize, channel: usize, side: usize) -> Result<&[Complex64]> {
        if !side.is_power_of_two() {
            return Err(invalid(format!("tile side {side} is not a power of two")));
        }
        let q = side.trailing_zeros() as usize;
        let spectra = self.per_side.get(q).ok_or_else(|| {
            Error::Precondition(format!(
                "no cached kernel spectrum for side {side} (horizon {})",
                self.horizon
            ))
        })?;
        if layer >= self.layers || channel >= self.channels {
            return Err(invalid(format!(
                "(layer {layer}, channel {channel}) outside cache shape {}x{}",
                self.layers, self.channels
            )));
        }
        let order = 2 * side;
        Ok(&spectra[(layer * self.channels + channel) * order..][..order])
    }

    /// Cached spectrum as an owned [`Spectrum`].
    pub fn spectrum(&self, layer: usize, channel: usize, side: usize) -> Result<Spectrum> {
        Ok(Spectrum {
            values: self.get(layer, channel, side)?.to_vec(),
        })
    }
}
