//! Per-layer, per-channel convolution filters.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::rng::stream_rng;

/// Filter taps `rho[layer, k, channel]`, row-major in `(layer, k, channel)`.
///
/// Tap `k = 0` multiplies the same-position input.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    layers: usize,
    taps: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn new(layers: usize, taps: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if layers == 0 || taps == 0 || channels == 0 {
            return Err(invalid("filter bank dimensions must be positive"));
        }
        if data.len() != layers * taps * channels {
            return Err(invalid(format!(
                "filter data has {} values, expected {layers}x{taps}x{channels}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite filter tap at flat index {pos}"
            )));
        }
        Ok(Self {
            layers,
            taps,
            channels,
            data,
        })
    }

    pub fn zeros(layers: usize, taps: usize, channels: usize) -> Self {
        Self {
            layers,
            taps,
            channels,
            data: vec![0.0; layers * taps * channels],
        }
    }

    /// Identity filters: `rho[., 0, .] = 1`, every other tap zero.
    pub fn delta(layers: usize, taps: usize, channels: usize) -> Self {
        let mut bank = Self::zeros(layers, taps, channels);
        for layer in 0..layers {
            for c in 0..channels {
                bank.set(layer, 0, c, 1.0);
            }
        }
        bank
    }

    /// Seeded decaying Gaussian filters.
    ///
    /// Each (layer, channel) draws a decay horizon log-uniformly in
    /// `[1, taps]` and is rescaled so that the absolute taps sum to `gain`.
    pub fn seeded(layers: usize, taps: usize, channels: usize, seed: u64, gain: f64) -> Self {
        let mut rng = stream_rng(seed, 1);
        let mut bank = Self::zeros(layers, taps, channels);
        let max_log = (taps as f64).ln();
        let mut column = vec![0.0; taps];
        for layer in 0..layers {
            for c in 0..channels {
                let horizon = (rng.random::<f64>() * max_log).exp();
                for (k, v) in column.iter_mut().enumerate() {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *v = g * (-(k as f64) / horizon).exp();
                }
                let norm: f64 = column.iter().map(|v| v.abs()).sum();
                let scale = if norm > 0.0 { gain / norm } else { 0.0 };
                for (k, v) in column.iter().enumerate() {
                    bank.set(layer, k, c, v * scale);
                }
            }
        }
        bank
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn tap(&self, layer: usize, k: usize, channel: usize) -> f64 {
        self.data[(layer * self.taps + k) * self.channels + channel]
    }

    pub fn set(&mut self, layer: usize, k: usize, channel: usize, value: f64) {
        self.data[(layer * self.taps + k) * self.channels + channel] = value;
    }

    /// Row-major `taps x channels` block of one layer.
    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.data[layer * self.taps * self.channels..][..self.taps * self.channels]
    }

    pub fn channel_column(&self, layer: usize, channel: usize) -> Vec<f64> {
        (0..self.taps)
            .map(|k| self.tap(layer, k, channel))
            .collect()
    }

    /// Copy in `(layer, channel, k)` order, so each channel's taps are contiguous.
    pub fn to_channel_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for layer in 0..self.layers {
            for c in 0..self.channels {
                out.extend((0..self.taps).map(|k| self.tap(layer, k, c)));
            }
        }
        out
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Raw little-endian f64 values in `(layer, k, channel)` order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(
        bytes: &[u8],
        layers: usize,
        taps: usize,
        channels: usize,
    ) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(invalid(format!(
                "raw filter file length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|chunk| f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(layers, taps, channels, data)
    }

    pub fn read_raw(path: &Path, layers: usize, taps: usize, channels: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_le_bytes(&bytes, layers, taps, channels)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_le_bytes())?;
        Ok(())
    }
}
