//! Activation storage: one buffer per level, lane-major `[lane][position][channel]`.
//!
//! Level 0 holds input embeddings; level `l` holds the outputs of layer `l`.
//! Before position `i` of level `l` is finalized its row is the running
//! mixer accumulator, afterwards the block output.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    pub(crate) levels: Vec<Vec<f64>>,
    layers: usize,
    lanes: usize,
    channels: usize,
    rows: usize,
    pub(crate) origin: usize,
    pub(crate) watermark: Vec<usize>,
}

impl ActivationStore {
    /// Storage for positions `origin + 1 ..= origin + rows`.
    pub(crate) fn new(
        layers: usize,
        lanes: usize,
        channels: usize,
        rows: usize,
        origin: usize,
    ) -> Self {
        Self {
            levels: vec![vec![0.0; lanes * rows * channels]; layers + 1],
            layers,
            lanes,
            channels,
            rows,
            origin,
            watermark: vec![origin; layers + 1],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of stored positions.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn first_position(&self) -> usize {
        self.origin + 1
    }

    pub fn last_position(&self) -> usize {
        self.origin + self.rows
    }

    /// Highest finalized position of `level`.
    pub fn watermark(&self, level: usize) -> usize {
        self.watermark[level]
    }

    /// Elements held by the activation buffers.
    pub fn elements(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    #[inline]
    pub(crate) fn offset(&self, lane: usize, pos: usize) -> usize {
        debug_assert!(
            pos > self.origin && pos <= self.origin + self.rows,
            "position {pos}"
        );
        (lane * self.rows + pos - self.origin - 1) * self.channels
    }

    /// Embedding at one-based `pos` of `level` for `lane`.
    pub fn get(&self, level: usize, lane: usize, pos: usize) -> &[f64] {
        let o = self.offset(lane, pos);
        &self.levels[level][o..o + self.channels]
    }

    pub(crate) fn get_mut(&mut self, level: usize, lane: usize, pos: usize) -> &mut [f64] {
        let o = self.offset(lane, pos);
        &mut self.levels[level][o..o + self.channels]
    }

    /// Raw buffer of one level.
    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    /// All levels and lanes at positions `lo ..= hi`, flattened in
    /// `(level, lane, position, channel)` order.
    pub fn positions(&self, lo: usize, hi: usize) -> Result<Vec<f64>> {
        if lo < self.first_position() || hi > self.last_position() || lo > hi {
            return Err(invalid(format!(
                "positions {lo}..={hi} outside stored range {}..={}",
                self.first_position(),
                self.last_position()
            )));
        }
        let mut out =
            Vec::with_capacity((self.layers + 1) * self.lanes * (hi - lo + 1) * self.channels);
        for level in 0..=self.layers {
            for lane in 0..self.lanes {
                let a = self.offset(lane, lo);
                let b = self.offset(lane, hi) + self.channels;
                out.extend_from_slice(&self.levels[level][a..b]);
            }
        }
        Ok(out)
    }
}

/// `max|x - y| / max(max|y|, 1e-12)`.
pub fn relative_error(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "relative_error on different lengths");
    let mut diff = 0.0f64;
    for (a, b) in x.iter().zip(y) {
        let e = (a - b).abs();
        if e.is_nan() {
            return f64::INFINITY;
        }
        diff = diff.max(e);
    }
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    diff / scale.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_ranges() {
        let mut s = ActivationStore::new(1, 2, 3, 4, 4);
        assert_eq!(s.first_position(), 5);
        assert_eq!(s.last_position(), 8);
        s.get_mut(1, 1, 6).copy_from_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(s.level(1)[(4 + 1) * 3..(4 + 2) * 3], [1.0, 2.0, 3.0]);
        assert_eq!(s.positions(6, 6).unwrap().len(), 2 * 2 * 3);
        assert!(s.positions(4, 6).is_err());
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.5], &[1.0, 2.0]) - 0.25).abs() < 1e-15);
        assert!(relative_error(&[f64::NAN], &[1.0]).is_infinite());
    }
}
