//! Position-wise blocks applied after each mixer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Mlp,
    Gate,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Gate => "gate",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlp" => Ok(Self::Mlp),
            "gate" => Ok(Self::Gate),
            other => Err(Error::Parse(format!("unknown block kind {other:?}"))),
        }
    }
}

/// Added to the mean square before the square root. At this size the norm is
/// close to the identity for small inputs and bounds large ones, so the
/// echo feedback loop does not amplify rounding differences.
const RMS_EPS: f64 = 1.0;

#[inline]
fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

/// Residual MLP with a soft RMS pre-norm:
/// `x + W2 · gelu(W1 · x / sqrt(1 + ms(x)) + b1) + b2`, hidden width `2D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    width: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Mlp {
    pub fn new(
        width: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let h = 2 * width;
        if width == 0
            || w1.len() != h * width
            || b1.len() != h
            || w2.len() != width * h
            || b2.len() != width
        {
            return Err(invalid(format!("MLP weights do not match width {width}")));
        }
        Ok(Self {
            width,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn seeded<R: Rng>(width: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("positive std");
        let h = 2 * width;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        Self {
            width,
            w1: draw(h * width),
            w2: draw(width * h),
            b1: draw(h),
            b2: draw(width),
        }
    }

    /// Output equals input exactly: the residual branch is all zeros.
    pub fn identity(width: usize) -> Self {
        let h = 2 * width;
        Self {
            width,
            w1: vec![0.0; h * width],
            b1: vec![0.0; h],
            w2: vec![0.0; width * h],
            b2: vec![0.0; width],
        }
    }

    fn apply(&self, x: &mut [f64], s: &mut BlockScratch) {
        let d = self.width;
        let h = 2 * d;
        let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        s.norm.clear();
        s.norm.extend(x.iter().map(|v| v * inv));
        s.hidden.clear();
        s.hidden.extend((0..h).map(|k| {
            let row = &self.w1[k * d..(k + 1) * d];
            gelu(row.iter().zip(&s.norm).map(|(w, v)| w * v).sum::<f64>() + self.b1[k])
        }));
        for (c, out) in x.iter_mut().enumerate() {
            let row = &self.w2[c * h..(c + 1) * h];
            *out += row.iter().zip(&s.hidden).map(|(w, v)| w * v).sum::<f64>() + self.b2[c];
        }
    }
}

/// `b ⊙ (W · a_prev + c)` where `a_prev` is the mixer input at the same
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    width: usize,
    w: Vec<f64>,
    c: Vec<f64>,
}

impl Gate {
    pub fn new(width: usize, w: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if width == 0 || w.len() != width * width || c.len() != width {
            return Err(invalid(format!("gate weights do not match width {width}")));
        }
        Ok(Self { width, w, c })
    }

    pub fn seeded<R: Rng>(width: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("positive std");
        Self {
            width,
            w: (0..width * width).map(|_| normal.sample(rng)).collect(),
            c: vec![1.0; width],
        }
    }

    fn apply(&self, x: &mut [f64], prev: &[f64]) {
        let d = self.width;
        for (k, out) in x.iter_mut().enumerate() {
            let row = &self.w[k * d..(k + 1) * d];
            *out *= row.iter().zip(prev).map(|(w, v)| w * v).sum::<f64>() + self.c[k];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Mlp(Mlp),
    Gate(Gate),
}

/// Temporaries reused across block applications.
#[derive(Debug, Default, Clone)]
pub struct BlockScratch {
    norm: Vec<f64>,
    hidden: Vec<f64>,
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Self::Mlp(_) => BlockKind::Mlp,
            Self::Gate(_) => BlockKind::Gate,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Self::Mlp(m) => m.width,
            Self::Gate(g) => g.width,
        }
    }

    /// Replace the mixer output `x` by the block output. `prev` is the
    /// previous level's activation at the same position.
    pub fn apply(&self, x: &mut [f64], prev: &[f64], scratch: &mut BlockScratch) {
        match self {
            Self::Mlp(m) => m.apply(x, scratch),
            Self::Gate(g) => g.apply(x, prev),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockStack {
    blocks: Vec<Block>,
}

impl BlockStack {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(invalid("a block stack needs at least one block"));
        };
        let w = first.width();
        if blocks.iter().any(|b| b.width() != w) {
            return Err(invalid("all blocks must share one width"));
        }
        Ok(Self { blocks })
    }

    /// Gaussian weights, std `1/sqrt(D)`, drawn from `seed`.
    pub fn seeded(kinds: &[BlockKind], width: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 3);
        let blocks = kinds
            .iter()
            .map(|k| match k {
                BlockKind::Mlp => Block::Mlp(Mlp::seeded(width, &mut rng)),
                BlockKind::Gate => Block::Gate(Gate::seeded(width, &mut rng)),
            })
            .collect();
        Self { blocks }
    }

    pub fn identity(layers: usize, width: usize) -> Self {
        Self {
            blocks: (0..layers)
                .map(|_| Block::Mlp(Mlp::identity(width)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn width(&self) -> usize {
        self.blocks[0].width()
    }

    /// Block of one-based layer `layer`.
    pub fn layer(&self, layer: usize) -> &Block {
        &self.blocks[layer - 1]
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(Block::kind).collect()
    }
}
