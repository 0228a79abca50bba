//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use flash_lcsm::engine::BlockScratch;
use flash_lcsm::{ActivationStore, Model, Sampler};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Quadratic forward pass written straight from the model definition.
/// Returns levels `0 ..= M`, each `[lane][position][channel]`.
pub fn naive_generate(model: &Model, sampler: &mut Sampler, first_token: &[f64]) -> Vec<Vec<f64>> {
    let c = model.config();
    let (m, d, l, b) = (c.layers, c.channels, c.horizon, c.lanes);
    let mut acts = vec![vec![0.0; b * l * d]; m + 1];
    let at = |lane: usize, pos: usize| (lane * l + pos - 1) * d;
    for lane in 0..b {
        acts[0][at(lane, 1)..at(lane, 1) + d]
            .copy_from_slice(&first_token[lane * d..(lane + 1) * d]);
    }
    let mut scratch = BlockScratch::default();
    let mut x = vec![0.0; d];
    for i in 1..=l {
        for layer in 1..=m {
            for lane in 0..b {
                for (ch, v) in x.iter_mut().enumerate() {
                    *v = (1..=i)
                        .map(|j| {
                            acts[layer - 1][at(lane, j) + ch]
                                * model.filters().tap(layer - 1, i - j, ch)
                        })
                        .sum();
                }
                let prev = acts[layer - 1][at(lane, i)..at(lane, i) + d].to_vec();
                model
                    .blocks()
                    .layer(layer)
                    .apply(&mut x, &prev, &mut scratch);
                acts[layer][at(lane, i)..at(lane, i) + d].copy_from_slice(&x);
            }
        }
        if i < l {
            for lane in 0..b {
                let last = acts[m][at(lane, i)..at(lane, i) + d].to_vec();
                let mut next = vec![0.0; d];
                sampler.next_token(i + 1, lane, &last, &mut next);
                acts[0][at(lane, i + 1)..at(lane, i + 1) + d].copy_from_slice(&next);
            }
        }
    }
    acts
}

pub fn levels(store: &ActivationStore) -> Vec<Vec<f64>> {
    (0..=store.layers())
        .map(|l| store.level(l).to_vec())
        .collect()
}

/// Largest relative error over all levels.
pub fn max_rel(got: &[Vec<f64>], want: &[Vec<f64>]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(a, b)| flash_lcsm::relative_error(a, b))
        .fold(0.0, f64::max)
}

pub fn random_token(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn bits(levels: &[Vec<f64>]) -> Vec<u64> {
    levels.iter().flatten().map(|v| v.to_bits()).collect()
}
