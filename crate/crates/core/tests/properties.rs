use flash_lcsm::relaxed::{run_eager, run_lazy, run_relaxed};
use flash_lcsm::tau::{tau_direct, tau_dispatch, tau_fft, tau_fft_cyclic_cached};
use flash_lcsm::{DispatchTable, FilterBank, KernelDftCache, TauImplKind, TileTask};
use proptest::prelude::*;

fn naive_tile(y: &[f64], rho: &[f64], t: &TileTask) -> Vec<f64> {
    (t.dst_lo..=t.dst_hi)
        .map(|p| (t.src_lo..=t.src_hi).map(|j| y[j - 1] * rho[p - j]).sum())
        .collect()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * scale)
}

fn arb_tile() -> impl Strategy<Value = TileTask> {
    (1usize..40, 0usize..24, 0usize..8, 1usize..24).prop_map(|(lo, w, gap, dw)| {
        let hi = lo + w;
        TileTask::new(lo, hi, hi + gap, hi + gap + dw - 1).unwrap()
    })
}

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #[test]
    fn tau_impls_agree_with_naive(task in arb_tile(), y in vec_of(128), rho in vec_of(128)) {
        let want = naive_tile(&y, &rho, &task);
        prop_assert!(close(&tau_direct(&y, &rho, &task).unwrap(), &want));
        prop_assert!(close(&tau_fft(&y, &rho, &task).unwrap(), &want));
    }

    #[test]
    fn cyclic_cached_agrees_on_schedule_tiles(q in 0u32..6, k in 0usize..8, seed in 0u64..1000) {
        let side = 1usize << q;
        let i = side * (2 * k + 1);
        let l = (i + side).next_power_of_two();
        let bank = FilterBank::seeded(1, l, 1, seed, 0.5);
        let cache = KernelDftCache::build(&bank, l).unwrap();
        let rho = bank.channel_column(0, 0);
        let y: Vec<f64> = (0..i).map(|p| ((p as f64 + 1.0) * 0.37 + seed as f64).sin()).collect();
        let task = TileTask::square(i, side);
        let want = naive_tile(&y, &rho, &task);
        prop_assert!(close(&tau_fft_cyclic_cached(&y, &cache, 0, 0, &task).unwrap(), &want));
        let table = DispatchTable::default();
        prop_assert!(close(&tau_dispatch(&y, &rho, Some((&cache, 0, 0)), &task, &table).unwrap(), &want));
    }

    #[test]
    fn tau_is_linear_in_its_input(task in arb_tile(), y1 in vec_of(128), y2 in vec_of(128),
                                  rho in vec_of(128), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mix: Vec<f64> = y1.iter().zip(&y2).map(|(u, v)| a * u + b * v).collect();
        for f in [tau_direct, tau_fft] {
            let lhs = f(&mix, &rho, &task).unwrap();
            let r1 = f(&y1, &rho, &task).unwrap();
            let r2 = f(&y2, &rho, &task).unwrap();
            let rhs: Vec<f64> = r1.iter().zip(&r2).map(|(u, v)| a * u + b * v).collect();
            prop_assert!(close(&lhs, &rhs));
        }
    }

    #[test]
    fn relaxed_lazy_eager_agree(p in 1u32..8, rho in vec_of(128), y0 in -1.0f64..1.0,
                                kind in 0usize..4) {
        let l = 1usize << p;
        let table = match kind {
            3 => DispatchTable::default(),
            k => DispatchTable::uniform(TauImplKind::ALL[k]),
        };
        // feedback: each input depends on the previous finalized output
        let provider = |i: usize, z: &[f64]| -> flash_lcsm::Result<f64> {
            Ok(if i == 1 { y0 } else { (z[i - 2] * 0.9).tanh() + 0.1 })
        };
        let r = run_relaxed(provider, &rho[..l], l, &table).unwrap();
        let lz = run_lazy(provider, &rho[..l], l).unwrap();
        let e = run_eager(provider, &rho[..l], l).unwrap();
        prop_assert!(close(&r.z, &lz.z));
        prop_assert!(close(&e.z, &lz.z));
    }
}

#[test]
fn relaxed_work_grows_quasi_linearly() {
    let mut prev = None;
    for p in 8..=13 {
        let l = 1usize << p;
        let rho = vec![0.01; l];
        let r = run_relaxed(
            |_, _| Ok(1.0),
            &rho,
            l,
            &DispatchTable::uniform(TauImplKind::FftCyclicCached),
        )
        .unwrap();
        let lz = run_lazy(|_, _| Ok(1.0), &rho, l).unwrap();
        if let Some((rf, lf, pl)) = prev {
            let bound = 2.0 * ((p as f64) / (pl as f64)).powi(2) * 1.05;
            assert!(r.ledger.flops as f64 / rf as f64 <= bound);
            assert!(lz.ledger.flops as f64 / lf as f64 >= 3.8);
        }
        prev = Some((r.ledger.flops, lz.ledger.flops, p));
    }
}
