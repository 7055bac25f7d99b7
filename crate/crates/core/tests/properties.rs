//! Property tests for invariants that hold for every input.

use std::collections::HashSet;

use proptest::prelude::*;
use vit_som::data::BatchIterator;
use vit_som::metrics::{purity, topographic_error};
use vit_som::ndgrad::Tensor;
use vit_som::objective::GammaSchedule;
use vit_som::som::{find_bmu, Lattice, Metric, SomGrid, TemperatureSchedule};
use vit_som::trainer::cosine_lr;

fn metric() -> impl Strategy<Value = Metric> {
    prop_oneof![Just(Metric::Cosine), Just(Metric::Euclidean), Just(Metric::Manhattan)]
}

/// A map of `h×w` prototypes and `b` latent rows, all of width `d`.
fn map_and_batch() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..5, 1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(h, w, d, b)| {
        (
            Just(h),
            Just(w),
            Just(d),
            prop::collection::vec(-2.0f64..2.0, h * w * d),
            prop::collection::vec(-2.0f64..2.0, b * d),
        )
    })
}

proptest! {
    #[test]
    fn purity_is_bounded_and_ignores_cluster_names(
        pairs in prop::collection::vec((0usize..6, 0usize..4), 1..60),
        shift in 1usize..100,
    ) {
        let (clusters, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let p = purity(&clusters, &labels).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        let renamed: Vec<usize> = clusters.iter().map(|c| c * 7 + shift).collect();
        prop_assert_eq!(purity(&renamed, &labels).unwrap(), p);
        prop_assert_eq!(purity(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn neighborhood_peaks_at_the_bmu_and_is_symmetric(h in 1usize..6, w in 1usize..6, t in 0.01f64..10.0, seed in any::<u64>()) {
        let lattice = Lattice::new(h, w).unwrap();
        let m = h * w;
        let (i, j) = ((seed % m as u64) as usize, ((seed >> 32) % m as u64) as usize);
        let hi = lattice.neighborhood_weights(i, t).unwrap();
        let hj = lattice.neighborhood_weights(j, t).unwrap();
        prop_assert_eq!(hi[i], 1.0);
        prop_assert!(hi.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(hi[j], hj[i]);
    }

    #[test]
    fn temperature_decays_monotonically(t_max in 0.5f64..20.0, k_total in 1u64..10_000, a in 0u64..10_000, b in 0u64..10_000) {
        let s = TemperatureSchedule::new(t_max, 0.001, k_total).unwrap();
        let (lo, hi) = (a.min(b).min(k_total), a.max(b).min(k_total));
        prop_assert!(s.temperature(lo) >= s.temperature(hi));
        prop_assert!(s.temperature(hi) >= 0.001 * (1.0 - 1e-12));
        prop_assert!(s.temperature(lo) <= t_max);
    }

    #[test]
    fn schedules_stay_in_range(k_total in 1u64..10_000, k in 0u64..20_000, warmup in 0u64..5_000, g in 0.0f64..1.0) {
        let lr = cosine_lr(k.min(k_total), k_total, 0.01, 1e-6);
        prop_assert!((1e-6 - 1e-15..=0.01 + 1e-15).contains(&lr));
        let gamma = GammaSchedule::new(g, warmup).unwrap();
        prop_assert!(gamma.gamma(k) <= g && gamma.gamma(k) >= 0.0);
        prop_assert!(gamma.gamma(k) <= gamma.gamma(k + 1));
    }

    #[test]
    fn every_epoch_is_a_partition(n in 1usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
        let it = BatchIterator::new(bs.min(n), seed, false).unwrap();
        let batches = it.epoch(n, epoch).unwrap();
        prop_assert_eq!(batches.len(), it.batches_per_epoch(n));
        let seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert_eq!(seen.len(), n);
        prop_assert_eq!(seen.iter().collect::<HashSet<_>>().len(), n);
        prop_assert!(seen.iter().all(|&i| i < n));
    }

    #[test]
    fn bmu_is_the_first_minimum((h, w, d, protos, z) in map_and_batch(), metric in metric()) {
        let b = z.len() / d;
        let grid = SomGrid::from_prototypes(h, w, metric, Tensor::new(&[h * w, d], protos).unwrap()).unwrap();
        let dist = grid.distances(&Tensor::new(&[b, d], z).unwrap()).unwrap();
        for (i, &u) in find_bmu(&dist).unwrap().iter().enumerate() {
            let row = dist.row(i);
            prop_assert!(row.iter().all(|&v| row[u] <= v));
            prop_assert!(row[..u].iter().all(|&v| v > row[u]));
        }
    }

    #[test]
    fn cosine_distance_ignores_scale((h, w, d, protos, z) in map_and_batch(), c in 0.1f64..10.0) {
        let b = z.len() / d;
        let grid = SomGrid::from_prototypes(h, w, Metric::Cosine, Tensor::new(&[h * w, d], protos).unwrap()).unwrap();
        let a = grid.distances(&Tensor::new(&[b, d], z.clone()).unwrap()).unwrap();
        let scaled = grid.distances(&Tensor::new(&[b, d], z.iter().map(|v| v * c).collect()).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(scaled.data()) {
            prop_assert!((0.0..=2.0).contains(x));
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn topographic_error_is_a_fraction((h, w, d, protos, z) in map_and_batch()) {
        prop_assume!(h * w >= 2);
        let b = z.len() / d;
        let grid = SomGrid::from_prototypes(h, w, Metric::Euclidean, Tensor::new(&[h * w, d], protos).unwrap()).unwrap();
        let te = topographic_error(&Tensor::new(&[b, d], z).unwrap(), &grid).unwrap();
        prop_assert!((0.0..=1.0).contains(&te));
        prop_assert!((te * b as f64 - (te * b as f64).round()).abs() < 1e-9);
    }
}
