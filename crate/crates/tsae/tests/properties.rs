//! Property tests over the invariants that hold for arbitrary inputs:
//! format roundtrips, split partitioning, BatchTopK cardinality, normalizer
//! roundtrips, shrinkage monotonicity, steering mask isolation, expansion
//! boundary exactness, and entropy bounds.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use tsae::dataset::{
    read_trajectories, split_indices, write_trajectories, Grid, TrajectoryDataset, TrajectoryMeta,
};
use tsae::residualize::{RidgeChain, TimestepNormalizer};
use tsae::sae::batchtopk_select;
use tsae::steering::{
    apply_steering, expand_piecewise_constant, MaskSpec, SteeringPlan,
};

fn dataset_strategy() -> impl Strategy<Value = TrajectoryDataset> {
    (1usize..6, 2usize..5, 1usize..5, any::<bool>(), any::<u64>()).prop_flat_map(
        |(units, t, d, with_grid, seed)| {
            let (grid, n) = if with_grid {
                (Some(Grid { h: 2, w: 2 }), units * 4)
            } else {
                (None, units)
            };
            // f32-representable finite values so storage roundtrips exactly
            proptest::collection::vec(-1e6f32..1e6f32, n * t * d).prop_map(move |vals| {
                let data =
                    Array3::from_shape_vec((n, t, d), vals.iter().map(|v| *v as f64).collect())
                        .unwrap();
                TrajectoryDataset::new(
                    data,
                    grid,
                    TrajectoryMeta {
                        stride: 10,
                        full_step_indices: (0..t as u32).map(|i| i * 10).collect(),
                        seed,
                    },
                )
                .unwrap()
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tsae_roundtrip_is_bit_exact(ds in dataset_strategy()) {
        let bytes = write_trajectories(&ds);
        let back = read_trajectories(&bytes).unwrap();
        prop_assert_eq!(ds.data(), back.data());
        prop_assert_eq!(ds.grid(), back.grid());
        prop_assert_eq!(ds.meta().stride, back.meta().stride);
        prop_assert_eq!(&ds.meta().full_step_indices, &back.meta().full_step_indices);
        // a second trip reproduces the same bytes
        prop_assert_eq!(bytes, write_trajectories(&back));
    }

    #[test]
    fn split_is_a_partition(n in 2usize..500, frac in 0.01f64..0.99, seed in any::<u64>()) {
        prop_assume!((frac * n as f64).round() as usize >= 1);
        prop_assume!(((frac * n as f64).round() as usize) < n);
        let (train, val) = split_indices(n, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(train.iter().all(|i| !val.contains(i)));
    }

    #[test]
    fn batchtopk_cardinality(
        b in 1usize..6,
        m in 1usize..12,
        k in 1usize..12,
        vals in proptest::collection::vec(-1.0f64..1.0, 72),
    ) {
        prop_assume!(k <= m);
        let pre = Array2::from_shape_fn((b, m), |(r, c)| vals[r * 12 + c]);
        let code = batchtopk_select(&pre, k);
        let kept = code.iter().filter(|v| **v != 0.0).count();
        let positives = pre.iter().filter(|v| **v > 0.0).count();
        prop_assert_eq!(kept, (b * k).min(positives));
        // kept values are a subset of the strictly positive pre-activations
        for (c, p) in code.iter().zip(pre.iter()) {
            prop_assert!(*c == 0.0 || (*c == *p && *p > 0.0));
        }
    }

    #[test]
    fn normalizer_roundtrip(ds in dataset_strategy()) {
        prop_assume!(ds.num_trajectories() >= 2);
        let norm = TimestepNormalizer::fit(ds.data()).unwrap();
        let back = norm.invert(&norm.apply(ds.data()).unwrap()).unwrap();
        let worst = ds
            .data()
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
            .fold(0.0f64, f64::max);
        prop_assert!(worst <= 1e-10, "roundtrip error {}", worst);
    }

    #[test]
    fn ridge_shrinkage_is_monotone(seed in any::<u64>()) {
        let (ds, _) = tsae::dataset::generate_synthetic(&tsae::dataset::SyntheticSpec {
            n: 64,
            t: 3,
            d: 4,
            dynamics_scale: 1.0,
            residual_rank: 1,
            residual_sparsity: 0.3,
            noise_std: 0.3,
            seed,
            grid: None,
            stride: 10,
        })
        .unwrap();
        let norm = TimestepNormalizer::fit(ds.data()).unwrap();
        let normalized = norm.apply(ds.data()).unwrap();
        let mut prev: Option<f64> = None;
        for lambda in [0.0, 0.5, 2.0, 8.0, 32.0] {
            let chain = RidgeChain::fit(&normalized, lambda).unwrap();
            let total: f64 = (0..chain.num_transitions())
                .map(|i| chain.weight(i).iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if let Some(p) = prev {
                prop_assert!(total <= p + 1e-12, "norm grew {} -> {}", p, total);
            }
            prev = Some(total);
        }
    }

    #[test]
    fn steering_leaves_unmasked_tokens_bit_identical(
        n_tokens in 1usize..12,
        d in 1usize..5,
        alpha in -3.0f64..3.0,
        mask_bits in any::<u16>(),
        seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let mut tokens = Array2::from_shape_fn((n_tokens, d), |_| next());
        let before = tokens.clone();
        let masked: Vec<u32> = (0..n_tokens as u32)
            .filter(|t| mask_bits & (1 << (t % 16)) != 0)
            .collect();
        prop_assume!(!masked.is_empty());
        let plan = SteeringPlan {
            directions: Array2::from_shape_fn((2, d), |_| next()),
            mask: MaskSpec::Uniform(masked.clone()),
            alpha,
            full_step_indices: vec![0, 1],
        };
        apply_steering(&mut tokens, &plan, 1).unwrap();
        for q in 0..n_tokens {
            if !masked.contains(&(q as u32)) {
                for c in 0..d {
                    prop_assert_eq!(tokens[(q, c)].to_bits(), before[(q, c)].to_bits());
                }
            }
        }
    }

    #[test]
    fn expansion_preserves_block_values_at_boundaries(
        t in 1usize..6,
        d in 1usize..4,
        gaps in proptest::collection::vec(1u32..7, 5),
        tail in 0u32..5,
    ) {
        let mut steps = Vec::with_capacity(t);
        let mut cur = 0u32;
        for g in gaps.iter().take(t) {
            steps.push(cur);
            cur += g;
        }
        let total = (*steps.last().unwrap() + 1 + tail) as usize;
        let blocks = Array2::from_shape_fn((t, d), |(i, c)| (i * 7 + c) as f64 * 0.13 - 1.0);
        let expanded = expand_piecewise_constant(&blocks, &steps, total).unwrap();
        for (i, tau) in steps.iter().enumerate() {
            for c in 0..d {
                prop_assert_eq!(
                    expanded[(*tau as usize, c)].to_bits(),
                    blocks[(i, c)].to_bits()
                );
            }
        }
    }

    #[test]
    fn entropy_is_bounded(vals in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let map = Array2::from_shape_fn((4, 4), |(r, c)| vals[r * 4 + c]);
        if let Some(h) = tsae::analysis::positive_spatial_entropy(&map) {
            prop_assert!((0.0..=1.0 + 1e-6).contains(&h), "entropy {}", h);
        }
    }
}
