use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;

use priormotion::dataset::{decode_dataset, encode_dataset};
use priormotion::metrics::{generalization_index, instance_variance, ErrorStats, SpeedGroup};
use priormotion::objective::group_weights;
use priormotion::sim::generate_sequence;
use priormotion::{voxelize, Dataset, GridSpec, Sample, SceneConfig};

fn spec() -> GridSpec {
    GridSpec::new([-4.0, 4.0], [-2.0, 6.0], [-1.0, 1.0], 0.5, 0.25, 0.2, 2, 2).unwrap()
}

fn point() -> impl Strategy<Value = [f32; 3]> {
    (-6.0f32..6.0, -4.0f32..8.0, -2.0f32..2.0).prop_map(|(x, y, z)| [x, y, z])
}

proptest! {
    #[test]
    fn every_point_is_binned_or_dropped(points in prop::collection::vec(point(), 0..200)) {
        let spec = spec();
        let g = voxelize(&points, &spec);
        let inside: Vec<_> = points.iter().filter_map(|p| spec.voxel_of(*p)).collect();
        prop_assert_eq!(inside.len() + g.dropped(), points.len());
        let distinct: HashSet<_> = inside.iter().copied().collect();
        prop_assert_eq!(g.occupied_count(), distinct.len());
        for (i, j, k) in distinct {
            prop_assert!(g.get(i, j, k));
        }
    }

    #[test]
    fn voxelize_ignores_point_order(mut points in prop::collection::vec(point(), 0..100)) {
        let spec = spec();
        let a = voxelize(&points, &spec);
        points.reverse();
        let b = voxelize(&points, &spec);
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn voxel_centers_map_back(i in 0usize..16, j in 0usize..16, k in 0usize..8) {
        let spec = spec();
        let c = spec.cell_center(i, j);
        let z = spec.z_range()[0] + (k as f64 + 0.5) * spec.z_resolution();
        prop_assert_eq!(spec.voxel_of([c.0 as f32, c.1 as f32, z as f32]), Some((i, j, k)));
    }

    #[test]
    fn group_weights_balance_groups(groups in prop::collection::vec(prop::option::of(0usize..3), 1..300)) {
        let groups: Vec<Option<SpeedGroup>> = groups.iter().map(|g| g.map(|g| SpeedGroup::ALL[g])).collect();
        let w = group_weights(&groups);
        for (g, w) in groups.iter().zip(&w) {
            match g {
                None => prop_assert_eq!(*w, 0.0),
                Some(_) => prop_assert!((0.1..=10.0).contains(w)),
            }
        }
    }

    #[test]
    fn median_lies_within_the_sample(mut xs in prop::collection::vec(0.0f64..100.0, 1..100)) {
        let s = ErrorStats::from_errors(&mut xs).unwrap();
        prop_assert!(s.median >= xs[0] && s.median <= xs[xs.len() - 1]);
        prop_assert!(s.mean >= xs[0] - 1e-9 && s.mean <= xs[xs.len() - 1] + 1e-9);
        prop_assert_eq!(s.count, xs.len());
    }

    #[test]
    fn variance_is_translation_invariant(ds in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40), dx in -3.0f64..3.0) {
        let a: Vec<[f64; 2]> = ds.iter().map(|d| [d.0, d.1]).collect();
        let b: Vec<[f64; 2]> = a.iter().map(|d| [d[0] + dx, d[1] - dx]).collect();
        prop_assert!(instance_variance(&a) >= 0.0);
        prop_assert!((instance_variance(&a) - instance_variance(&b)).abs() < 1e-9);
    }

    #[test]
    fn generalization_index_orders_like_the_ratio(full in 0.01f64..10.0, masked in 0.01f64..10.0) {
        let gi = generalization_index(full, masked).unwrap();
        prop_assert!((gi - full / masked * 100.0).abs() < 1e-9);
        prop_assert_eq!(gi >= 100.0, full >= masked);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn datasets_round_trip(seed in 0u64..1000) {
        let spec = GridSpec::new([-8.0, 8.0], [-8.0, 8.0], [-3.0, 2.0], 0.5, 0.5, 0.2, 3, 3).unwrap();
        let cfg = SceneConfig { n_cars: 2, n_pedestrians: 1, n_bikes: 1, n_others: 1, rng_seed: seed, ..SceneConfig::default() };
        let g = generate_sequence(&cfg, &spec).unwrap();
        let ds = Dataset { spec, samples: vec![Sample { points: g.points, labels: g.labels }] };
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }
}
