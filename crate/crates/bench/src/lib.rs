//! Fixtures shared by the benchmarks.

use priormotion::grid::{voxelize_sequence, OccupancyGrid};
use priormotion::sim::{generate_sequence, GeneratedSequence};
use priormotion::{GridSpec, SceneConfig};

/// A seeded default scene on the desk grid.
pub fn scene(seed: u64) -> (GridSpec, GeneratedSequence) {
    let spec = GridSpec::desk();
    let cfg = SceneConfig { rng_seed: seed, ..SceneConfig::default() };
    let g = generate_sequence(&cfg, &spec).expect("default scene config is feasible");
    (spec, g)
}

pub fn grids(seed: u64) -> (GridSpec, Vec<OccupancyGrid>) {
    let (spec, g) = scene(seed);
    let grids = voxelize_sequence(&g.points, &spec);
    (spec, grids)
}
