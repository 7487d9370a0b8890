//! Fixtures shared by the benchmarks.

use allpairs::env::{corridor_v1_goal, Environment};
use allpairs::roadmap::{generate_datasets, DataGenConfig};
use allpairs::train::init_scale_from_data;
use allpairs::{BiLipConfig, BiLipMap, LabeledDatasets};

/// Untrained corridor map at the default architecture, centred on the
/// corridor goal and scaled to a small corridor dataset.
pub fn corridor_fixture(samples: usize) -> (BiLipMap, LabeledDatasets) {
    let env = Environment::preset("corridor-v1").expect("preset exists");
    let goal = corridor_v1_goal();
    let cfg = DataGenConfig {
        safe_count: samples,
        unsafe_count: samples,
        ..DataGenConfig::full_scale(&goal, 0)
    };
    let (data, _) = generate_datasets(&env, &cfg).expect("corridor data");
    let r = env.sampling_region();
    let mut map = BiLipMap::random(&BiLipConfig::default(), &r.min, &r.max, 0);
    map.set_goal_center(&goal);
    init_scale_from_data(&mut map, &data, 1.0);
    (map, data)
}
