// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the benchmarks.

use vlmflow_core::wiring::WiringConfig;
use vlmflow_core::world::gen_world;
use vlmflow_core::{wire_model, ModelWeights, World, WorldConfig};

/// World of `entities` entities and a model wired with the default config.
pub fn wired(entities: usize) -> (World, ModelWeights) {
    let world = gen_world(&WorldConfig {
        num_entities: entities,
        seed: 1,
        ..WorldConfig::default()
    })
    .expect("bench world");
    let (weights, _) = wire_model(&world, &WiringConfig::default()).expect("bench wiring");
    (world, weights)
}
