//! Shared fixtures for the kernel benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usfg_core::synthvideo::{generate, SynthVideo};
use usfg_core::{NetworkParams, Preset, SynthConfig};

/// Freshly initialized weights; timing does not depend on their values.
pub fn params(preset: Preset) -> NetworkParams<f32> {
    NetworkParams::init(&preset.architecture(), &mut ChaCha8Rng::seed_from_u64(1)).expect("preset is valid")
}

/// One default-size synthetic video with a moving object.
pub fn video() -> SynthVideo {
    let config = SynthConfig {
        train_videos: 1,
        heldout_videos: 0,
        still_fraction: 0.0,
        ..Default::default()
    };
    generate(&config).expect("default config is valid").remove(0)
}
