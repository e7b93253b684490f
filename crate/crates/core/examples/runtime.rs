//! Times single-thread forward plus instance extraction on a 288x288 frame
//! with the tiny model.
//!
//! cargo run --release --example runtime -- [size]

use nailtrace::metrics::{measure_runtime, RUNTIME_FRAMES, RUNTIME_WARMUP};
use nailtrace::model::{Model, ModelConfig};
use nailtrace::postprocess::PostprocessParams;
use nailtrace::synth::{generate_sample, SceneSpec};

fn main() -> anyhow::Result<()> {
    let size = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(288);
    let model = Model::build(ModelConfig::tiny(size, size), 0)?;
    let image = generate_sample(&SceneSpec::random(1, size, size, 3))?.image;
    let stats = measure_runtime(
        &model,
        &image,
        &PostprocessParams::for_size(size, size),
        RUNTIME_WARMUP,
        RUNTIME_FRAMES,
    )?;
    println!(
        "{size}x{size}: median {:.1} ms, min {:.1} ms, max {:.1} ms over {} frames",
        stats.median_ms, stats.min_ms, stats.max_ms, stats.frames
    );
    Ok(())
}
