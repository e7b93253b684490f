//! Extracts nail instances from a synthetic sample's labels, renders polish
//! over them and writes the composite and overlay PNGs.
//!
//! cargo run --release --example render_polish -- [out_dir] [seed]

use std::path::PathBuf;

use nailtrace::metrics::angular_error;
use nailtrace::pipeline::encode_png;
use nailtrace::postprocess::{extract_instances, DensePrediction, PostprocessParams};
use nailtrace::render::{render_overlay, RenderParams};
use nailtrace::synth::{generate_sample, SceneSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "render-out".into()));
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let size = 256;
    let sample = generate_sample(&SceneSpec::random(seed, size, size, 3))?;

    // a perfect prediction built from the labels
    let pred = DensePrediction {
        width: size,
        height: size,
        fg_score: sample.fgbg.iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect(),
        class: sample.classes.iter().map(|&c| c.max(1)).collect(),
        field: sample.field.clone(),
    };
    let instances = extract_instances(&pred, &PostprocessParams::for_size(size, size));
    for inst in &instances {
        println!(
            "nail {} class {:>2} area {:>4} orientation ({:+.3}, {:+.3})",
            inst.id, inst.class_label, inst.area, inst.orientation.0, inst.orientation.1
        );
        let (x, y) = inst.pixels()[0];
        let p = y as usize * size + x as usize;
        let truth = (sample.field[2 * p] as f64, sample.field[2 * p + 1] as f64);
        if truth != (0.0, 0.0) {
            println!("  error vs label {:.2} deg", angular_error(inst.orientation, truth)?);
        }
    }

    let params = RenderParams {
        color: [170, 20, 90],
        ..RenderParams::for_size(size, size)
    };
    let out = render_overlay(&sample.image, size, size, &instances, &params)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("source.png"), encode_png(&sample.image, size, size, 3)?)?;
    std::fs::write(dir.join("composited.png"), encode_png(&out.composited, size, size, 3)?)?;
    std::fs::write(dir.join("overlay.png"), encode_png(&out.overlay, size, size, 4)?)?;
    println!("wrote {}", dir.display());
    Ok(())
}
