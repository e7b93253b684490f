//! Generates a small synthetic dataset and prints its split sizes.
//!
//! cargo run --release --example generate_dataset -- /tmp/nails 40

use std::path::PathBuf;

use nailtrace::synth::{dataset_checksum, generate_dataset, write_dataset, DatasetSpec, Split};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic-nails".into()));
    let count = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    let spec = DatasetSpec {
        count,
        ..DatasetSpec::default()
    };
    let dataset = generate_dataset(&spec)?;
    write_dataset(&dir, &dataset)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split:?}: {} images", dataset.split(split).len());
    }
    println!("fg fraction {:.4}", dataset.manifest.fg_fraction);
    println!("checksum {}", dataset_checksum(&dir)?);
    Ok(())
}
