//! Runs the three-setting ablation on a small budget and prints the table.
//!
//! cargo run --release --example ablation -- [epochs] [seeds]

use nailtrace::model::ModelConfig;
use nailtrace::synth::{generate_dataset, DatasetSpec};
use nailtrace::train::{run_ablation, AblationSetting, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(4);
    let seeds: Vec<u64> = match args.next() {
        Some(s) => s.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![0],
    };
    let dataset = generate_dataset(&DatasetSpec {
        count: 160,
        ..DatasetSpec::default()
    })?;
    let cfg = TrainConfig {
        epochs,
        eval_every: 1,
        max_train_images: Some(80),
        max_eval_images: Some(24),
        ..TrainConfig::default()
    };
    let table = run_ablation(&dataset, &ModelConfig::tiny(128, 128), &cfg, &seeds, |row| {
        eprintln!("{} seed {}: {:.4}", row.setting.label(), row.seed, row.miou);
    })?;
    print!("{}", table.to_csv());
    for s in AblationSetting::ALL {
        println!("mean {:<9} {:.4}", s.label(), table.mean(s));
    }
    let (hits, n) = table.monotone_count();
    println!("monotone for {hits}/{n} seeds");
    Ok(())
}
