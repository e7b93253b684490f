//! Generates a synthetic dataset, trains the tiny model and reports
//! validation metrics per epoch.
//!
//! cargo run --release --example train_synthetic -- [epochs] [seed]

use nailtrace::model::{Model, ModelConfig};
use nailtrace::synth::{generate_dataset, DatasetSpec};
use nailtrace::train::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let dataset = generate_dataset(&DatasetSpec {
        seed,
        count: 312,
        ..DatasetSpec::default()
    })?;
    let mut model = Model::build(ModelConfig::tiny(128, 128), seed)?;
    let cfg = TrainConfig {
        seed,
        epochs,
        max_train_images: Some(200),
        max_eval_images: Some(50),
        eval_every: 1,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let out = train(&mut model, &dataset, &cfg, std::io::sink())?;
    for (e, loss) in out.epoch_losses.iter().enumerate() {
        let Some(r) = out.evals.iter().find(|v| v.epoch == e + 1).map(|v| &v.report) else {
            continue;
        };
        println!(
            "epoch {:>2} loss {loss:.4} miou {:.4} angle {:5.1} matched {}/{}",
            e + 1,
            r.binary_miou,
            r.mean_angular_error_deg,
            r.matched_nails,
            r.total_nails
        );
    }
    println!("best epoch {} in {:.1}s", out.best_epoch, start.elapsed().as_secs_f64());
    Ok(())
}
