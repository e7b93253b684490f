//! Shows which pixels loss max-pooling keeps on a synthetic loss map, and
//! the threshold it reports.
//!
//! cargo run --release --example loss_max_pooling

use nailtrace::objectives::{lmp_keep_count, lmp_loss, lmp_select};
use nailtrace::tensor::{Tape, Tensor};

fn main() -> anyhow::Result<()> {
    // a 12x12 map: easy background with a few hard pixels and some ties
    let (h, w) = (12, 12);
    let losses: Vec<f64> = (0..h * w)
        .map(|p| match p {
            p if p % 29 == 0 => 2.5,
            p if p % 13 == 0 => 1.0,
            p => 0.05 + (p % 5) as f64 * 0.01,
        })
        .collect();
    for fraction in [0.01, 0.1, 0.5, 1.0] {
        let sel = lmp_select(&losses, fraction)?;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, h, w], losses.clone())?, true);
        let (v, _) = lmp_loss(&mut tape, x, fraction)?;
        let plain = losses.iter().sum::<f64>() / losses.len() as f64;
        println!(
            "fraction {fraction:<4}: keep {:>3} of {} (tau {:.3}), pooled {:.4} vs plain mean {plain:.4}",
            lmp_keep_count(losses.len(), fraction),
            losses.len(),
            sel.tau,
            tape.value(v).item()
        );
    }
    Ok(())
}
