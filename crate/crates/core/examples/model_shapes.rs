//! Builds the tiny cascade model at 336x336 and prints its output shapes,
//! parameter count and low-branch geometry.
//!
//! cargo run --release --example model_shapes -- [size]

use nailtrace::model::{EncoderVariant, Model, ModelConfig};
use nailtrace::tensor::Tensor;

fn main() -> anyhow::Result<()> {
    let size = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(336);
    for variant in [EncoderVariant::Deep55, EncoderVariant::Shallow43] {
        let cfg = ModelConfig {
            encoder_variant: variant,
            ..ModelConfig::tiny(size, size)
        };
        let model = Model::build(cfg, 0)?;
        let out = model.forward(&Tensor::zeros(&[1, 3, size, size]))?;
        println!(
            "{variant:?}: {} parameters, low branch stride {}",
            model.num_parameters(),
            model.low_branch_stride()
        );
        println!("  heads {:?} {:?} {:?}", out.fgbg_logits.shape(), out.class_logits.shape(), out.field.shape());
        for aux in &out.aux {
            println!("  aux 1/{:<2} {:?}", aux.scale, aux.heads.fgbg_logits.shape());
        }
        println!("  low stages (stride, dilation) {:?}", model.low_stage_geometry());
    }
    Ok(())
}
