//! Distill multi-appearance latent targets into the Gaussians' language
//! slots with geometry frozen.
//!
//!     cargo run --release --example train_field

use malegs::field::field_loss;
use malegs::pipeline::{Pipeline, PipelineConfig};

fn main() -> malegs::Result<()> {
    let cfg = PipelineConfig::parse(
        "seed = 3\nresolution = 32\nD = 64\nviews = 6\nkernel = 1\nae_epochs = 40\nfield_iterations = 1200\n",
    )?;
    let p = Pipeline::new(cfg, "target/train_field")?;
    let field = &p.train_field()?[0];
    let before = p.world().scene.geometry_digest();
    assert_eq!(before, field.geometry_digest(), "geometry stays frozen");

    for (v, t) in p.view_targets(0)?.iter().enumerate() {
        let l = field_loss(field, t)?;
        let per_slot: Vec<String> = l.slot_losses.iter().map(|s| format!("{s:.4}")).collect();
        println!("view {v}: loss {:.4}, per slot [{}]", l.loss, per_slot.join(", "));
    }
    Ok(())
}
