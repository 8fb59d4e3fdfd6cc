//! Select Gaussians by text query directly in 3D.
//!
//!     cargo run --release --example seg3d

use malegs::pipeline::{Pipeline, PipelineConfig};

fn main() -> malegs::Result<()> {
    let cfg = PipelineConfig::parse("seed = 3\nD = 128\nresolution = 48\nkernel = 1\nae_epochs = 60\nfield_iterations = 1500\n")?;
    let p = Pipeline::new(cfg, "target/seg3d")?;
    for r in p.seg3d()? {
        println!(
            "{:<8} {:>3} gaussians selected, precision {:.3}, recall {:.3}",
            r.query, r.selected, r.precision, r.recall
        );
    }
    Ok(())
}
