//! Full pipeline on a config file; prints the per-query report.
//!
//!     cargo run --release --example benchmark -- crates/core/configs/clean.cfg

use std::time::Instant;

use malegs::pipeline::{Pipeline, PipelineConfig};

fn main() -> malegs::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/clean.cfg").into());
    let cfg = PipelineConfig::load(&path)?;
    let t = Instant::now();
    let p = Pipeline::new(cfg, "target/benchmark")?;
    let report = p.eval()?;
    print!("{}", report.to_csv()?);
    println!("# {:.1} s", t.elapsed().as_secs_f64());
    Ok(())
}
