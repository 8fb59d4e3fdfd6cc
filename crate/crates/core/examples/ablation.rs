//! Rerun the pipeline with components switched off and compare.
//!
//!     cargo run --release --example ablation -- [config] [variant ...]

use std::path::Path;

use malegs::ablation::{run_ablation, Variant};
use malegs::pipeline::PipelineConfig;

fn main() -> malegs::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/noisy.cfg").into());
    let cfg = PipelineConfig::load(&path)?;
    let mut variants = args.map(|v| v.parse()).collect::<malegs::Result<Vec<Variant>>>()?;
    if variants.is_empty() {
        variants = cfg.variants.iter().map(|v| v.parse()).collect::<malegs::Result<_>>()?;
    }
    let report = run_ablation(&cfg, &variants, &cfg.seeds, Path::new("target/ablation"))?;
    for v in &variants {
        let (iou, pa, p) = report.mean(*v).expect("every variant ran");
        println!("{v:<20} mIoU {iou:.4}  mPA {pa:.4}  mP {p:.4}");
    }
    Ok(())
}
