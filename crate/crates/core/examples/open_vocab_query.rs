//! Text query against a trained field: per-slot relevancy, background
//! filter, fusion and threshold, drawn as ASCII next to the ground truth.
//!
//!     cargo run --release --example open_vocab_query -- [label]

use malegs::pipeline::{Pipeline, PipelineConfig};
use malegs::query::segment2d;
use malegs::wildscene::gt_mask;

fn main() -> malegs::Result<()> {
    let cfg = PipelineConfig::parse("seed = 3\nD = 128\nsigma_a = 0.2\nkernel = 1\nae_epochs = 60\nfield_iterations = 2000\n")?;
    let p = Pipeline::new(cfg, "target/open_vocab_query")?;
    let label = std::env::args().nth(1).unwrap_or_else(|| "class2".into());
    let class = p.world().oracle.class_id(&label);

    let v = p.eval_view_indices()?[0];
    let (score, level) = p.score_view(v, std::slice::from_ref(&label))?.remove(0);
    let mask = segment2d(&score, p.config().tau)?;
    println!("`{label}` on view {v} (level {level}), max score {:.3}", score.max());
    let gt = class.map(|c| gt_mask(&p.world().views[v], c));
    for r in (0..mask.height()).step_by(2) {
        let row: String = (0..mask.width())
            .map(|c| match (mask.get(r, c), gt.as_ref().map(|g| g.get(r, c))) {
                (true, Some(false)) => '+',
                (false, Some(true)) => '-',
                (true, _) => '#',
                _ => '.',
            })
            .collect();
        println!("{row}");
    }
    Ok(())
}
