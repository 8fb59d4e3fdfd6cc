//! Winner-takes-all vote over candidate style words.
//!
//!     cargo run --release --example style_vote

use malegs::pipeline::{Pipeline, PipelineConfig};

fn main() -> malegs::Result<()> {
    let cfg = PipelineConfig::parse(
        "seed = 5\nD = 128\nresolution = 48\nstyle = \"baroque\"\nstyles = [\"baroque\", \"gothic\", \"modern\"]\n\
         kernel = 1\nae_epochs = 60\nfield_iterations = 1500\n",
    )?;
    let p = Pipeline::new(cfg, "target/style_vote")?;
    let vote = p.style_vote()?;
    for (s, n) in &vote.votes {
        println!("{s:<8} {n}");
    }
    println!("winner: {}", vote.winner);
    Ok(())
}
