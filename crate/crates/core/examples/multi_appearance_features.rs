//! Pick novel appearances under the quality and distance constraints and
//! extract features under each of them.
//!
//!     cargo run --example multi_appearance_features

use malegs::wildscene::{extract_features, gen_scene, select_novel_appearances, SceneSpec};

fn main() -> malegs::Result<()> {
    let spec = SceneSpec {
        feature_dim: 64,
        resolution: 32,
        ..SceneSpec::default()
    };
    let world = gen_scene(&spec)?;
    let picked = select_novel_appearances(&world, spec.num_slots - 1, spec.eps_q, spec.eps_d())?;
    for c in &picked {
        println!("view {} appearance, render error {:.4}", c.view_index, c.render_error);
    }

    let view = &world.views[0];
    let original = extract_features(&world.oracle, view, &view.appearance, true, 0)?;
    for c in &picked {
        let f = extract_features(&world.oracle, view, &c.embedding, false, 0)?;
        let mean_cos: f64 = (0..f.num_pixels())
            .map(|p| f.pixel(p).iter().zip(original.pixel(p)).map(|(a, b)| f64::from(a * b)).sum::<f64>())
            .sum::<f64>()
            / f.num_pixels() as f64;
        println!("novel appearance from view {}: mean cosine to original {mean_cos:.3}", c.view_index);
    }
    Ok(())
}
