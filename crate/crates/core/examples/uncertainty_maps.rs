//! Appearance and transient uncertainty of one occluded view, and the
//! occluder mask recovered from the latter. Without appearance noise the
//! mask is exactly the occluder rectangle.
//!
//!     cargo run --example uncertainty_maps

use malegs::uncertainty::{appearance_uncertainty, normalize_maps, occluder_mask, transient_uncertainty};
use malegs::wildscene::{extract_features, gen_scene, select_novel_appearances, SceneSpec};

fn main() -> malegs::Result<()> {
    let spec = SceneSpec {
        feature_dim: 64,
        resolution: 32,
        transient_rate: 0.5,
        max_transients: 1,
        sigma_a: 0.0,
        ..SceneSpec::default()
    };
    let world = gen_scene(&spec)?;
    let novel = select_novel_appearances(&world, spec.num_slots - 1, spec.eps_q, spec.eps_d())?;
    let (vi, view) = world
        .views
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_occluder_free())
        .expect("half the views carry occluders");

    let self_render = extract_features(&world.oracle, view, &view.appearance, false, 0)?;
    let original = extract_features(&world.oracle, view, &view.appearance, true, 0)?;
    let mut maps = Vec::new();
    for c in &novel {
        maps.push(extract_features(&world.oracle, view, &c.embedding, false, 0)?);
    }
    maps.push(self_render.clone());

    let mut u_a = [appearance_uncertainty(&maps.iter().collect::<Vec<_>>())?];
    let mut u_t = [transient_uncertainty(&self_render, &original)?];
    normalize_maps(&mut u_a)?;
    normalize_maps(&mut u_t)?;
    let mask = occluder_mask(&u_t[0], 0.9)?;

    println!("view {vi}, occluders {:?}", view.transient_regions);
    println!("mean U^A (appearance changes colors, not classes) {:.3}", u_a[0].values.data().iter().sum::<f32>() / u_a[0].values.num_pixels() as f32);
    let exact = (0..mask.height()).all(|r| (0..mask.width()).all(|c| mask.get(r, c) == view.transient_at(r, c).is_some()));
    println!("mask equals the occluders: {exact}");
    for r in 0..mask.height() {
        let row: String = (0..mask.width()).map(|c| if mask.get(r, c) { '#' } else { '.' }).collect();
        println!("{row}");
    }
    Ok(())
}
