//! Build a synthetic in-the-wild world and save its scene and photos.
//!
//!     cargo run --example gen_world -- [seed] [out_dir]

use std::collections::BTreeMap;

use malegs::wildscene::{gen_scene, SceneSpec};

fn main() -> malegs::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let out = args.next().unwrap_or_else(|| "target/gen_world".into());

    let spec = SceneSpec { seed, ..SceneSpec::default() };
    let world = gen_scene(&spec)?;

    let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for g in &world.scene.gaussians {
        *per_class.entry(g.class_id).or_default() += 1;
    }
    println!("{} gaussians", world.scene.gaussians.len());
    for (c, n) in &per_class {
        println!("  class {c} ({}): {n}", world.oracle.class_name(*c).unwrap_or("?"));
    }

    std::fs::create_dir_all(&out)?;
    world.scene.save(format!("{out}/scene.mgs"))?;
    for (i, v) in world.views.iter().enumerate() {
        v.image.save(format!("{out}/image_v{i:02}.mft"))?;
        println!(
            "view {i}: {} occluders, self-render error {:.4}",
            v.transient_regions.len(),
            world.self_render_error(v)?
        );
    }
    println!("wrote {out}");
    Ok(())
}
