//! Composite per-Gaussian channels into an image and pull a pixel loss back
//! onto the Gaussians through the adjoint.
//!
//!     cargo run --example rasterize

use malegs::raster::PixelWeights;
use malegs::wildscene::{dominant_classes, gen_scene, SceneSpec};

fn main() -> malegs::Result<()> {
    let world = gen_scene(&SceneSpec {
        num_gaussians: 80,
        resolution: 32,
        views: 1,
        ..SceneSpec::default()
    })?;
    let cam = &world.views[0].camera;
    let weights = PixelWeights::build(&world.scene, cam)?;

    // Mean base color, and the class holding most blend weight per pixel.
    let colors: Vec<f64> = world.scene.gaussians.iter().flat_map(|g| g.base_color.map(f64::from)).collect();
    let img = weights.composite(&colors, 3)?;
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    println!("mean composited color {mean:.3}");
    let dominant = dominant_classes(&world.scene, &weights);
    for r in 0..32 {
        let row: String = dominant[r * 32..(r + 1) * 32]
            .iter()
            .map(|&c| if c == 0 { '.' } else { char::from_digit(c, 10).unwrap_or('#') })
            .collect();
        println!("|{row}|");
    }

    // d(sum of pixels)/d(channel) is each Gaussian's total blend weight.
    let grad = weights.adjoint(&vec![1.0; weights.num_pixels()], 1)?;
    let (top, g) = grad
        .iter()
        .enumerate()
        .filter(|(i, _)| world.scene.gaussians[*i].class_id != 0)
        .fold((0, 0.0), |b, (i, &g)| if g > b.1 { (i, g) } else { b });
    println!("most visible object gaussian: #{top} (class {}), total weight {g:.3}", world.scene.gaussians[top].class_id);
    Ok(())
}
