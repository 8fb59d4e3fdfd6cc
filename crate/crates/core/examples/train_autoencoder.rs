//! Compress 512-d oracle features to 3-d latents and check that decoded
//! features still land on the right class.
//!
//!     cargo run --release --example train_autoencoder

use malegs::autoencoder::{train_ae, AeDataset, TrainConfig};
use malegs::wildscene::{extract_features, gen_scene, SceneSpec};

fn main() -> malegs::Result<()> {
    let spec = SceneSpec { views: 6, ..SceneSpec::default() };
    let world = gen_scene(&spec)?;
    let feats: Vec<_> = world
        .views
        .iter()
        .map(|v| extract_features(&world.oracle, v, &v.appearance, true, 0))
        .collect::<malegs::Result<_>>()?;
    let maps: Vec<_> = feats.iter().map(|f| (f, None)).collect();
    let cfg = TrainConfig::default();
    let data = AeDataset::from_maps(&maps, cfg.tau_u, cfg.max_samples, 1)?;
    let (ae, curve) = train_ae(&data, spec.latent_dim, &cfg)?;
    println!("loss {:.4} -> {:.4} over {} epochs", curve.initial, curve.last(), curve.epochs.len());

    for (&c, e) in &world.oracle.class_embeddings {
        let z = ae.encode(e)?;
        let back = ae.decode(&z)?;
        let cos: f32 = back.iter().zip(e).map(|(a, b)| a * b).sum();
        println!("class {c:>2}: latent {z:>7.3?}, cosine after round trip {cos:.3}");
    }
    Ok(())
}
