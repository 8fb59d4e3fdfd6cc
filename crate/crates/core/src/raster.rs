//! Front-to-back alpha compositing of per-Gaussian channel vectors and its
//! adjoint.
//!
//! With geometry fixed, compositing is linear in the channels: each pixel is
//! `Σ_i T_i α'_i f_i`. [`PixelWeights`] materializes those coefficients once
//! per view so that forward renders and backward passes are a sparse matrix
//! product and its transpose. All accumulation is `f64`; rendered targets are
//! stored as `f32`.

use crate::error::{Error, Result};
use crate::splat::{gaussian_weight_at, project_scene, Camera, Scene};
use crate::tensor::Tensor;

/// Compositing weights `T_i α'_i` for one stack of front-to-back alphas,
/// plus the final transmittance `Π (1 − α'_i)`.
pub fn front_to_back_weights(alphas: &[f64]) -> (Vec<f64>, f64) {
    let mut transmittance = 1.0;
    let weights = alphas
        .iter()
        .map(|&a| {
            let w = transmittance * a;
            transmittance *= 1.0 - a;
            w
        })
        .collect();
    (weights, transmittance)
}

/// Sparse per-pixel compositing coefficients for a fixed scene geometry and
/// camera. Entries of each pixel are in front-to-back order.
#[derive(Debug, Clone)]
pub struct PixelWeights {
    height: usize,
    width: usize,
    num_gaussians: usize,
    offsets: Vec<usize>,
    sources: Vec<u32>,
    weights: Vec<f64>,
    alpha: Vec<f64>,
}

impl PixelWeights {
    pub fn build(scene: &Scene, cam: &Camera) -> Result<PixelWeights> {
        let (height, width) = cam.resolution;
        let splats = project_scene(scene, cam)?;
        let mut stacks: Vec<Vec<(u32, f64)>> = vec![Vec::new(); height * width];
        for s in &splats {
            let Some((r0, r1, c0, c1)) = s.pixel_bounds(height, width) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let a = gaussian_weight_at(s, [c as f64 + 0.5, r as f64 + 0.5]);
                    if a > 0.0 {
                        stacks[r * width + c].push((s.source_index as u32, a));
                    }
                }
            }
        }

        let total = stacks.iter().map(Vec::len).sum();
        let mut offsets = Vec::with_capacity(height * width + 1);
        let mut sources = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        let mut alpha = Vec::with_capacity(height * width);
        let mut alphas = Vec::new();
        offsets.push(0);
        for stack in &stacks {
            alphas.clear();
            alphas.extend(stack.iter().map(|&(_, a)| a));
            let (w, t) = front_to_back_weights(&alphas);
            sources.extend(stack.iter().map(|&(i, _)| i));
            weights.extend(w);
            alpha.push(1.0 - t);
            offsets.push(sources.len());
        }
        Ok(PixelWeights {
            height,
            width,
            num_gaussians: scene.gaussians.len(),
            offsets,
            sources,
            weights,
            alpha,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn num_gaussians(&self) -> usize {
        self.num_gaussians
    }

    /// `(gaussian index, weight)` pairs of pixel `p`, front to back.
    pub fn pixel(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[p]..self.offsets[p + 1];
        self.sources[range.clone()]
            .iter()
            .zip(&self.weights[range])
            .map(|(&i, &w)| (i as usize, w))
    }

    pub fn alpha(&self, p: usize) -> f64 {
        self.alpha[p]
    }

    /// Transmittance left after the last splat, i.e. the background weight.
    pub fn background_weight(&self, p: usize) -> f64 {
        1.0 - self.alpha[p]
    }

    /// Composites `k` channels per Gaussian (row-major `num_gaussians × k`)
    /// into a row-major `H × W × k` buffer.
    pub fn composite(&self, channels: &[f64], k: usize) -> Result<Vec<f64>> {
        if channels.len() != self.num_gaussians * k {
            return Err(Error::shape(self.num_gaussians * k, channels.len()));
        }
        if !channels.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("render channels"));
        }
        let mut out = vec![0.0; self.num_pixels() * k];
        for p in 0..self.num_pixels() {
            let dst = &mut out[p * k..(p + 1) * k];
            for (i, w) in self.pixel(p) {
                let src = &channels[i * k..(i + 1) * k];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`composite`](Self::composite): maps an `H × W × k`
    /// upstream gradient to per-Gaussian `num_gaussians × k` gradients.
    /// Pixels are reduced in ascending order, so results are reproducible.
    pub fn adjoint(&self, upstream: &[f64], k: usize) -> Result<Vec<f64>> {
        if upstream.len() != self.num_pixels() * k {
            return Err(Error::shape(self.num_pixels() * k, upstream.len()));
        }
        let mut grad = vec![0.0; self.num_gaussians * k];
        for p in 0..self.num_pixels() {
            let up = &upstream[p * k..(p + 1) * k];
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            for (i, w) in self.pixel(p) {
                for (g, u) in grad[i * k..(i + 1) * k].iter_mut().zip(up) {
                    *g += w * u;
                }
            }
        }
        Ok(grad)
    }

    pub fn alpha_tensor(&self) -> Tensor {
        let data = self.alpha.iter().map(|&a| a as f32).collect();
        Tensor::from_vec(self.height, self.width, 1, data).expect("alpha shape")
    }
}

/// Which per-Gaussian vector to composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSelector {
    BaseColor,
    /// Language slot `n` (`C` channels).
    Language(usize),
}

impl ChannelSelector {
    pub fn width(&self, scene: &Scene) -> usize {
        match self {
            ChannelSelector::BaseColor => 3,
            ChannelSelector::Language(_) => scene.feature_dim_low,
        }
    }

    /// Gathers the selected vectors into a row-major `num_gaussians × k` buffer.
    pub fn gather(&self, scene: &Scene) -> Result<Vec<f64>> {
        let k = self.width(scene);
        let mut out = Vec::with_capacity(scene.gaussians.len() * k);
        for g in &scene.gaussians {
            match *self {
                ChannelSelector::BaseColor => out.extend(g.base_color.iter().map(|&v| f64::from(v))),
                ChannelSelector::Language(n) => {
                    if n >= scene.num_slots || g.lang_features.len() != scene.num_slots * k {
                        return Err(Error::invalid(format!(
                            "language slot {n} not populated (N = {})",
                            scene.num_slots
                        )));
                    }
                    out.extend(g.slot(n, k).iter().map(|&v| f64::from(v)));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderTarget {
    pub channels: Tensor,
    pub alpha_accum: Tensor,
}

/// Per-Gaussian `∂loss/∂channel`, row-major `num_gaussians × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGradients {
    pub k: usize,
    pub values: Vec<f64>,
}

impl ChannelGradients {
    pub fn of(&self, gaussian: usize) -> &[f64] {
        &self.values[gaussian * self.k..(gaussian + 1) * self.k]
    }
}

/// Builds a render target from an `f64` composite.
pub fn to_target(weights: &PixelWeights, composite: &[f64], k: usize) -> RenderTarget {
    let data = composite.iter().map(|&v| v as f32).collect();
    RenderTarget {
        channels: Tensor::from_vec(weights.height(), weights.width(), k, data).expect("render shape"),
        alpha_accum: weights.alpha_tensor(),
    }
}

/// Composites arbitrary per-Gaussian channels (`num_gaussians × k`).
pub fn render_channels(scene: &Scene, cam: &Camera, channels: &[f64], k: usize) -> Result<RenderTarget> {
    let weights = PixelWeights::build(scene, cam)?;
    let out = weights.composite(channels, k)?;
    Ok(to_target(&weights, &out, k))
}

pub fn render(scene: &Scene, cam: &Camera, selector: ChannelSelector) -> Result<RenderTarget> {
    let channels = selector.gather(scene)?;
    render_channels(scene, cam, &channels, selector.width(scene))
}

/// One `C`-channel target per language slot, sharing a single geometry pass.
pub fn render_language_maps(scene: &Scene, cam: &Camera) -> Result<Vec<RenderTarget>> {
    let weights = PixelWeights::build(scene, cam)?;
    (0..scene.num_slots)
        .map(|n| {
            let sel = ChannelSelector::Language(n);
            let out = weights.composite(&sel.gather(scene)?, sel.width(scene))?;
            Ok(to_target(&weights, &out, sel.width(scene)))
        })
        .collect()
}

pub fn backward_channels(
    scene: &Scene,
    cam: &Camera,
    selector: ChannelSelector,
    upstream: &Tensor,
) -> Result<ChannelGradients> {
    let k = selector.width(scene);
    let (h, w) = cam.resolution;
    if upstream.shape() != (h, w, k) {
        return Err(Error::shape(format!("{:?}", (h, w, k)), format!("{:?}", upstream.shape())));
    }
    let weights = PixelWeights::build(scene, cam)?;
    let up: Vec<f64> = upstream.data().iter().map(|&v| f64::from(v)).collect();
    Ok(ChannelGradients {
        k,
        values: weights.adjoint(&up, k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian3D;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn front_camera(size: usize) -> Camera {
        Camera {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            focal: [size as f64, size as f64],
            principal_point: [size as f64 / 2.0, size as f64 / 2.0],
            resolution: (size, size),
            near_plane: 0.1,
        }
    }

    fn scene_of(gaussians: Vec<Gaussian3D>, c: usize) -> Scene {
        Scene {
            gaussians,
            appearance_dim: 2,
            feature_dim_high: c.max(1),
            feature_dim_low: c,
            num_slots: 1,
        }
    }

    fn random_scene(rng: &mut ChaCha8Rng, count: usize, c: usize, slots: usize) -> Scene {
        let gaussians = (0..count)
            .map(|_| {
                let mut g = Gaussian3D::new(
                    [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(2.0..4.0)],
                    [rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)],
                    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0],
                    rng.random_range(0.2..1.0),
                    [rng.random(), rng.random(), rng.random()],
                    0,
                );
                g.lang_features = (0..slots * c).map(|_| rng.random_range(-1.0..1.0)).collect();
                g
            })
            .collect();
        Scene {
            num_slots: slots,
            ..scene_of(gaussians, c)
        }
    }

    #[test]
    fn two_half_alpha_splats() {
        let (w, t) = front_to_back_weights(&[0.5, 0.5]);
        assert_eq!(w, vec![0.5, 0.25]);
        assert_eq!(1.0 - t, 0.75);
        let pixel: Vec<f64> = (0..2)
            .map(|ch| {
                let f = [[1.0, 0.0], [0.0, 1.0]];
                w[0] * f[0][ch] + w[1] * f[1][ch]
            })
            .collect();
        assert_eq!(pixel, vec![0.5, 0.25]);
    }

    #[test]
    fn opaque_splat_reproduces_its_channel() {
        let mut g = Gaussian3D::new([0.0, 0.0, 2.0], [0.3; 3], [1.0, 0.0, 0.0, 0.0], 1.0, [0.0; 3], 0);
        g.lang_features = vec![0.2, 0.7];
        let scene = scene_of(vec![g], 2);
        let cam = front_camera(16);
        let t = render(&scene, &cam, ChannelSelector::Language(0)).unwrap();
        // The pixel whose center coincides with the splat center gets α' = 1.
        let mut cam_c = cam.clone();
        cam_c.principal_point = [8.5, 8.5];
        let t2 = render(&scene, &cam_c, ChannelSelector::Language(0)).unwrap();
        let p = 8 * 16 + 8;
        assert_abs_diff_eq!(t2.channels.pixel(p)[0], 0.2, epsilon = 1e-7);
        assert_abs_diff_eq!(t2.channels.pixel(p)[1], 0.7, epsilon = 1e-7);
        assert_eq!(t2.alpha_accum.data()[p], 1.0);
        assert!(t.alpha_accum.max() <= 1.0);
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = scene_of(vec![], 3);
        let t = render(&scene, &front_camera(8), ChannelSelector::BaseColor).unwrap();
        assert!(t.channels.data().iter().all(|&v| v == 0.0));
        assert!(t.alpha_accum.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut scene = random_scene(&mut rng, 3, 2, 1);
        scene.gaussians[1].lang_features[0] = f32::NAN;
        assert!(matches!(
            render(&scene, &front_camera(8), ChannelSelector::Language(0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn language_maps_match_individual_renders() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut scene = random_scene(&mut rng, 6, 3, 4);
        let cam = front_camera(16);
        let maps = render_language_maps(&scene, &cam).unwrap();
        assert_eq!(maps.len(), 4);
        for (n, m) in maps.iter().enumerate() {
            assert_eq!(m, &render(&scene, &cam, ChannelSelector::Language(n)).unwrap());
        }

        for g in &mut scene.gaussians {
            let first = g.slot(0, 3).to_vec();
            for n in 1..4 {
                g.slot_mut(n, 3).copy_from_slice(&first);
            }
            g.slot_mut(2, 3).fill(0.0);
        }
        let maps = render_language_maps(&scene, &cam).unwrap();
        assert_eq!(maps[0], maps[1]);
        assert_eq!(maps[0], maps[3]);
        assert!(maps[2].channels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_opaque_splat_gradient_counts_footprint() {
        // A huge, fully opaque splat covers the whole image with α' = 1 only
        // at its center; use a tiny image around the center instead.
        let mut g = Gaussian3D::new([0.0, 0.0, 2.0], [1.0; 3], [1.0, 0.0, 0.0, 0.0], 1.0, [0.0; 3], 0);
        g.lang_features = vec![0.0; 2];
        let scene = scene_of(vec![g], 2);
        let cam = front_camera(4);
        let weights = PixelWeights::build(&scene, &cam).unwrap();
        let upstream = Tensor::filled(4, 4, 2, 1.0);
        let grads = backward_channels(&scene, &cam, ChannelSelector::Language(0), &upstream).unwrap();
        let expected: f64 = (0..16).flat_map(|p| weights.pixel(p).map(|(_, w)| w)).sum();
        assert_abs_diff_eq!(grads.of(0)[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(grads.of(0)[1], expected, epsilon = 1e-12);

        let zero = backward_channels(&scene, &cam, ChannelSelector::Language(0), &Tensor::zeros(4, 4, 2)).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));

        assert!(backward_channels(&scene, &cam, ChannelSelector::Language(0), &Tensor::zeros(4, 4, 3)).is_err());
    }

    #[test]
    fn gradient_counts_unit_weight_pixels() {
        // Centered opaque splat: α' = 1 exactly on the center pixel, so an
        // upstream indicator of that pixel yields gradient 1 (P = 1).
        let mut g = Gaussian3D::new([0.0, 0.0, 2.0], [0.2; 3], [1.0, 0.0, 0.0, 0.0], 1.0, [0.0; 3], 0);
        g.lang_features = vec![0.0; 3];
        let scene = scene_of(vec![g], 3);
        let mut cam = front_camera(9);
        cam.principal_point = [4.5, 4.5];
        let mut up = Tensor::zeros(9, 9, 3);
        for ch in 0..3 {
            up.set(4, 4, ch, 1.0);
        }
        let grads = backward_channels(&scene, &cam, ChannelSelector::Language(0), &up).unwrap();
        assert_eq!(grads.of(0), &[1.0, 1.0, 1.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn compositing_properties(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = random_scene(&mut rng, 12, 2, 2);
            let cam = front_camera(12);
            let weights = PixelWeights::build(&scene, &cam).unwrap();
            let f = ChannelSelector::Language(0).gather(&scene).unwrap();
            let g = ChannelSelector::Language(1).gather(&scene).unwrap();
            let rf = weights.composite(&f, 2).unwrap();
            let rg = weights.composite(&g, 2).unwrap();
            let (a, b) = (0.7, -1.3);
            let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
            let rmix = weights.composite(&mix, 2).unwrap();
            for i in 0..rf.len() {
                prop_assert!((rmix[i] - (a * rf[i] + b * rg[i])).abs() <= 1e-6);
            }
            let (lo, hi) = f.iter().fold((0.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
            for p in 0..weights.num_pixels() {
                let sum: f64 = weights.pixel(p).map(|(_, w)| w).sum();
                prop_assert!((sum - weights.alpha(p)).abs() <= 1e-6);
                prop_assert!((0.0..=1.0).contains(&weights.alpha(p)));
                for ch in 0..2 {
                    let v = rf[p * 2 + ch];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
