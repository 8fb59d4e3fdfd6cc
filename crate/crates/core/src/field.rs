//! Multi-appearance language field: `N` compressed-feature slots per
//! Gaussian fitted to per-view latent targets under uncertainty weighting.
//!
//! Slots `0..N-1` hold the novel appearances and slot `N-1` the view's own
//! (original) features. Geometry is frozen; only `lang_features` change.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autoencoder::MlpParams;
use crate::error::{Error, Result};
use crate::raster::{ChannelGradients, ChannelSelector, PixelWeights};
use crate::seed;
use crate::splat::{Camera, Scene};
use crate::tensor::Tensor;
use crate::uncertainty::{UncertaintyKind, UncertaintyMap};

/// Targets of one training view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTargets {
    pub camera: Camera,
    /// `N` latent maps with `C` channels; the last one is the original image.
    pub latents: Vec<Tensor>,
    pub u_a: UncertaintyMap,
    pub u_t: UncertaintyMap,
}

impl ViewTargets {
    pub fn num_slots(&self) -> usize {
        self.latents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.latents.first().ok_or_else(|| Error::invalid("view has no latent maps"))?;
        let (h, w) = self.camera.resolution;
        if (first.height(), first.width()) != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", first.height(), first.width())));
        }
        for t in &self.latents[1..] {
            first.ensure_shape(t)?;
        }
        for (u, kind) in [(&self.u_a, UncertaintyKind::Appearance), (&self.u_t, UncertaintyKind::Transient)] {
            if u.kind != kind || !u.normalized {
                return Err(Error::invalid(format!("{kind:?} uncertainty must be normalized")));
            }
            if u.values.shape() != (h, w, 1) {
                return Err(Error::shape(format!("{h}x{w}x1"), format!("{:?}", u.values.shape())));
            }
        }
        Ok(())
    }

    /// Per-pixel loss weight `(1 − U^A)(1 − U^T)`.
    pub fn pixel_weights(&self) -> Vec<f64> {
        self.u_a
            .values
            .data()
            .iter()
            .zip(self.u_t.values.data())
            .map(|(&a, &t)| (1.0 - f64::from(a)) * (1.0 - f64::from(t)))
            .collect()
    }
}

/// Encodes each of the `N` raw feature maps of a view; uncertainty maps pass
/// through unchanged.
pub fn build_targets(
    encoder: &MlpParams<f32>,
    camera: &Camera,
    features: &[&Tensor],
    u_a: UncertaintyMap,
    u_t: UncertaintyMap,
) -> Result<ViewTargets> {
    let latents = features.iter().map(|f| encoder.encode_map(f)).collect::<Result<Vec<_>>>()?;
    let t = ViewTargets {
        camera: camera.clone(),
        latents,
        u_a,
        u_t,
    };
    t.validate()?;
    Ok(t)
}

/// Loss of one view and the per-slot gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldLoss {
    pub loss: f64,
    pub slot_losses: Vec<f64>,
    pub gradients: Vec<ChannelGradients>,
}

fn check_scene(scene: &Scene, targets: &ViewTargets) -> Result<()> {
    if scene.num_slots != targets.num_slots() {
        return Err(Error::shape(format!("{} slots", scene.num_slots), format!("{} target maps", targets.num_slots())));
    }
    if targets.latents[0].channels() != scene.feature_dim_low {
        return Err(Error::shape(scene.feature_dim_low, targets.latents[0].channels()));
    }
    Ok(())
}

fn slot_loss(weights: &PixelWeights, channels: &[f64], target: &Tensor, omega: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = target.channels();
    let rendered = weights.composite(channels, k)?;
    let scale = 1.0 / weights.num_pixels() as f64;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; rendered.len()];
    for (p, &om) in omega.iter().enumerate() {
        if om == 0.0 {
            continue;
        }
        for c in 0..k {
            let i = p * k + c;
            let r = rendered[i] - f64::from(target.data()[i]);
            loss += om * r.abs();
            if r != 0.0 {
                upstream[i] = om * scale * r.signum();
            }
        }
    }
    Ok((loss * scale, weights.adjoint(&upstream, k)?))
}

/// `Σ_n ‖(H̃_n − H_n) ⊙ (1 − U^A) ⊙ (1 − U^T)‖₁ / (H·W)` and its gradient
/// with respect to every slot of every Gaussian.
pub fn field_loss_with(scene: &Scene, weights: &PixelWeights, targets: &ViewTargets) -> Result<FieldLoss> {
    check_scene(scene, targets)?;
    let omega = targets.pixel_weights();
    let k = scene.feature_dim_low;
    let mut out = FieldLoss {
        loss: 0.0,
        slot_losses: Vec::with_capacity(scene.num_slots),
        gradients: Vec::with_capacity(scene.num_slots),
    };
    for (n, target) in targets.latents.iter().enumerate() {
        let channels = ChannelSelector::Language(n).gather(scene)?;
        let (l, g) = slot_loss(weights, &channels, target, &omega)?;
        out.loss += l;
        out.slot_losses.push(l);
        out.gradients.push(ChannelGradients { k, values: g });
    }
    Ok(out)
}

pub fn field_loss(scene: &Scene, targets: &ViewTargets) -> Result<FieldLoss> {
    let weights = PixelWeights::build(scene, &targets.camera)?;
    field_loss_with(scene, &weights, targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldTrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FieldTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            learning_rate: 0.0025,
            seed: 0,
        }
    }
}

impl FieldTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("field learning_rate = {} must be finite and >= 0", self.learning_rate)));
        }
        Ok(())
    }
}

/// Adam state of one slot (`num_gaussians × C`).
#[derive(Debug, Clone)]
struct SlotAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl SlotAdam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Loss of every iteration (one view each).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldReport {
    pub losses: Vec<f64>,
    pub view_order: Vec<usize>,
}

/// Zero-initializes the language slots and fits them with Adam, one view per
/// iteration in seeded shuffled passes. Everything but `lang_features` is
/// left bit-identical.
pub fn train_field(scene: &Scene, targets: &[ViewTargets], cfg: &FieldTrainConfig) -> Result<(Scene, FieldReport)> {
    cfg.validate()?;
    let first = targets.first().ok_or_else(|| Error::invalid("field training needs at least one view"))?;
    let (n_slots, k) = (first.num_slots(), first.latents[0].channels());
    let mut scene = scene.clone();
    scene.feature_dim_low = k;
    scene.reset_language(n_slots);
    for t in targets {
        t.validate()?;
        check_scene(&scene, t)?;
    }
    let pixel_weights = targets
        .iter()
        .map(|t| PixelWeights::build(&scene, &t.camera))
        .collect::<Result<Vec<_>>>()?;
    let omegas: Vec<Vec<f64>> = targets.iter().map(ViewTargets::pixel_weights).collect();

    let g = scene.gaussians.len();
    let mut slots: Vec<Vec<f64>> = (0..n_slots).map(|_| vec![0.0; g * k]).collect();
    let mut adam: Vec<SlotAdam> = (0..n_slots).map(|_| SlotAdam::new(g * k)).collect();
    let mut report = FieldReport::default();
    let mut order: Vec<usize> = Vec::new();
    let mut pass = 0u64;
    for it in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..targets.len()).collect();
            order.shuffle(&mut seed::stream(cfg.seed, &[seed::tag("field-views"), pass]));
            order.reverse();
            pass += 1;
        }
        let v = order.pop().expect("refilled above");
        let mut total = 0.0;
        for n in 0..n_slots {
            let (l, grad) = slot_loss(&pixel_weights[v], &slots[n], &targets[v].latents[n], &omegas[v])?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    what: "language field",
                    step: it,
                    loss: l,
                });
            }
            total += l;
            adam[n].step(&mut slots[n], &grad, cfg.learning_rate);
        }
        report.losses.push(total);
        report.view_order.push(v);
    }
    for (i, gs) in scene.gaussians.iter_mut().enumerate() {
        for (n, slot) in slots.iter().enumerate() {
            for (dst, &src) in gs.slot_mut(n, k).iter_mut().zip(&slot[i * k..(i + 1) * k]) {
                *dst = src as f32;
            }
        }
    }
    scene.validate()?;
    Ok((scene, report))
}
