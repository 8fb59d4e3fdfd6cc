//! Synthetic stand-in for an in-the-wild photo collection.
//!
//! A [`World`] holds a labeled Gaussian scene, posed views with their own
//! appearance embeddings and transient occluders, and a [`FeatureOracle`]
//! that plays the role of a vision-language feature extractor: it maps the
//! dominant class of each pixel to a unit embedding perturbed by
//! appearance-dependent, block-constant noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::PixelWeights;
use crate::seed;
use crate::splat::{quaternion_facing, Camera, Gaussian3D, Scene};
use crate::tensor::{Mask, Tensor};

/// Class id of the backdrop and of uncovered pixels.
pub const BACKGROUND_CLASS: u32 = 0;
/// Canonical contrast phrases used by relevancy scoring.
pub const CANONICAL_TEXTS: [&str; 5] = ["object", "things", "scene", "sky", "building"];
pub const TRANSIENT_NAMES: [&str; 2] = ["pedestrian", "vehicle"];
/// Upper bound on pairwise cosine between oracle embeddings.
pub const MAX_EMBEDDING_COSINE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassList {
    Count(usize),
    Names(Vec<String>),
}

impl ClassList {
    pub fn names(&self) -> Vec<String> {
        match self {
            ClassList::Count(n) => (1..=*n).map(|k| format!("class{k}")).collect(),
            ClassList::Names(v) => v.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ClassList::Count(n) => *n,
            ClassList::Names(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// World description. Keys match the structured-text scene config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Gaussians making up the labeled objects.
    pub num_gaussians: usize,
    pub classes: ClassList,
    pub views: usize,
    pub d_a: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    #[serde(rename = "C")]
    pub latent_dim: usize,
    #[serde(rename = "N")]
    pub num_slots: usize,
    pub sigma_a: f64,
    /// Fraction of views that carry transient occluders.
    pub transient_rate: f64,
    pub eps_q: f64,
    /// Defaults to `0.5 · sqrt(d_a)`.
    pub eps_d: Option<f64>,
    /// Square image side in pixels.
    pub resolution: usize,
    /// Large flattened Gaussians forming the backdrop shell.
    pub backdrop_gaussians: usize,
    /// Maximum rectangles per occluded view.
    pub max_transients: usize,
    /// Side of the square pixel blocks sharing one noise draw.
    pub noise_block: usize,
    /// Label whose oracle embedding is tied to the scene content.
    pub style: Option<String>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_gaussians: 200,
            classes: ClassList::Count(4),
            views: 8,
            d_a: 8,
            feature_dim: 512,
            latent_dim: 3,
            num_slots: 4,
            sigma_a: 0.3,
            transient_rate: 0.2,
            eps_q: 0.05,
            eps_d: None,
            resolution: 64,
            backdrop_gaussians: 64,
            max_transients: 2,
            noise_block: 8,
            style: None,
        }
    }
}

impl SceneSpec {
    pub fn eps_d(&self) -> f64 {
        self.eps_d.unwrap_or(0.5 * (self.d_a as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_gaussians == 0 {
            return bad("num_gaussians must be at least 1".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.views == 0 {
            return bad("at least one view is required".into());
        }
        if self.d_a == 0 {
            return bad("d_a must be positive".into());
        }
        if !(self.feature_dim >= self.latent_dim && self.latent_dim >= 1) {
            return bad(format!("need D >= C >= 1, got D = {}, C = {}", self.feature_dim, self.latent_dim));
        }
        if self.feature_dim < self.classes.len() + 1 + TRANSIENT_NAMES.len() {
            return bad(format!("D = {} leaves no room for {} class embeddings", self.feature_dim, self.classes.len() + 3));
        }
        if self.num_slots == 0 {
            return bad("N must be at least 1".into());
        }
        if !(self.sigma_a >= 0.0 && self.sigma_a.is_finite()) {
            return bad("sigma_a must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.transient_rate) {
            return bad("transient_rate must lie in [0, 1]".into());
        }
        if !(self.eps_q >= 0.0) || !(self.eps_d() >= 0.0) {
            return bad("eps_q and eps_d must be non-negative".into());
        }
        if self.resolution < 4 || self.noise_block == 0 {
            return bad("resolution must be >= 4 and noise_block >= 1".into());
        }
        Ok(())
    }
}

/// Appearance embedding `l` of one photo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceEmbedding(pub Vec<f32>);

impl AppearanceEmbedding {
    pub fn zeros(d_a: usize) -> Self {
        Self(vec![0.0; d_a])
    }

    pub fn manhattan(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
            .sum()
    }

    fn fingerprint(&self) -> u64 {
        let bits: Vec<u64> = self.0.iter().map(|v| u64::from(v.to_bits())).collect();
        seed::mix(0x6170_7065_6172, &bits)
    }
}

/// Fixed affine color response to an appearance embedding:
/// `clamp(c ⊙ (1 + A l) + B l, 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceModel {
    gain: Vec<[f64; 3]>,
    bias: Vec<[f64; 3]>,
}

impl AppearanceModel {
    pub fn new(d_a: usize, seed: u64) -> Self {
        let mut rng = seed::stream(seed, &[seed::tag("appearance-map")]);
        let scale = 0.5 / (d_a as f64).sqrt();
        let mut draw = || -> [f64; 3] {
            std::array::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let gain = (0..d_a).map(|_| draw()).collect();
        let bias = (0..d_a).map(|_| draw()).collect();
        Self { gain, bias }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    /// `(a(l), b(l))` with `a(0) = 1`, `b(0) = 0`.
    pub fn coefficients(&self, l: &AppearanceEmbedding) -> ([f64; 3], [f64; 3]) {
        let mut a = [1.0; 3];
        let mut b = [0.0; 3];
        for (j, &lj) in l.0.iter().enumerate() {
            let lj = f64::from(lj);
            for ch in 0..3 {
                a[ch] += self.gain[j][ch] * lj;
                b[ch] += self.bias[j][ch] * lj;
            }
        }
        (a, b)
    }

    pub fn apply(&self, color: [f32; 3], l: &AppearanceEmbedding) -> Result<[f32; 3]> {
        if l.0.len() != self.dim() {
            return Err(Error::shape(format!("d_a = {}", self.dim()), l.0.len()));
        }
        let (a, b) = self.coefficients(l);
        Ok(std::array::from_fn(|ch| {
            (f64::from(color[ch]) * a[ch] + b[ch]).clamp(0.0, 1.0) as f32
        }))
    }
}

/// `apply_appearance`: appearance-conditioned color of one Gaussian.
pub fn apply_appearance(model: &AppearanceModel, g: &Gaussian3D, l: &AppearanceEmbedding) -> Result<[f32; 3]> {
    model.apply(g.base_color, l)
}

/// Axis-aligned occluder rectangle in pixel coordinates (half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransientRegion {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub class_id: u32,
}

impl TransientRegion {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row0 + self.rows && col >= self.col0 && col < self.col0 + self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedView {
    pub camera: Camera,
    pub appearance: AppearanceEmbedding,
    pub transient_regions: Vec<TransientRegion>,
    /// The stored photo: appearance-conditioned render with occluders.
    pub image: Tensor,
    /// Dominant class per pixel of the persistent scene (row-major).
    pub dominant: Vec<u32>,
    pub gt_mask_per_query: BTreeMap<u32, Mask>,
}

impl UnconstrainedView {
    pub fn transient_at(&self, row: usize, col: usize) -> Option<&TransientRegion> {
        // Later rectangles are painted over earlier ones.
        self.transient_regions.iter().rev().find(|r| r.contains(row, col))
    }

    pub fn is_occluder_free(&self) -> bool {
        self.transient_regions.is_empty()
    }
}

/// Where a feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Extracted from the stored photo.
    Original,
    /// Extracted from the self-appearance re-rendering.
    SelfRendering,
    /// Extracted from a rendering under selected novel appearance `n`.
    NovelAppearance(usize),
    /// Encoded to the low-dimensional latent space.
    Compressed,
    /// Rendered from the field and decoded.
    Decoded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub map: Tensor,
    pub provenance: Provenance,
}

/// Stand-in for the pixel-level vision-language feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOracle {
    pub class_embeddings: BTreeMap<u32, Vec<f32>>,
    pub appearance_noise_scale: f64,
    pub seed: u64,
    pub dim: usize,
    pub noise_block: usize,
    class_names: BTreeMap<u32, String>,
    texts: BTreeMap<String, Vec<f32>>,
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl FeatureOracle {
    /// Builds embeddings for `names` (keyed by class id) plus the sky and
    /// canonical phrases, resampling until every pair has cosine at most
    /// [`MAX_EMBEDDING_COSINE`].
    pub fn new(classes: &BTreeMap<u32, String>, dim: usize, sigma_a: f64, seed: u64, noise_block: usize) -> Result<Self> {
        let mut rng = seed::stream(seed, &[seed::tag("oracle-embeddings")]);
        let mut accepted: Vec<Vec<f64>> = Vec::new();
        let mut next = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<f64>> {
            for _ in 0..1000 {
                let v = random_unit(rng, dim);
                if accepted.iter().all(|a| dot(a, &v) <= MAX_EMBEDDING_COSINE) {
                    accepted.push(v.clone());
                    return Ok(v);
                }
            }
            Err(Error::invalid(format!(
                "cannot place {} embeddings with pairwise cosine <= {MAX_EMBEDDING_COSINE} in {dim} dimensions",
                accepted.len() + 1
            )))
        };
        let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();

        let mut class_embeddings = BTreeMap::new();
        let mut texts = BTreeMap::new();
        for (&id, name) in classes {
            let e = to_f32(next(&mut rng)?);
            texts.insert(name.clone(), e.clone());
            class_embeddings.insert(id, e);
        }
        for name in CANONICAL_TEXTS {
            if !texts.contains_key(name) {
                texts.insert(name.to_string(), to_f32(next(&mut rng)?));
            }
        }
        Ok(Self {
            class_embeddings,
            appearance_noise_scale: sigma_a,
            seed,
            dim,
            noise_block,
            class_names: classes.clone(),
            texts,
        })
    }

    pub fn class_embedding(&self, class_id: u32) -> Result<&[f32]> {
        self.class_embeddings
            .get(&class_id)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClass(class_id))
    }

    pub fn class_name(&self, class_id: u32) -> Option<&str> {
        self.class_names.get(&class_id).map(String::as_str)
    }

    pub fn class_id(&self, name: &str) -> Option<u32> {
        self.class_names.iter().find(|(_, n)| n.as_str() == name).map(|(&id, _)| id)
    }

    /// Unit text embedding. Class names, `sky`, `background` and the
    /// canonical phrases have fixed embeddings; any other label gets a
    /// label-seeded random direction.
    pub fn text_embedding(&self, label: &str) -> Vec<f32> {
        if let Some(e) = self.texts.get(label) {
            return e.clone();
        }
        let mut rng = seed::stream(self.seed, &[seed::tag("text"), seed::tag(label)]);
        random_unit(&mut rng, self.dim).into_iter().map(|x| x as f32).collect()
    }

    /// Registers `label` with a fixed embedding.
    pub fn set_text(&mut self, label: &str, embedding: Vec<f32>) {
        self.texts.insert(label.to_string(), embedding);
    }

    /// Makes each of `ids` orthogonal to every other class embedding, so an
    /// occluder differs from whatever it hides by exactly the same amount.
    fn orthogonalize(&mut self, ids: &[u32]) {
        let others: Vec<Vec<f64>> = self
            .class_embeddings
            .iter()
            .filter(|(id, _)| !ids.contains(id))
            .map(|(_, e)| e.iter().map(|&x| f64::from(x)).collect())
            .collect();
        // Gram-Schmidt basis of the scene classes.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for v in others {
            let mut v = v;
            for b in &basis {
                let d = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = norm(&v);
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
        for id in ids {
            let Some(e) = self.class_embeddings.get_mut(id) else { continue };
            let mut v: Vec<f64> = e.iter().map(|&x| f64::from(x)).collect();
            for b in &basis {
                let d = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = norm(&v);
            *e = v.iter().map(|x| (x / n) as f32).collect();
            if let Some(name) = self.class_names.get(id) {
                self.texts.insert(name.clone(), e.clone());
            }
        }
    }

    /// Block-constant noise `η(appearance, class, block)` with
    /// `E‖η‖² = 1`.
    fn noise(&self, appearance: u64, class_id: u32, block: (usize, usize), level: u64) -> Vec<f64> {
        let mut rng = seed::stream(
            self.seed,
            &[seed::tag("feature-noise"), level, appearance, u64::from(class_id), block.0 as u64, block.1 as u64],
        );
        let s = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Same oracle with noise drawn from an independent stream, used for
    /// additional semantic levels.
    pub fn for_level(&self, level: usize) -> FeatureOracle {
        let mut o = self.clone();
        if level > 0 {
            o.seed = seed::mix(self.seed, &[seed::tag("level"), level as u64]);
        }
        o
    }
}

/// Generated world: scene, views and oracle.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: SceneSpec,
    pub scene: Scene,
    pub views: Vec<UnconstrainedView>,
    pub oracle: FeatureOracle,
    pub appearance_model: AppearanceModel,
    pub object_classes: Vec<u32>,
    pub transient_classes: Vec<u32>,
    /// Flat colors painted by each transient class.
    pub transient_colors: BTreeMap<u32, [f32; 3]>,
}

/// Dominant class per pixel: the class with the largest summed compositing
/// weight, with uncovered transmittance counted towards the background.
/// Ties go to the lowest class id.
pub fn dominant_classes(scene: &Scene, weights: &PixelWeights) -> Vec<u32> {
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    (0..weights.num_pixels())
        .map(|p| {
            acc.clear();
            acc.insert(BACKGROUND_CLASS, weights.background_weight(p));
            for (i, w) in weights.pixel(p) {
                *acc.entry(scene.gaussians[i].class_id).or_insert(0.0) += w;
            }
            let mut best = (BACKGROUND_CLASS, f64::NEG_INFINITY);
            for (&c, &w) in &acc {
                if w > best.1 {
                    best = (c, w);
                }
            }
            best.0
        })
        .collect()
}

/// `gen_scene`: builds the labeled scene, cameras, appearances, occluders
/// and stored photos. Pure function of `spec`.
pub fn gen_scene(spec: &SceneSpec) -> Result<World> {
    spec.validate()?;
    let names = spec.classes.names();
    let k = names.len();
    let object_classes: Vec<u32> = (1..=k as u32).collect();
    let transient_classes: Vec<u32> = (0..TRANSIENT_NAMES.len() as u32).map(|t| k as u32 + 1 + t).collect();

    let mut class_names = BTreeMap::new();
    class_names.insert(BACKGROUND_CLASS, "background".to_string());
    for (id, name) in object_classes.iter().zip(&names) {
        class_names.insert(*id, name.clone());
    }
    for (id, name) in transient_classes.iter().zip(TRANSIENT_NAMES) {
        class_names.insert(*id, name.to_string());
    }
    let mut names_sorted: Vec<&String> = class_names.values().collect();
    names_sorted.sort();
    names_sorted.dedup();
    if names_sorted.len() != class_names.len() {
        return Err(Error::Config("class names must be distinct".into()));
    }
    let mut oracle = FeatureOracle::new(&class_names, spec.feature_dim, spec.sigma_a, spec.seed, spec.noise_block)?;
    oracle.orthogonalize(&transient_classes);
    if let Some(style) = &spec.style {
        let mut mean = vec![0.0f64; spec.feature_dim];
        for id in &object_classes {
            for (m, v) in mean.iter_mut().zip(oracle.class_embedding(*id)?) {
                *m += f64::from(*v);
            }
        }
        let n = norm(&mean);
        oracle.set_text(style, mean.iter().map(|v| (v / n) as f32).collect());
    }

    let mut rng = seed::stream(spec.seed, &[seed::tag("layout")]);
    let mut gaussians = Vec::with_capacity(spec.num_gaussians + spec.backdrop_gaussians);

    // Objects: ellipsoid surfaces tiled with thin discs, arranged on a ring
    // around the origin. Discs keep silhouettes sharp where blobs would
    // smear class boundaries over several pixels.
    let ring = if k == 1 { 0.0 } else { 0.9 };
    let per_class = spec.num_gaussians / k;
    let extra = spec.num_gaussians % k;
    let golden = PI * (3.0 - 5f64.sqrt());
    for (ci, &class_id) in object_classes.iter().enumerate() {
        let angle = 2.0 * PI * ci as f64 / k as f64 + rng.random_range(-0.15..0.15);
        let center = [ring * angle.cos(), rng.random_range(-0.15..0.15), ring * angle.sin()];
        let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.32..0.45));
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.9));
        let count = per_class + usize::from(ci < extra);
        let mean_r = radii.iter().sum::<f64>() / 3.0;
        let spacing = mean_r * (4.0 * PI / count as f64).sqrt();
        let spin = rng.random_range(0.0..2.0 * PI);
        for j in 0..count {
            let y = 1.0 - 2.0 * (j as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * j as f64 + spin;
            let u = [r * th.cos(), y, r * th.sin()];
            let position: [f32; 3] = std::array::from_fn(|a| (center[a] + radii[a] * u[a]) as f32);
            let normal: [f64; 3] = std::array::from_fn(|a| u[a] / radii[a]);
            let tangent = spacing * rng.random_range(0.6..0.75);
            let scale = [tangent as f32, tangent as f32, (0.05 * tangent) as f32];
            let opacity = rng.random_range(0.9..1.0);
            let base_color: [f32; 3] =
                std::array::from_fn(|a| (color[a] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0) as f32);
            gaussians.push(Gaussian3D::new(position, scale, quaternion_facing(normal), opacity, base_color, class_id));
        }
    }

    // Backdrop: flattened discs on a sphere facing the origin.
    let shell = 12.0;
    let m = spec.backdrop_gaussians;
    if m > 0 {
        let disc = 1.6 * shell * (4.0 / m as f64).sqrt();
        for i in 0..m {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            let dir = [r * th.cos(), y, r * th.sin()];
            let position = dir.map(|d| (shell * d) as f32);
            let shade = rng.random_range(0.0..0.1);
            let base_color = [0.55 + shade as f32, 0.7 + shade as f32, 0.9];
            gaussians.push(Gaussian3D::new(
                position,
                [disc as f32, disc as f32, (0.05 * disc) as f32],
                quaternion_facing(dir),
                1.0,
                base_color,
                BACKGROUND_CLASS,
            ));
        }
    }

    let mut scene = Scene {
        gaussians,
        appearance_dim: spec.d_a,
        feature_dim_high: spec.feature_dim,
        feature_dim_low: spec.latent_dim,
        num_slots: spec.num_slots,
    };
    scene.reset_language(spec.num_slots);
    scene.validate()?;

    let appearance_model = AppearanceModel::new(spec.d_a, spec.seed);
    let transient_colors: BTreeMap<u32, [f32; 3]> = transient_classes
        .iter()
        .map(|&t| (t, std::array::from_fn(|_| rng.random_range(0.0..1.0f32))))
        .collect();

    // Exactly round(rate · views) views carry occluders.
    let occluded_count = (spec.transient_rate * spec.views as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.views).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let occluded: Vec<bool> = {
        let mut v = vec![false; spec.views];
        for &i in order.iter().take(occluded_count) {
            v[i] = true;
        }
        v
    };

    let res = spec.resolution;
    let focal = 1.6 * res as f64;
    let mut views = Vec::with_capacity(spec.views);
    for (vi, &has_transients) in occluded.iter().enumerate() {
        let azimuth = 2.0 * PI * vi as f64 / spec.views as f64 + rng.random_range(-0.2..0.2);
        let elevation = rng.random_range(0.25..0.6f64);
        let dist = 4.0;
        let eye = [
            dist * elevation.cos() * azimuth.cos(),
            dist * elevation.sin(),
            dist * elevation.cos() * azimuth.sin(),
        ];
        let camera = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], focal, (res, res));
        let appearance = AppearanceEmbedding(
            (0..spec.d_a).map(|_| 0.5 * rng.sample::<f32, _>(StandardNormal)).collect(),
        );
        let mut transient_regions = Vec::new();
        if has_transients && spec.max_transients > 0 {
            let count = rng.random_range(1..=spec.max_transients);
            for _ in 0..count {
                let rows = rng.random_range(res / 6..=res / 3).max(1);
                let cols = rng.random_range(res / 6..=res / 3).max(1);
                transient_regions.push(TransientRegion {
                    row0: rng.random_range(0..=res - rows),
                    col0: rng.random_range(0..=res - cols),
                    rows,
                    cols,
                    class_id: transient_classes[rng.random_range(0..transient_classes.len())],
                });
            }
        }
        let weights = PixelWeights::build(&scene, &camera)?;
        let dominant = dominant_classes(&scene, &weights);
        let mut view = UnconstrainedView {
            camera,
            appearance,
            transient_regions,
            image: Tensor::zeros(res, res, 3),
            dominant,
            gt_mask_per_query: BTreeMap::new(),
        };
        view.image = render_view_with(&scene, &appearance_model, &transient_colors, &weights, &view, &view.appearance, true)?;
        for &c in &object_classes {
            let m = gt_mask(&view, c);
            view.gt_mask_per_query.insert(c, m);
        }
        views.push(view);
    }

    Ok(World {
        spec: spec.clone(),
        scene,
        views,
        oracle,
        appearance_model,
        object_classes,
        transient_classes,
        transient_colors,
    })
}

fn render_view_with(
    scene: &Scene,
    model: &AppearanceModel,
    transient_colors: &BTreeMap<u32, [f32; 3]>,
    weights: &PixelWeights,
    view: &UnconstrainedView,
    appearance: &AppearanceEmbedding,
    with_transients: bool,
) -> Result<Tensor> {
    let mut colors = Vec::with_capacity(scene.gaussians.len() * 3);
    for g in &scene.gaussians {
        colors.extend(apply_appearance(model, g, appearance)?.iter().map(|&v| f64::from(v)));
    }
    let out = weights.composite(&colors, 3)?;
    let (h, w) = view.camera.resolution;
    let mut image = Tensor::from_vec(h, w, 3, out.iter().map(|&v| v as f32).collect())?;
    if with_transients {
        for r in 0..h {
            for c in 0..w {
                if let Some(t) = view.transient_at(r, c) {
                    image.pixel_mut(r * w + c).copy_from_slice(&transient_colors[&t.class_id]);
                }
            }
        }
    }
    Ok(image)
}

impl World {
    /// `render_view`: the view's camera under `appearance`, optionally with
    /// its transient occluders painted in.
    pub fn render_view(&self, view: &UnconstrainedView, appearance: &AppearanceEmbedding, with_transients: bool) -> Result<Tensor> {
        let weights = PixelWeights::build(&self.scene, &view.camera)?;
        render_view_with(&self.scene, &self.appearance_model, &self.transient_colors, &weights, view, appearance, with_transients)
    }

    /// Mean per-channel L1 error of the occluder-free self-appearance render
    /// against the stored photo.
    pub fn self_render_error(&self, view: &UnconstrainedView) -> Result<f64> {
        let render = self.render_view(view, &view.appearance, false)?;
        let total: f64 = render
            .data()
            .iter()
            .zip(view.image.data())
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
            .sum();
        Ok(total / render.data().len() as f64)
    }

    pub fn extract_features(&self, view: &UnconstrainedView, appearance: &AppearanceEmbedding, include_transients: bool) -> Result<Tensor> {
        extract_features(&self.oracle, view, appearance, include_transients, 0)
    }

    pub fn appearances(&self) -> Vec<AppearanceEmbedding> {
        self.views.iter().map(|v| v.appearance.clone()).collect()
    }
}

/// `extract_features`: per pixel, the oracle embedding of the dominant class
/// plus block-constant appearance noise, renormalized. Occluded pixels (when
/// `include_transients`) carry the clean transient embedding.
pub fn extract_features(
    oracle: &FeatureOracle,
    view: &UnconstrainedView,
    appearance: &AppearanceEmbedding,
    include_transients: bool,
    level: usize,
) -> Result<Tensor> {
    let (h, w) = view.camera.resolution;
    let d = oracle.dim;
    let fp = appearance.fingerprint();
    let block = oracle.noise_block;
    let sigma = oracle.appearance_noise_scale;
    let mut out = Tensor::zeros(h, w, d);
    let mut cache: BTreeMap<(u32, usize, usize), Vec<f32>> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let dst = out.pixel_mut(p);
            if include_transients {
                if let Some(t) = view.transient_at(r, c) {
                    dst.copy_from_slice(oracle.class_embedding(t.class_id)?);
                    continue;
                }
            }
            let class = view.dominant[p];
            let key = (class, r / block, c / block);
            if !cache.contains_key(&key) {
                let e = oracle.class_embedding(class)?;
                let v: Vec<f32> = if sigma == 0.0 {
                    e.to_vec()
                } else {
                    let eta = oracle.noise(fp, class, (key.1, key.2), level as u64);
                    let raw: Vec<f64> = e.iter().zip(&eta).map(|(&x, &n)| f64::from(x) + sigma * n).collect();
                    let n = norm(&raw);
                    raw.iter().map(|x| (x / n) as f32).collect()
                };
                cache.insert(key, v);
            }
            dst.copy_from_slice(&cache[&key]);
        }
    }
    Ok(out)
}

/// A candidate for novel-appearance selection.
#[derive(Debug, Clone)]
pub struct AppearanceCandidate {
    pub view_index: usize,
    pub embedding: AppearanceEmbedding,
    /// Self-render error against the stored photo.
    pub render_error: f64,
}

/// Greedy scan in the given order: a candidate is taken when its render
/// error is below `eps_q` and its Manhattan distance to every already taken
/// candidate exceeds `eps_d`.
pub fn select_greedy(candidates: &[AppearanceCandidate], count: usize, eps_q: f64, eps_d: f64) -> Result<Vec<usize>> {
    let mut chosen: Vec<usize> = Vec::new();
    for (i, cand) in candidates.iter().enumerate() {
        if chosen.len() == count {
            break;
        }
        if !(cand.render_error < eps_q) {
            continue;
        }
        if chosen
            .iter()
            .all(|&j| candidates[j].embedding.manhattan(&cand.embedding) > eps_d)
        {
            chosen.push(i);
        }
    }
    if chosen.len() < count {
        return Err(Error::InsufficientCandidates {
            qualified: chosen.len(),
            needed: count,
        });
    }
    Ok(chosen)
}

/// `select_novel_appearances` over all views in ascending index order.
pub fn select_novel_appearances(world: &World, count: usize, eps_q: f64, eps_d: f64) -> Result<Vec<AppearanceCandidate>> {
    if world.views.len() < count {
        return Err(Error::InsufficientCandidates {
            qualified: world.views.len(),
            needed: count,
        });
    }
    let candidates = world
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            Ok(AppearanceCandidate {
                view_index: i,
                embedding: v.appearance.clone(),
                render_error: world.self_render_error(v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let picked = select_greedy(&candidates, count, eps_q, eps_d)?;
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}

/// `gt_mask`: pixels whose dominant class is `class_id` and that are not
/// covered by an occluder.
pub fn gt_mask(view: &UnconstrainedView, class_id: u32) -> Mask {
    let (h, w) = view.camera.resolution;
    Mask::from_fn(h, w, |r, c| view.dominant[r * w + c] == class_id && view.transient_at(r, c).is_none())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            seed: 11,
            num_gaussians: 60,
            classes: ClassList::Count(3),
            views: 4,
            feature_dim: 32,
            resolution: 24,
            backdrop_gaussians: 32,
            transient_rate: 0.5,
            ..SceneSpec::default()
        }
    }

    fn spec_bytes(w: &World) -> Vec<u8> {
        let mut buf = Vec::new();
        w.scene.write_to(&mut buf).unwrap();
        for v in &w.views {
            v.image.write_to(&mut buf).unwrap();
            buf.extend(v.dominant.iter().flat_map(|d| d.to_le_bytes()));
        }
        buf
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_scene(&small_spec()).unwrap();
        let b = gen_scene(&small_spec()).unwrap();
        assert_eq!(spec_bytes(&a), spec_bytes(&b));
        let mut other = small_spec();
        other.seed = 12;
        assert_ne!(spec_bytes(&a), spec_bytes(&gen_scene(&other).unwrap()));
    }

    #[test]
    fn every_class_is_populated() {
        let spec = SceneSpec {
            classes: ClassList::Count(4),
            num_gaussians: 200,
            ..small_spec()
        };
        let w = gen_scene(&spec).unwrap();
        for c in 1..=4 {
            assert!(w.scene.gaussians.iter().any(|g| g.class_id == c));
        }
        assert_eq!(w.scene.gaussians.iter().filter(|g| g.class_id != BACKGROUND_CLASS).count(), 200);
    }

    #[test]
    fn zero_gaussians_rejected() {
        let spec = SceneSpec {
            num_gaussians: 0,
            ..small_spec()
        };
        assert!(matches!(gen_scene(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn no_transients_requested() {
        let spec = SceneSpec {
            transient_rate: 0.0,
            ..small_spec()
        };
        assert!(gen_scene(&spec).unwrap().views.iter().all(|v| v.is_occluder_free()));
        let spec = SceneSpec {
            max_transients: 0,
            ..small_spec()
        };
        assert!(gen_scene(&spec).unwrap().views.iter().all(|v| v.is_occluder_free()));
    }

    #[test]
    fn zero_appearance_is_identity() {
        let model = AppearanceModel::new(6, 3);
        let c = [0.2, 0.5, 0.9];
        assert_eq!(model.apply(c, &AppearanceEmbedding::zeros(6)).unwrap(), c);
    }

    #[test]
    fn distinct_appearances_change_color() {
        let model = AppearanceModel::new(6, 3);
        let c = [0.4, 0.5, 0.6];
        let a = model.apply(c, &AppearanceEmbedding(vec![0.5, -0.2, 0.1, 0.0, 0.3, -0.4])).unwrap();
        let b = model.apply(c, &AppearanceEmbedding(vec![-0.3, 0.4, 0.0, 0.2, -0.1, 0.6])).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn clamping_saturates() {
        let model = AppearanceModel::new(1, 5);
        // Drive the bias of every channel far positive.
        let (_, b) = model.coefficients(&AppearanceEmbedding(vec![1.0]));
        let l = AppearanceEmbedding(vec![1000.0 * b[0].signum() as f32]);
        let out = model.apply([0.0; 3], &l).unwrap();
        assert_eq!(out[0], 1.0);
        assert!(model.apply([0.0; 3], &AppearanceEmbedding(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn transients_only_change_rectangles() {
        let w = gen_scene(&small_spec()).unwrap();
        let view = w.views.iter().find(|v| !v.is_occluder_free()).unwrap();
        let clean = w.render_view(view, &view.appearance, false).unwrap();
        let dirty = w.render_view(view, &view.appearance, true).unwrap();
        let width = view.camera.width();
        for p in 0..clean.num_pixels() {
            let inside = view.transient_at(p / width, p % width).is_some();
            if !inside {
                assert_eq!(clean.pixel(p), dirty.pixel(p));
            }
        }
        assert_eq!(dirty, view.image);
        let free = w.views.iter().find(|v| v.is_occluder_free()).unwrap();
        assert_eq!(w.render_view(free, &free.appearance, false).unwrap(), free.image);
    }

    #[test]
    fn appearance_changes_render() {
        let w = gen_scene(&small_spec()).unwrap();
        let v = &w.views[0];
        let a = w.render_view(v, &w.views[0].appearance, false).unwrap();
        let b = w.render_view(v, &w.views[1].appearance, false).unwrap();
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 0.0));
    }

    #[test]
    fn zero_noise_features_are_class_embeddings() {
        let spec = SceneSpec {
            sigma_a: 0.0,
            transient_rate: 0.0,
            ..small_spec()
        };
        let w = gen_scene(&spec).unwrap();
        let v = &w.views[0];
        let f = w.extract_features(v, &v.appearance, true).unwrap();
        for p in 0..f.num_pixels() {
            assert_eq!(f.pixel(p), w.oracle.class_embedding(v.dominant[p]).unwrap());
        }
        let again = w.extract_features(v, &v.appearance, true).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn transient_features_are_clean() {
        let w = gen_scene(&small_spec()).unwrap();
        let v = w.views.iter().find(|v| !v.is_occluder_free()).unwrap();
        let f = w.extract_features(v, &v.appearance, true).unwrap();
        let t = v.transient_regions[0];
        let p = t.row0 * v.camera.width() + t.col0;
        let owner = v.transient_at(t.row0, t.col0).unwrap();
        assert_eq!(f.pixel(p), w.oracle.class_embedding(owner.class_id).unwrap());
    }

    #[test]
    fn oracle_embeddings_respect_cosine_cap() {
        let w = gen_scene(&small_spec()).unwrap();
        let embs: Vec<&Vec<f32>> = w.oracle.class_embeddings.values().collect();
        for (i, a) in embs.iter().enumerate() {
            let n: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
            for b in &embs[i + 1..] {
                let c: f32 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                assert!(f64::from(c) <= MAX_EMBEDDING_COSINE + 1e-6);
            }
        }
        assert!(matches!(w.oracle.class_embedding(99), Err(Error::UnknownClass(99))));
    }

    #[test]
    fn manhattan_distance() {
        let a = AppearanceEmbedding(vec![1.0, 2.0]);
        let b = AppearanceEmbedding(vec![0.0, 0.0]);
        assert_eq!(a.manhattan(&b), 3.0);
    }

    #[test]
    fn greedy_selection_trace() {
        // d(a, b) = 3, d(a, c) = 0.1, d(b, c) = 3.
        let cand = |i, e: Vec<f32>| AppearanceCandidate {
            view_index: i,
            embedding: AppearanceEmbedding(e),
            render_error: 0.0,
        };
        let cands = vec![cand(0, vec![0.0, 0.0]), cand(1, vec![3.0, 0.0]), cand(2, vec![0.1, 0.0])];
        assert_eq!(select_greedy(&cands, 2, 0.05, 1.0).unwrap(), vec![0, 1]);
        assert!(matches!(
            select_greedy(&cands, 2, 0.0, 1.0),
            Err(Error::InsufficientCandidates { qualified: 0, needed: 2 })
        ));
        assert!(matches!(
            select_greedy(&cands, 3, 0.05, 1.0),
            Err(Error::InsufficientCandidates { qualified: 2, needed: 3 })
        ));
    }

    #[test]
    fn selected_appearances_satisfy_constraints() {
        let w = gen_scene(&small_spec()).unwrap();
        let eps_q = 0.05;
        let eps_d = w.spec.eps_d();
        let picked = select_novel_appearances(&w, 3, eps_q, eps_d).unwrap();
        assert_eq!(picked.len(), 3);
        for (i, a) in picked.iter().enumerate() {
            assert!(a.render_error < eps_q);
            for b in &picked[i + 1..] {
                assert!(a.embedding.manhattan(&b.embedding) > eps_d);
            }
        }
        assert!(select_novel_appearances(&w, 3, 0.0, eps_d).is_err());
    }

    #[test]
    fn gt_masks_partition_the_image() {
        let w = gen_scene(&small_spec()).unwrap();
        for v in &w.views {
            let (h, wd) = v.camera.resolution;
            for r in 0..h {
                for c in 0..wd {
                    let hits = w.object_classes.iter().filter(|&&k| gt_mask(v, k).get(r, c)).count();
                    let occluded = v.transient_at(r, c).is_some();
                    let background = v.dominant[r * wd + c] == BACKGROUND_CLASS;
                    assert!(hits <= 1);
                    assert_eq!(hits == 1, !occluded && !background);
                }
            }
        }
    }

    #[test]
    fn occluder_removes_object_pixels() {
        let w = gen_scene(&small_spec()).unwrap();
        let mut v = w.views[0].clone();
        let (h, wd) = v.camera.resolution;
        let p = v.dominant.iter().position(|&d| d != BACKGROUND_CLASS).unwrap();
        let class = v.dominant[p];
        let (r, c) = (p / wd, p % wd);
        assert!(gt_mask(&v, class).get(r, c));
        v.transient_regions = vec![TransientRegion {
            row0: r.saturating_sub(1),
            col0: c.saturating_sub(1),
            rows: 3.min(h - r.saturating_sub(1)),
            cols: 3.min(wd - c.saturating_sub(1)),
            class_id: w.transient_classes[0],
        }];
        for &k in &w.object_classes {
            assert!(!gt_mask(&v, k).get(r, c));
        }
    }
}
