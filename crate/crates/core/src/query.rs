//! Open-vocabulary querying of rendered language fields: relevancy scores,
//! background filter, multi-appearance fusion, smoothing, thresholding,
//! level selection, Gaussian-level selection and style voting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autoencoder::MlpParams;
use crate::error::{Error, Result};
use crate::splat::Scene;
use crate::tensor::{Mask, Tensor};
use crate::wildscene::{FeatureOracle, CANONICAL_TEXTS};

/// Texts whose relevancy marks a pixel as background.
pub const BACKGROUND_TEXTS: [&str; 2] = ["sky", "background"];
pub const DEFAULT_TAU: f64 = 0.4;
pub const DEFAULT_KERNEL: usize = 20;
const UNIT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub label: String,
    pub vector: Vec<f32>,
}

impl QueryEmbedding {
    pub fn new(label: impl Into<String>, vector: Vec<f32>) -> Result<Self> {
        let n: f64 = vector.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("query embedding norm {n} is not 1")));
        }
        Ok(Self {
            label: label.into(),
            vector,
        })
    }

    pub fn from_oracle(oracle: &FeatureOracle, label: &str) -> Self {
        Self {
            label: label.to_string(),
            vector: oracle.text_embedding(label),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalSet(pub Vec<QueryEmbedding>);

impl CanonicalSet {
    pub fn from_oracle(oracle: &FeatureOracle) -> Self {
        Self(CANONICAL_TEXTS.iter().map(|t| QueryEmbedding::from_oracle(oracle, t)).collect())
    }

    pub fn background(oracle: &FeatureOracle) -> Self {
        Self(BACKGROUND_TEXTS.iter().map(|t| QueryEmbedding::from_oracle(oracle, t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreSource {
    Slot(usize),
    Background,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// `H × W × 1`.
    pub values: Tensor,
    pub label: String,
    pub source: ScoreSource,
}

impl ScoreMap {
    pub fn new(values: Tensor, label: impl Into<String>, source: ScoreSource) -> Result<Self> {
        if values.channels() != 1 {
            return Err(Error::shape("1 channel", values.channels()));
        }
        Ok(Self {
            values,
            label: label.into(),
            source,
        })
    }

    pub fn max(&self) -> f64 {
        f64::from(self.values.max())
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// `min_j exp(q·f) / (exp(q·f) + exp(c_j·f))` for a single feature.
pub fn relevancy(feature: &[f32], q: &[f32], canon: &[&[f32]]) -> Result<f64> {
    if canon.is_empty() {
        return Err(Error::invalid("empty canonical set"));
    }
    let qf = dot(q, feature);
    Ok(canon
        .iter()
        .map(|c| 1.0 / (1.0 + (dot(c, feature) - qf).exp()))
        .fold(f64::INFINITY, f64::min))
}

fn per_pixel(decoded: &Tensor, f: impl Fn(&[f32]) -> Result<f64>) -> Result<Tensor> {
    let (h, w, _) = decoded.shape();
    let data = (0..h * w).map(|p| f(decoded.pixel(p)).map(|v| v as f32)).collect::<Result<_>>()?;
    Tensor::from_vec(h, w, 1, data)
}

fn check_dims(decoded: &Tensor, vectors: &[&QueryEmbedding]) -> Result<()> {
    for v in vectors {
        if v.vector.len() != decoded.channels() {
            return Err(Error::shape(decoded.channels(), v.vector.len()));
        }
    }
    Ok(())
}

pub fn relevancy_map(decoded: &Tensor, q: &QueryEmbedding, canon: &CanonicalSet, source: ScoreSource) -> Result<ScoreMap> {
    check_dims(decoded, &[q])?;
    check_dims(decoded, &canon.0.iter().collect::<Vec<_>>())?;
    let cs: Vec<&[f32]> = canon.0.iter().map(|c| c.vector.as_slice()).collect();
    let values = per_pixel(decoded, |f| relevancy(f, &q.vector, &cs))?;
    ScoreMap::new(values, &q.label, source)
}

/// `1 − max_b relevancy(F, b, {q})` over the background texts.
pub fn background_score(decoded: &Tensor, q: &QueryEmbedding, background: &CanonicalSet) -> Result<ScoreMap> {
    if background.0.is_empty() {
        return Err(Error::invalid("empty background text set"));
    }
    check_dims(decoded, &[q])?;
    check_dims(decoded, &background.0.iter().collect::<Vec<_>>())?;
    let qs = [q.vector.as_slice()];
    let values = per_pixel(decoded, |f| {
        let mut worst = f64::NEG_INFINITY;
        for b in &background.0 {
            worst = worst.max(relevancy(f, &b.vector, &qs)?);
        }
        Ok(1.0 - worst)
    })?;
    ScoreMap::new(values, &q.label, ScoreSource::Background)
}

/// Fusion rule for the `N` per-appearance maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    /// Convex combination weighted by each map's global maximum.
    #[default]
    MaxWeighted,
    /// The single map with the largest maximum.
    ImgLvlMax,
    PixMax,
    PixAvg,
    /// Max-weighting evaluated per pixel.
    PixWeightedAvg,
}

impl fmt::Display for EnsembleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleMethod::MaxWeighted => "max_weighted",
            EnsembleMethod::ImgLvlMax => "img_lvl_max",
            EnsembleMethod::PixMax => "pix_max",
            EnsembleMethod::PixAvg => "pix_avg",
            EnsembleMethod::PixWeightedAvg => "pix_weighted_avg",
        })
    }
}

/// Weights `max(m_i) / Σ_j max(m_j)`, uniform when every max is zero.
pub fn ensemble_weights(maxima: &[f64]) -> Vec<f64> {
    let total: f64 = maxima.iter().sum();
    if total > 0.0 {
        maxima.iter().map(|m| m / total).collect()
    } else {
        vec![1.0 / maxima.len() as f64; maxima.len()]
    }
}

/// Fused map and the per-map weights (per-pixel methods report uniform
/// weights). `bg = None` disables the background filter.
pub fn fuse(maps: &[ScoreMap], bg: Option<&ScoreMap>, method: EnsembleMethod) -> Result<(ScoreMap, Vec<f64>)> {
    let first = maps.first().ok_or_else(|| Error::invalid("ensemble needs at least one map"))?;
    for m in maps {
        first.values.ensure_shape(&m.values)?;
    }
    if let Some(b) = bg {
        first.values.ensure_shape(&b.values)?;
    }
    let filtered: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| {
            m.values
                .data()
                .iter()
                .enumerate()
                .map(|(p, &v)| f64::from(v) * bg.map_or(1.0, |b| f64::from(b.values.data()[p])))
                .collect()
        })
        .collect();
    let n = maps.len();
    let pixels = first.values.num_pixels();
    let maxima: Vec<f64> = filtered.iter().map(|m| m.iter().copied().fold(0.0, f64::max)).collect();
    let uniform = vec![1.0 / n as f64; n];
    let (out, weights): (Vec<f64>, Vec<f64>) = match method {
        EnsembleMethod::MaxWeighted => {
            let w = ensemble_weights(&maxima);
            let out = (0..pixels).map(|p| (0..n).map(|i| w[i] * filtered[i][p]).sum()).collect();
            (out, w)
        }
        EnsembleMethod::ImgLvlMax => {
            let best = (0..n).fold(0, |b, i| if maxima[i] > maxima[b] { i } else { b });
            let mut w = vec![0.0; n];
            w[best] = 1.0;
            (filtered[best].clone(), w)
        }
        EnsembleMethod::PixMax => (
            (0..pixels).map(|p| (0..n).map(|i| filtered[i][p]).fold(f64::NEG_INFINITY, f64::max)).collect(),
            uniform,
        ),
        EnsembleMethod::PixAvg => ((0..pixels).map(|p| (0..n).map(|i| filtered[i][p]).sum::<f64>() / n as f64).collect(), uniform),
        EnsembleMethod::PixWeightedAvg => (
            (0..pixels)
                .map(|p| {
                    let vals: Vec<f64> = (0..n).map(|i| filtered[i][p]).collect();
                    ensemble_weights(&vals).iter().zip(&vals).map(|(w, v)| w * v).sum()
                })
                .collect(),
            uniform,
        ),
    };
    let (h, w, _) = first.values.shape();
    let values = Tensor::from_vec(h, w, 1, out.into_iter().map(|v| v as f32).collect())?;
    Ok((ScoreMap::new(values, &first.label, ScoreSource::Fused)?, weights))
}

/// Max-weighted fusion of the background-filtered maps.
pub fn ensemble(maps: &[ScoreMap], bg: &ScoreMap) -> Result<ScoreMap> {
    fuse(maps, Some(bg), EnsembleMethod::MaxWeighted).map(|(m, _)| m)
}

/// Box mean over a `kernel × kernel` window spanning offsets
/// `[−kernel/2, kernel − 1 − kernel/2]`, with clamp-to-edge padding.
pub fn smooth(map: &ScoreMap, kernel: usize) -> Result<ScoreMap> {
    let (h, w, _) = map.values.shape();
    if kernel == 0 {
        return Err(Error::invalid("smoothing kernel must be at least 1"));
    }
    if kernel > h || kernel > w {
        return Err(Error::invalid(format!("kernel {kernel} larger than the {h}x{w} map")));
    }
    if kernel == 1 {
        return Ok(map.clone());
    }
    let lo = (kernel / 2) as isize;
    let hi = (kernel - 1 - kernel / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src: Vec<f64> = map.values.data().iter().map(|&v| f64::from(v)).collect();
    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            rows[r * w + c] = (-lo..=hi).map(|d| src[r * w + clamp(c as isize + d, w)]).sum();
        }
    }
    let norm = (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let s: f64 = (-lo..=hi).map(|d| rows[clamp(r as isize + d, h) * w + c]).sum();
            out.push((s / norm) as f32);
        }
    }
    ScoreMap::new(Tensor::from_vec(h, w, 1, out)?, &map.label, map.source)
}

/// `fused > tau`, compared at the map's f32 precision.
pub fn segment2d(fused: &ScoreMap, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau = {tau} outside (0, 1)")));
    }
    let (h, w, _) = fused.values.shape();
    Mask::from_vec(h, w, fused.values.data().iter().map(|&v| v > tau as f32).collect())
}

/// Index of the level whose global maximum is largest (first on ties).
pub fn hierarchical_query(levels: &[ScoreMap]) -> Result<usize> {
    if levels.is_empty() {
        return Err(Error::invalid("no semantic levels"));
    }
    Ok((0..levels.len()).fold(0, |b, i| if levels[i].max() > levels[b].max() { i } else { b }))
}

/// Gaussian-level selection: each slot is decoded and scored on its own,
/// optionally multiplied by the background score of the last (original)
/// slot, fused with the slot scores as their own weights, and thresholded
/// at `tau`.
pub fn segment3d(
    scene: &Scene,
    decoder: &MlpParams<f32>,
    q: &QueryEmbedding,
    canon: &CanonicalSet,
    background: Option<&CanonicalSet>,
    tau: f64,
) -> Result<Vec<bool>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau = {tau} outside (0, 1)")));
    }
    let k = scene.feature_dim_low;
    let n = scene.num_slots;
    let cs: Vec<&[f32]> = canon.0.iter().map(|c| c.vector.as_slice()).collect();
    let qs = [q.vector.as_slice()];
    let latents: Vec<f32> = scene.gaussians.iter().flat_map(|g| g.lang_features.iter().copied()).collect();
    let z = ndarray::ArrayView2::from_shape((scene.gaussians.len() * n, k), &latents)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let decoded = decoder.decode_batch(z)?;
    let row = |i: usize| decoded.row(i).to_vec();
    let mut out = Vec::with_capacity(scene.gaussians.len());
    for g in 0..scene.gaussians.len() {
        let bg = match background {
            Some(b) => {
                let own = row(g * n + n - 1);
                let mut worst = f64::NEG_INFINITY;
                for t in &b.0 {
                    worst = worst.max(relevancy(&own, &t.vector, &qs)?);
                }
                1.0 - worst
            }
            None => 1.0,
        };
        let scores = (0..n)
            .map(|s| relevancy(&row(g * n + s), &q.vector, &cs).map(|r| r * bg))
            .collect::<Result<Vec<f64>>>()?;
        let fused: f64 = ensemble_weights(&scores).iter().zip(&scores).map(|(w, s)| w * s).sum();
        out.push(fused > tau);
    }
    Ok(out)
}

/// Per-style votes and the winner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleVote {
    pub winner: String,
    pub votes: BTreeMap<String, usize>,
}

/// Each image votes for the style whose fused map peaks highest; the most
/// voted style wins. Ties at either stage go to the lexicographically
/// smallest label.
pub fn style_vote(styles: &BTreeMap<String, Vec<ScoreMap>>) -> Result<StyleVote> {
    let images = styles.values().next().map(Vec::len).ok_or_else(|| Error::invalid("no styles to vote on"))?;
    if images == 0 || styles.values().any(|m| m.len() != images) {
        return Err(Error::invalid("every style needs one map per image"));
    }
    let mut votes: BTreeMap<String, usize> = styles.keys().map(|k| (k.clone(), 0)).collect();
    for i in 0..images {
        let mut best: Option<(&String, f64)> = None;
        for (label, maps) in styles {
            let m = maps[i].max();
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((label, m));
            }
        }
        *votes.get_mut(best.expect("non-empty").0).expect("known label") += 1;
    }
    let top = votes.values().copied().max().unwrap_or(0);
    let winner = votes.iter().find(|(_, &v)| v == top).map(|(k, _)| k.clone()).expect("non-empty");
    Ok(StyleVote { winner, votes })
}

/// What a query should be scored against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryTarget {
    Class(u32),
    Style,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    pub label: String,
    pub target: QueryTarget,
}

/// Query files: one `label<TAB>class_id` or `label<TAB>style` per line;
/// blank lines and `#` comments are skipped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueryFile(pub Vec<QuerySpec>);

impl FromStr for QueryFile {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (label, target) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("query line {}: expected `label<TAB>class_id|style`", i + 1)))?;
            let label = label.trim();
            let target = target.trim();
            if label.is_empty() {
                return Err(Error::Config(format!("query line {}: empty label", i + 1)));
            }
            let target = if target == "style" {
                QueryTarget::Style
            } else {
                QueryTarget::Class(
                    target
                        .parse()
                        .map_err(|_| Error::Config(format!("query line {}: bad target `{target}`", i + 1)))?,
                )
            };
            out.push(QuerySpec {
                label: label.to_string(),
                target,
            });
        }
        Ok(QueryFile(out))
    }
}

impl fmt::Display for QueryFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for q in &self.0 {
            match q.target {
                QueryTarget::Class(c) => writeln!(f, "{}\t{c}", q.label)?,
                QueryTarget::Style => writeln!(f, "{}\tstyle", q.label)?,
            }
        }
        Ok(())
    }
}
