//! Component ablations: each variant switches off one part of the method and
//! the full pipeline is rerun over several seeds.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegMetrics;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::query::EnsembleMethod;
use crate::tensor::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// One slot: the field only learns the original image features.
    NoMultiAppearance,
    NoTum,
    NoAum,
    NoBgFilter,
    ImgLvlMax,
    PixMax,
    PixAvg,
    PixWeightedAvg,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoMultiAppearance,
        Variant::NoTum,
        Variant::NoAum,
        Variant::NoBgFilter,
        Variant::ImgLvlMax,
        Variant::PixMax,
        Variant::PixAvg,
        Variant::PixWeightedAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMultiAppearance => "no_multi_appearance",
            Variant::NoTum => "no_tum",
            Variant::NoAum => "no_aum",
            Variant::NoBgFilter => "no_bg_filter",
            Variant::ImgLvlMax => "img_lvl_max",
            Variant::PixMax => "pix_max",
            Variant::PixAvg => "pix_avg",
            Variant::PixWeightedAvg => "pix_weighted_avg",
        }
    }

    /// The config this variant runs with.
    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoMultiAppearance => cfg.scene.num_slots = 1,
            Variant::NoTum => cfg.use_tum = false,
            Variant::NoAum => cfg.use_aum = false,
            Variant::NoBgFilter => cfg.background_filter = false,
            Variant::ImgLvlMax => cfg.ensemble = EnsembleMethod::ImgLvlMax,
            Variant::PixMax => cfg.ensemble = EnsembleMethod::PixMax,
            Variant::PixAvg => cfg.ensemble = EnsembleMethod::PixAvg,
            Variant::PixWeightedAvg => cfg.ensemble = EnsembleMethod::PixWeightedAvg,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: SegMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    /// Mean `(mIoU, mPA, mP)` of a variant over its seeds.
    pub fn mean(&self, variant: Variant) -> Option<(f64, f64, f64)> {
        let rows: Vec<&SegMetrics> = self.runs.iter().filter(|r| r.variant == variant).map(|r| &r.metrics).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|m| m.miou).sum::<f64>() / n,
            rows.iter().map(|m| m.mpa).sum::<f64>() / n,
            rows.iter().map(|m| m.mp).sum::<f64>() / n,
        ))
    }

    /// One row per run, then one `mean` row per variant.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "seed", "miou", "mpa", "mp"])?;
        for r in &self.runs {
            w.write_record([
                r.variant.to_string(),
                r.seed.to_string(),
                format!("{:.6}", r.metrics.miou),
                format!("{:.6}", r.metrics.mpa),
                format!("{:.6}", r.metrics.mp),
            ])?;
        }
        let mut seen: Vec<Variant> = self.runs.iter().map(|r| r.variant).collect();
        seen.dedup();
        for v in seen {
            let (iou, pa, p) = self.mean(v).expect("variant has runs");
            w.write_record([v.to_string(), "mean".into(), format!("{iou:.6}"), format!("{pa:.6}"), format!("{p:.6}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Runs `variants × seeds` under `out`, sharing one stage cache so that
/// variants reuse every stage they do not change. Writes `out/ablation.csv`.
///
/// Empty `variants` means all of them; empty `seeds` means the base seed.
pub fn run_ablation(base: &PipelineConfig, variants: &[Variant], seeds: &[u64], out: &Path) -> Result<AblationReport> {
    let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.to_vec() };
    let seeds = if seeds.is_empty() { vec![base.scene.seed] } else { seeds.to_vec() };
    let mut runs = Vec::new();
    for &variant in &variants {
        for &seed in &seeds {
            let mut cfg = variant.apply(base);
            cfg.scene.seed = seed;
            let run_dir = out.join("runs").join(format!("{variant}-s{seed}"));
            let p = Pipeline::new(cfg, run_dir)?.with_cache_root(out.join("cache"));
            runs.push(AblationRun {
                variant,
                seed,
                metrics: p.eval()?,
            });
        }
    }
    let report = AblationReport { runs };
    write_atomic(out.join("ablation.csv"), report.to_csv()?.as_bytes())?;
    Ok(report)
}
