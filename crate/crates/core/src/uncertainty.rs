//! Appearance and transient uncertainty of language features.
//!
//! Per-pixel squared norms are summed over feature channels. Normalization is
//! min-max over every map of one kind in the scene jointly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UncertaintyKind {
    Appearance,
    Transient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    /// `H × W × 1`, non-negative.
    pub values: Tensor,
    pub kind: UncertaintyKind,
    pub normalized: bool,
}

impl UncertaintyMap {
    pub fn zeros(height: usize, width: usize, kind: UncertaintyKind) -> Self {
        Self {
            values: Tensor::zeros(height, width, 1),
            kind,
            normalized: true,
        }
    }

    pub fn get(&self, p: usize) -> f32 {
        self.values.data()[p]
    }
}

fn check_same(maps: &[&Tensor]) -> Result<()> {
    let first = maps.first().ok_or_else(|| Error::invalid("no feature maps"))?;
    for m in &maps[1..] {
        first.ensure_shape(m)?;
    }
    Ok(())
}

/// Per-pixel spread of `N` feature maps around their mean:
/// `(1/N) Σ_j ‖F^j − F̄‖²`. The order of the maps is irrelevant.
pub fn appearance_uncertainty(features: &[&Tensor]) -> Result<UncertaintyMap> {
    check_same(features)?;
    let (h, w, d) = features[0].shape();
    let n = features.len() as f64;
    let mut out = Vec::with_capacity(h * w);
    let mut mean = vec![0.0f64; d];
    for p in 0..h * w {
        mean.fill(0.0);
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f.pixel(p)) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let spread: f64 = features
            .iter()
            .map(|f| {
                f.pixel(p)
                    .iter()
                    .zip(&mean)
                    .map(|(&v, m)| (f64::from(v) - m).powi(2))
                    .sum::<f64>()
            })
            .sum();
        out.push((spread / n) as f32);
    }
    Ok(UncertaintyMap {
        values: Tensor::from_vec(h, w, 1, out)?,
        kind: UncertaintyKind::Appearance,
        normalized: false,
    })
}

/// `‖F_self − F‖²` per pixel.
pub fn transient_uncertainty(self_render: &Tensor, original: &Tensor) -> Result<UncertaintyMap> {
    self_render.ensure_shape(original)?;
    let (h, w, _) = original.shape();
    let out = (0..h * w)
        .map(|p| {
            self_render
                .pixel(p)
                .iter()
                .zip(original.pixel(p))
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum::<f64>() as f32
        })
        .collect();
    Ok(UncertaintyMap {
        values: Tensor::from_vec(h, w, 1, out)?,
        kind: UncertaintyKind::Transient,
        normalized: false,
    })
}

/// Joint min-max normalization of all maps of one kind. A constant set maps
/// to all zeros.
pub fn normalize_maps(maps: &mut [UncertaintyMap]) -> Result<()> {
    let Some(kind) = maps.first().map(|m| m.kind) else {
        return Err(Error::invalid("normalize_maps needs at least one map"));
    };
    if maps.iter().any(|m| m.kind != kind) {
        return Err(Error::invalid("cannot jointly normalize maps of different kinds"));
    }
    let (lo, hi) = maps.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), m| {
        (lo.min(m.values.min()), hi.max(m.values.max()))
    });
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    let range = hi - lo;
    for m in maps.iter_mut() {
        m.values = if range > 0.0 {
            m.values.map(|u| ((f64::from(u) - lo) / range) as f32)
        } else {
            m.values.map(|_| 0.0)
        };
        m.normalized = true;
    }
    Ok(())
}

/// Pixels with normalized transient uncertainty strictly above `tau_u`.
pub fn occluder_mask(u_t: &UncertaintyMap, tau_u: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&tau_u) {
        return Err(Error::invalid(format!("tau_u = {tau_u} outside [0, 1]")));
    }
    if !u_t.normalized {
        return Err(Error::invalid("occluder_mask needs a normalized map"));
    }
    let (h, w, _) = u_t.values.shape();
    let data = u_t.values.data().iter().map(|&u| f64::from(u) > tau_u).collect();
    Mask::from_vec(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_map(values: &[f32]) -> Tensor {
        Tensor::from_vec(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_have_zero_spread() {
        let f = Tensor::from_vec(2, 2, 3, (0..12).map(|v| v as f32).collect()).unwrap();
        let u = appearance_uncertainty(&[&f, &f, &f, &f]).unwrap();
        assert!(u.values.data().iter().all(|&v| v == 0.0));
        assert!(!u.normalized);
    }

    #[test]
    fn two_scalar_maps() {
        let u = appearance_uncertainty(&[&scalar_map(&[0.0]), &scalar_map(&[2.0])]).unwrap();
        assert_eq!(u.values.data(), &[1.0]);
    }

    #[test]
    fn appearance_uncertainty_scales_quadratically() {
        let a = scalar_map(&[0.5, -1.0, 2.0]);
        let b = scalar_map(&[1.5, 1.0, 0.0]);
        let c = scalar_map(&[0.0, 0.0, 3.0]);
        let base = appearance_uncertainty(&[&a, &b, &c]).unwrap();
        let s = 3.0f32;
        let scaled: Vec<Tensor> = [&a, &b, &c].iter().map(|t| t.map(|v| v * s)).collect();
        let refs: Vec<&Tensor> = scaled.iter().collect();
        let big = appearance_uncertainty(&refs).unwrap();
        for (x, y) in base.values.data().iter().zip(big.values.data()) {
            assert!((x * s * s - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
    }

    #[test]
    fn transient_examples() {
        let u = transient_uncertainty(&scalar_map(&[3.0]), &scalar_map(&[1.0])).unwrap();
        assert_eq!(u.values.data(), &[4.0]);
        let same = transient_uncertainty(&scalar_map(&[1.0, 2.0]), &scalar_map(&[1.0, 2.0])).unwrap();
        assert!(same.values.data().iter().all(|&v| v == 0.0));
        assert!(transient_uncertainty(&scalar_map(&[1.0]), &scalar_map(&[1.0, 2.0])).is_err());
        assert!(appearance_uncertainty(&[&scalar_map(&[1.0]), &scalar_map(&[1.0, 2.0])]).is_err());
    }

    fn umap(values: &[f32]) -> UncertaintyMap {
        UncertaintyMap {
            values: scalar_map(values),
            kind: UncertaintyKind::Transient,
            normalized: false,
        }
    }

    #[test]
    fn normalization_examples() {
        let mut maps = vec![umap(&[0.0, 1.0]), umap(&[4.0, 2.0])];
        normalize_maps(&mut maps).unwrap();
        assert_eq!(maps[0].values.data(), &[0.0, 0.25]);
        assert_eq!(maps[1].values.data(), &[1.0, 0.5]);

        let mut constant = vec![umap(&[3.0, 3.0]), umap(&[3.0])];
        normalize_maps(&mut constant).unwrap();
        assert!(constant.iter().all(|m| m.values.data().iter().all(|&v| v == 0.0)));

        let mut mixed = vec![umap(&[1.0]), UncertaintyMap::zeros(1, 1, UncertaintyKind::Appearance)];
        assert!(normalize_maps(&mut mixed).is_err());
        assert!(normalize_maps(&mut []).is_err());
    }

    #[test]
    fn occluder_threshold() {
        let mut m = umap(&[0.0, 0.95, 0.9, 1.0]);
        assert!(occluder_mask(&m, 0.9).is_err());
        m.normalized = true;
        let mask = occluder_mask(&m, 0.9).unwrap();
        assert_eq!(mask.data(), &[false, true, false, true]);
        assert_eq!(occluder_mask(&m, 1.0).unwrap().count(), 0);
        assert!(occluder_mask(&m, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn normalization_idempotent_and_order_free(a in prop::collection::vec(0.0f32..10.0, 1..8),
                                                   b in prop::collection::vec(0.0f32..10.0, 1..8)) {
            let mut fwd = vec![umap(&a), umap(&b)];
            let mut rev = vec![umap(&b), umap(&a)];
            normalize_maps(&mut fwd).unwrap();
            normalize_maps(&mut rev).unwrap();
            prop_assert_eq!(&fwd[0], &rev[1]);
            prop_assert_eq!(&fwd[1], &rev[0]);
            let once = fwd.clone();
            normalize_maps(&mut fwd).unwrap();
            prop_assert_eq!(once, fwd.clone());
            let all: Vec<f32> = fwd.iter().flat_map(|m| m.values.data().to_vec()).collect();
            prop_assert!(all.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn appearance_uncertainty_zero_iff_equal(vals in prop::collection::vec(-4i32..4, 4)) {
            let maps: Vec<Tensor> = vals.iter().map(|&v| scalar_map(&[v as f32])).collect();
            let refs: Vec<&Tensor> = maps.iter().collect();
            let u = appearance_uncertainty(&refs).unwrap().values.data()[0];
            let all_equal = vals.iter().all(|&v| v == vals[0]);
            prop_assert_eq!(u == 0.0, all_equal);

            // Permuting the first N − 1 maps leaves the result unchanged.
            let perm = [&maps[2], &maps[0], &maps[1], &maps[3]];
            let u2 = appearance_uncertainty(&perm).unwrap().values.data()[0];
            prop_assert_eq!(u, u2);
        }
    }
}
