//! Scene and camera representation and projection of 3D Gaussians to the
//! image plane.
//!
//! Gaussians are stored in `f32` (the on-disk precision); all projection math
//! runs in `f64`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::write_atomic;

pub const MGS_MAGIC: &[u8; 4] = b"MGS1";

/// Isotropic variance (pixels²) added to every projected covariance.
pub const SCREEN_DILATION: f64 = 0.3;
/// Composited weights below this are treated as zero.
pub const MIN_WEIGHT: f64 = 1.0 / 255.0;
/// Means projecting beyond this multiple of the half image extent are culled.
pub const FRUSTUM_GUARD_BAND: f64 = 1.3;
/// Tolerance on the stored quaternion norm; storage is `f32`.
pub const QUAT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub position: [f32; 3],
    /// Per-axis standard deviations, all positive.
    pub scale: [f32; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f32; 4],
    pub opacity: f32,
    /// Flat RGB color (no view dependence).
    pub base_color: [f32; 3],
    pub class_id: u32,
    /// `N` language-feature slots of `C` values each, slot-major. The last
    /// slot is the self-appearance slot.
    pub lang_features: Vec<f32>,
}

impl Gaussian3D {
    pub fn new(
        position: [f32; 3],
        scale: [f32; 3],
        rotation: [f32; 4],
        opacity: f32,
        base_color: [f32; 3],
        class_id: u32,
    ) -> Self {
        let mut g = Self {
            position,
            scale,
            rotation,
            opacity,
            base_color,
            class_id,
            lang_features: Vec::new(),
        };
        g.normalize_rotation();
        g
    }

    pub fn normalize_rotation(&mut self) {
        let q = self.rotation.map(f64::from);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            self.rotation = q.map(|v| (v / n) as f32);
        }
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation.map(f64::from);
        UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
    }

    /// World-space covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.unit_quaternion().to_rotation_matrix().into_inner();
        let s = Matrix3::from_diagonal(&Vector3::from(self.scale.map(f64::from)));
        let m = r * s;
        m * m.transpose()
    }

    pub fn mean(&self) -> Vector3<f64> {
        Vector3::from(self.position.map(f64::from))
    }

    pub fn slot(&self, n: usize, c: usize) -> &[f32] {
        &self.lang_features[n * c..(n + 1) * c]
    }

    pub fn slot_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        &mut self.lang_features[n * c..(n + 1) * c]
    }

    pub fn validate(&self, num_slots: usize, feature_dim: usize) -> Result<()> {
        let finite = self.position.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.base_color.iter().all(|v| v.is_finite())
            && self.lang_features.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("gaussian"));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid(format!("non-positive scale {:?}", self.scale)));
        }
        let norm = self
            .rotation
            .iter()
            .map(|&v| f64::from(v).powi(2))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::invalid(format!("quaternion norm {norm} is not 1")));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::invalid(format!("opacity {} outside (0, 1]", self.opacity)));
        }
        if self.lang_features.len() != num_slots * feature_dim {
            return Err(Error::shape(
                format!("{num_slots}x{feature_dim} language features"),
                self.lang_features.len(),
            ));
        }
        Ok(())
    }
}

/// Pinhole camera with a world-to-camera rigid transform. The camera looks
/// down its local +z axis; +x is right and +y is down in the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    /// `(height, width)` in pixels.
    pub resolution: (usize, usize),
    pub near_plane: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, principal point at the image center.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        resolution: (usize, usize),
    ) -> Self {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let (h, w) = resolution;
        Self {
            rotation: matrix_rows(&rot),
            translation: [t.x, t.y, t.z],
            focal: [focal, focal],
            principal_point: [w as f64 / 2.0, h as f64 / 2.0],
            resolution,
            near_plane: 0.1,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn height(&self) -> usize {
        self.resolution.0
    }

    pub fn width(&self) -> usize {
        self.resolution.1
    }

    pub fn num_pixels(&self) -> usize {
        self.resolution.0 * self.resolution.1
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + Vector3::from(self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.focal.iter().all(|v| v.is_finite())
            && self.principal_point.iter().all(|v| v.is_finite())
            && self.near_plane.is_finite();
        if !finite {
            return Err(Error::NonFinite("camera"));
        }
        if self.focal.iter().any(|&f| f <= 0.0) {
            return Err(Error::invalid("camera focal length must be positive"));
        }
        if self.near_plane <= 0.0 {
            return Err(Error::invalid("camera near plane must be positive"));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::invalid("camera resolution must be non-zero"));
        }
        Ok(())
    }
}

fn matrix_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

/// A Gaussian after projection to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub center_px: [f64; 2],
    /// Inverse screen covariance, stored as `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub source_index: usize,
}

impl Splat2D {
    /// Largest Mahalanobis distance² at which the weight can reach the cutoff.
    fn cutoff_distance_sq(&self) -> Option<f64> {
        let ratio = self.opacity / MIN_WEIGHT;
        (ratio >= 1.0).then(|| 2.0 * ratio.ln())
    }

    /// Inclusive pixel rectangle `(row0, row1, col0, col1)` outside of which
    /// the weight is below the cutoff, clipped to the image. `None` when the
    /// splat contributes nowhere.
    pub fn pixel_bounds(&self, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
        let m = self.cutoff_distance_sq()?;
        let [a, b, c] = self.conic;
        let det = a * c - b * b;
        if det <= 0.0 {
            return None;
        }
        // Covariance diagonal from the conic inverse.
        let (var_x, var_y) = (c / det, a / det);
        let (ex, ey) = ((m * var_x).sqrt(), (m * var_y).sqrt());
        // Pixel (row, col) has its center at (col + 0.5, row + 0.5).
        let col0 = (self.center_px[0] - ex - 0.5).ceil().max(0.0);
        let col1 = (self.center_px[0] + ex - 0.5).floor();
        let row0 = (self.center_px[1] - ey - 0.5).ceil().max(0.0);
        let row1 = (self.center_px[1] + ey - 0.5).floor();
        if col1 < col0 || row1 < row0 || col0 >= width as f64 || row0 >= height as f64 {
            return None;
        }
        let col1 = col1.min(width as f64 - 1.0);
        let row1 = row1.min(height as f64 - 1.0);
        Some((row0 as usize, row1 as usize, col0 as usize, col1 as usize))
    }
}

/// Projected 2D covariance `J W Σ Wᵀ Jᵀ` (before dilation) and the camera
/// space mean, or `None` when the mean lies in front of the near plane.
pub fn projected_covariance(g: &Gaussian3D, cam: &Camera) -> Result<Option<([f64; 3], Vector3<f64>)>> {
    if !g.position.iter().all(|v| v.is_finite())
        || !g.scale.iter().all(|v| v.is_finite())
        || !g.rotation.iter().all(|v| v.is_finite())
        || !g.opacity.is_finite()
    {
        return Err(Error::NonFinite("gaussian"));
    }
    Ok(project_covariance(&g.mean(), &g.covariance(), cam))
}

/// `f64` core of [`projected_covariance`] taking the mean and covariance
/// directly.
pub fn project_covariance(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    cam: &Camera,
) -> Option<([f64; 3], Vector3<f64>)> {
    let p = cam.to_camera(mean);
    if p.z < cam.near_plane {
        return None;
    }
    let [fx, fy] = cam.focal;
    let (z, z2) = (p.z, p.z * p.z);
    let jac = Matrix2x3::new(fx / z, 0.0, -fx * p.x / z2, 0.0, fy / z, -fy * p.y / z2);
    let t = jac * cam.rotation_matrix();
    let cov2 = t * cov * t.transpose();
    Some((
        [cov2[(0, 0)], 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]), cov2[(1, 1)]],
        p,
    ))
}

/// Projects one Gaussian; `Ok(None)` means culled by the near plane or by
/// the guard band around the image.
pub fn project_gaussian(g: &Gaussian3D, index: usize, cam: &Camera) -> Result<Option<Splat2D>> {
    let Some((cov, p)) = projected_covariance(g, cam)? else {
        return Ok(None);
    };
    Ok(splat_from_projection(cov, &p, f64::from(g.opacity), index, cam))
}

fn splat_from_projection(
    [a, b, c]: [f64; 3],
    p: &Vector3<f64>,
    opacity: f64,
    index: usize,
    cam: &Camera,
) -> Option<Splat2D> {
    let (a, c) = (a + SCREEN_DILATION, c + SCREEN_DILATION);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let [fx, fy] = cam.focal;
    let [cx, cy] = cam.principal_point;
    let (h, w) = cam.resolution;
    let (u, v) = (fx * p.x / p.z + cx, fy * p.y / p.z + cy);
    let half = (0.5 * w as f64, 0.5 * h as f64);
    if ((u - half.0) / half.0).abs() > FRUSTUM_GUARD_BAND || ((v - half.1) / half.1).abs() > FRUSTUM_GUARD_BAND {
        return None;
    }
    Some(Splat2D {
        center_px: [u, v],
        conic: [c / det, -b / det, a / det],
        depth: p.z,
        opacity,
        source_index: index,
    })
}

/// Projects every Gaussian of the scene and returns the survivors in
/// compositing order.
pub fn project_scene(scene: &Scene, cam: &Camera) -> Result<Vec<Splat2D>> {
    cam.validate()?;
    let mut splats = Vec::with_capacity(scene.gaussians.len());
    for (i, g) in scene.gaussians.iter().enumerate() {
        if let Some(s) = project_gaussian(g, i, cam)? {
            splats.push(s);
        }
    }
    depth_sort(&mut splats);
    Ok(splats)
}

/// Sorts front to back, breaking depth ties by source index.
pub fn depth_sort(splats: &mut [Splat2D]) {
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.source_index.cmp(&b.source_index))
    });
}

/// `opacity · exp(−½ dᵀ conic d)` with `d = pixel − center`, zero below the
/// 1/255 cutoff.
pub fn gaussian_weight_at(splat: &Splat2D, pixel: [f64; 2]) -> f64 {
    let dx = pixel[0] - splat.center_px[0];
    let dy = pixel[1] - splat.center_px[1];
    let [a, b, c] = splat.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    let w = splat.opacity * power.exp();
    if w < MIN_WEIGHT {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian3D>,
    /// Appearance embedding width `d_a`.
    pub appearance_dim: usize,
    /// Raw language feature width `D`.
    pub feature_dim_high: usize,
    /// Compressed language feature width `C`.
    pub feature_dim_low: usize,
    /// Language slots per Gaussian `N`.
    pub num_slots: usize,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(self.feature_dim_high >= self.feature_dim_low && self.feature_dim_low >= 1) {
            return Err(Error::invalid(format!(
                "need D >= C >= 1, got D = {}, C = {}",
                self.feature_dim_high, self.feature_dim_low
            )));
        }
        if self.num_slots == 0 {
            return Err(Error::invalid("scene needs at least one language slot"));
        }
        for g in &self.gaussians {
            g.validate(self.num_slots, self.feature_dim_low)?;
        }
        Ok(())
    }

    /// Resets every Gaussian to `N × C` zero language features.
    pub fn reset_language(&mut self, num_slots: usize) {
        self.num_slots = num_slots;
        let len = num_slots * self.feature_dim_low;
        for g in &mut self.gaussians {
            g.lang_features = vec![0.0; len];
        }
    }

    /// SHA-256 over every non-language field, hex encoded.
    pub fn geometry_digest(&self) -> String {
        let mut h = Sha256::new();
        for g in &self.gaussians {
            for v in g
                .position
                .iter()
                .chain(&g.scale)
                .chain(&g.rotation)
                .chain(std::iter::once(&g.opacity))
                .chain(&g.base_color)
            {
                h.update(v.to_le_bytes());
            }
            h.update(g.class_id.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let to_u32 = |v: usize| {
            u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))
        };
        let c = self.feature_dim_low;
        let n = self.num_slots;
        let mut buf = Vec::with_capacity(16 + self.gaussians.len() * (15 + n * c) * 4);
        buf.extend_from_slice(MGS_MAGIC);
        buf.extend_from_slice(&to_u32(self.gaussians.len())?.to_le_bytes());
        buf.extend_from_slice(&to_u32(n)?.to_le_bytes());
        buf.extend_from_slice(&to_u32(c)?.to_le_bytes());
        for g in &self.gaussians {
            if g.lang_features.len() != n * c {
                return Err(Error::shape(n * c, g.lang_features.len()));
            }
            let class = g.class_id as f32;
            for v in g
                .position
                .iter()
                .chain(&g.scale)
                .chain(&g.rotation)
                .chain(std::iter::once(&g.opacity))
                .chain(&g.base_color)
                .chain(std::iter::once(&class))
                .chain(&g.lang_features)
            {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads an MGS1 stream. The header carries only `count`, `N` and `C`, so
    /// the appearance and raw feature widths are supplied by the caller.
    pub fn read_from<R: Read>(mut r: R, appearance_dim: usize, feature_dim_high: usize) -> Result<Scene> {
        let bad = |reason: String| Error::Format {
            format: "MGS1",
            reason,
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != MGS_MAGIC {
            return Err(bad("missing MGS1 header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (count, n, c) = (word(4), word(8), word(12));
        let record = 15 + n * c;
        if bytes.len() != 16 + count * record * 4 {
            return Err(bad(format!(
                "expected {} bytes for {count} records, found {}",
                16 + count * record * 4,
                bytes.len()
            )));
        }
        let floats: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let gaussians = floats
            .chunks_exact(record)
            .map(|f| {
                let class = f[14];
                if !(class >= 0.0 && class.fract() == 0.0) {
                    return Err(bad(format!("class id {class} is not a small integer")));
                }
                Ok(Gaussian3D {
                    position: [f[0], f[1], f[2]],
                    scale: [f[3], f[4], f[5]],
                    rotation: [f[6], f[7], f[8], f[9]],
                    opacity: f[10],
                    base_color: [f[11], f[12], f[13]],
                    class_id: class as u32,
                    lang_features: f[15..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            gaussians,
            appearance_dim,
            feature_dim_high,
            feature_dim_low: c,
            num_slots: n,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>, appearance_dim: usize, feature_dim_high: usize) -> Result<Scene> {
        Scene::read_from(std::fs::File::open(path)?, appearance_dim, feature_dim_high)
    }
}

/// Rotation taking `+z` onto `dir`; used to orient flattened Gaussians.
pub fn quaternion_facing(dir: [f64; 3]) -> [f32; 4] {
    let d = Vector3::from(dir).normalize();
    let q = UnitQuaternion::rotation_between(&Vector3::z(), &d)
        .unwrap_or_else(|| UnitQuaternion::from_rotation_matrix(&Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)));
    let q = q.into_inner();
    [q.w as f32, q.i as f32, q.j as f32, q.k as f32]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn identity_camera(focal: f64) -> Camera {
        Camera {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            focal: [focal, focal],
            principal_point: [32.0, 32.0],
            resolution: (64, 64),
            near_plane: 0.1,
        }
    }

    fn unit_gaussian(pos: [f32; 3]) -> Gaussian3D {
        Gaussian3D::new(pos, [1.0; 3], [1.0, 0.0, 0.0, 0.0], 0.8, [0.5; 3], 1)
    }

    #[test]
    fn identity_factorization_gives_identity_covariance() {
        let cov = unit_gaussian([0.0; 3]).covariance();
        assert_eq!(cov, Matrix3::identity());
    }

    #[test]
    fn isotropic_projection_at_depth_ten() {
        let g = unit_gaussian([0.0, 0.0, 10.0]);
        let (cov, _) = projected_covariance(&g, &identity_camera(100.0)).unwrap().unwrap();
        assert_abs_diff_eq!(cov[0], 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cov[1], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cov[2], 100.0, epsilon = 1e-9);
        let s = project_gaussian(&g, 0, &identity_camera(100.0)).unwrap().unwrap();
        assert_abs_diff_eq!(s.conic[0], 1.0 / 100.3, epsilon = 1e-12);
        assert_eq!(s.center_px, [32.0, 32.0]);
    }

    #[test]
    fn near_plane_culls() {
        let g = unit_gaussian([0.0, 0.0, 0.01]);
        assert!(project_gaussian(&g, 0, &identity_camera(100.0)).unwrap().is_none());
    }

    #[test]
    fn non_finite_rejected() {
        let g = unit_gaussian([f32::NAN, 0.0, 5.0]);
        assert!(matches!(
            project_gaussian(&g, 0, &identity_camera(100.0)),
            Err(Error::NonFinite(_))
        ));
    }

    fn splat(depth: f64, index: usize) -> Splat2D {
        Splat2D {
            center_px: [0.0; 2],
            conic: [1.0, 0.0, 1.0],
            depth,
            opacity: 1.0,
            source_index: index,
        }
    }

    #[test]
    fn sort_orders_by_depth_then_index() {
        let mut s = vec![splat(3.0, 0), splat(1.0, 1), splat(2.0, 2)];
        depth_sort(&mut s);
        assert_eq!(s.iter().map(|s| s.source_index).collect::<Vec<_>>(), [1, 2, 0]);

        let mut s = vec![splat(1.0, 5), splat(1.0, 2)];
        depth_sort(&mut s);
        assert_eq!(s.iter().map(|s| s.source_index).collect::<Vec<_>>(), [2, 5]);

        let mut empty: Vec<Splat2D> = Vec::new();
        depth_sort(&mut empty);
        assert!(empty.is_empty());
    }

    #[test]
    fn weight_examples() {
        let mut s = splat(1.0, 0);
        s.center_px = [4.0, 4.0];
        s.opacity = 0.8;
        assert_abs_diff_eq!(gaussian_weight_at(&s, [4.0, 4.0]), 0.8, epsilon = 1e-15);
        s.opacity = 1.0;
        assert_abs_diff_eq!(gaussian_weight_at(&s, [6.0, 4.0]), (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(gaussian_weight_at(&s, [4.0, 1.0]) , (-4.5f64).exp(), epsilon = 1e-15);
        assert_eq!(gaussian_weight_at(&s, [8.0, 4.0]), 0.0);
    }

    #[test]
    fn pixel_bounds_cover_every_nonzero_weight() {
        let g = Gaussian3D::new([0.3, -0.2, 6.0], [0.4, 0.1, 0.2], [0.9, 0.2, 0.3, 0.1], 0.7, [0.5; 3], 1);
        let cam = identity_camera(60.0);
        let s = project_gaussian(&g, 0, &cam).unwrap().unwrap();
        let (r0, r1, c0, c1) = s.pixel_bounds(64, 64).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let w = gaussian_weight_at(&s, [c as f64 + 0.5, r as f64 + 0.5]);
                if w > 0.0 {
                    assert!(r >= r0 && r <= r1 && c >= c0 && c <= c1, "({r},{c}) outside");
                }
            }
        }
    }

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at([3.0, -2.0, 4.0], [0.0; 3], [0.0, -1.0, 0.0], 50.0, (32, 48));
        let p = cam.to_camera(&Vector3::zeros());
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.z, (29.0f64).sqrt(), epsilon = 1e-12);
    }

    fn sample_scene() -> Scene {
        let mut gaussians = Vec::new();
        for i in 0..5 {
            let mut g = Gaussian3D::new(
                [i as f32 * 0.1, 0.2, -0.3],
                [0.1, 0.2, 0.3 + i as f32],
                [0.5, 0.5, 0.5, 0.5],
                0.5,
                [0.1, 0.2, 0.3],
                i,
            );
            g.lang_features = (0..6).map(|k| k as f32 * 0.25 - i as f32).collect();
            gaussians.push(g);
        }
        Scene {
            gaussians,
            appearance_dim: 4,
            feature_dim_high: 16,
            feature_dim_low: 3,
            num_slots: 2,
        }
    }

    #[test]
    fn mgs_header_and_round_trip() {
        let scene = sample_scene();
        let mut buf = Vec::new();
        scene.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MGS1");
        assert_eq!(&buf[4..8], &5u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &3u32.to_le_bytes());
        assert_eq!(buf.len(), 16 + 5 * (15 + 6) * 4);
        let back = Scene::read_from(&buf[..], 4, 16).unwrap();
        assert_eq!(back, scene);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn validate_catches_bad_fields() {
        let mut scene = sample_scene();
        scene.validate().unwrap();
        scene.gaussians[0].scale[1] = 0.0;
        assert!(scene.validate().is_err());
        let mut scene = sample_scene();
        scene.gaussians[2].lang_features.pop();
        assert!(scene.validate().is_err());
        let mut scene = sample_scene();
        scene.feature_dim_high = 2;
        assert!(scene.validate().is_err());
    }

    fn eigenvalues(conic: [f64; 3]) -> (f64, f64) {
        let [a, b, c] = conic;
        let mid = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        (mid - disc, mid + disc)
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuaternion<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 0.1)
            .prop_map(|(w, x, y, z)| UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)))
    }

    proptest! {
        #[test]
        fn conic_is_frame_covariant(q in arb_quat(), world in arb_quat(),
                                    sx in 0.05..1.0f64, sy in 0.05..1.0f64, sz in 0.05..1.0f64,
                                    px in -1.0..1.0f64, py in -1.0..1.0f64) {
            // Rotate the Gaussian about the origin and the camera the opposite way.
            let mean = Vector3::new(px, py, 6.0);
            let r = q.to_rotation_matrix().into_inner();
            let s = Matrix3::from_diagonal(&Vector3::new(sx, sy, sz));
            let cov = r * s * s.transpose() * r.transpose();
            let cam = identity_camera(80.0);
            let (base, p) = project_covariance(&mean, &cov, &cam).unwrap();
            let base = splat_from_projection(base, &p, 0.9, 0, &cam).unwrap();

            let w = world.to_rotation_matrix().into_inner();
            let mut cam2 = cam.clone();
            cam2.rotation = matrix_rows(&(cam.rotation_matrix() * w.transpose()));
            let (moved, p2) = project_covariance(&(w * mean), &(w * cov * w.transpose()), &cam2).unwrap();
            let moved = splat_from_projection(moved, &p2, 0.9, 0, &cam2).unwrap();
            let (a0, a1) = eigenvalues(base.conic);
            let (b0, b1) = eigenvalues(moved.conic);
            prop_assert!((a0 - b0).abs() <= 1e-6);
            prop_assert!((a1 - b1).abs() <= 1e-6);
        }

        #[test]
        fn weight_peaks_at_center_and_decays(dx in -1.0..1.0f64, dy in -1.0..1.0f64,
                                             a in 0.05..2.0f64, c in 0.05..2.0f64, rho in -0.9..0.9f64) {
            prop_assume!(dx * dx + dy * dy > 1e-6);
            let b = rho * (a * c).sqrt();
            let s = Splat2D { center_px: [10.0, 10.0], conic: [a, b, c], depth: 1.0, opacity: 1.0, source_index: 0 };
            let peak = gaussian_weight_at(&s, [10.0, 10.0]);
            let mut prev = peak;
            for step in 1..8 {
                let t = step as f64 * 0.25;
                let w = gaussian_weight_at(&s, [10.0 + t * dx, 10.0 + t * dy]);
                prop_assert!(w <= peak);
                if prev > 0.0 && w > 0.0 {
                    prop_assert!(w < prev);
                }
                prev = w;
            }
        }

        #[test]
        fn uniform_world_scaling_preserves_conic(s in 0.2..5.0f64, px in -0.5..0.5f64, tz in 4.0..8.0f64) {
            let g = Gaussian3D::new([px as f32, 0.1, 0.0], [0.3, 0.2, 0.1], [0.8, 0.1, -0.3, 0.2], 0.9, [0.5; 3], 0);
            let mut cam = identity_camera(70.0);
            cam.translation = [0.1, -0.2, tz];
            let (cov, p) = project_covariance(&g.mean(), &g.covariance(), &cam).unwrap();
            let base = splat_from_projection(cov, &p, 0.9, 0, &cam).unwrap();

            let mut cs = cam.clone();
            cs.translation = cam.translation.map(|v| v * s);
            let (cov, p) = project_covariance(&(g.mean() * s), &(g.covariance() * (s * s)), &cs).unwrap();
            let scaled = splat_from_projection(cov, &p, 0.9, 0, &cs).unwrap();
            for k in 0..3 {
                prop_assert!((base.conic[k] - scaled.conic[k]).abs() <= 1e-6);
            }
            prop_assert!((base.center_px[0] - scaled.center_px[0]).abs() <= 1e-6);
        }
    }
}
