//! Pinhole cameras, depth-plane sampling and plane-induced homographies.
//!
//! Conventions used throughout the crate:
//!
//! * Pixel centers sit at integer coordinates, origin at the top-left pixel
//!   center, `x` to the right and `y` down.
//! * A pose `(R, t)` maps a point `X` expressed in the reference frame to
//!   camera coordinates `R * X - t`. For `R = I`, `t` is the camera center.
//! * Depth planes are fronto-parallel to the reference camera with normal
//!   `(0, 0, 1)` and are ordered far to near.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PLANE_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invalid(format!(
                "intrinsics need positive focal lengths, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn identity() -> Self {
        CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Result<Matrix3<f64>> {
        self.matrix()
            .try_inverse()
            .filter(|m| m.iter().all(|x| x.is_finite()))
            .ok_or(Error::Singular("intrinsics"))
    }

    /// Intrinsics of the window whose top-left pixel is `(x0, y0)`.
    pub fn cropped(&self, x0: f64, y0: f64) -> Self {
        CameraIntrinsics {
            cx: self.cx - x0,
            cy: self.cy - y0,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(err < 1e-6) || !(rotation.determinant() > 0.0) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal with det +1 (|RtR - I| = {err:.3e})"
            )));
        }
        if translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(CameraPose {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Camera center in reference coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.rotation.transpose() * self.translation
    }

    /// Re-expresses this pose relative to another camera of the same frame.
    pub fn relative_to(&self, base: &CameraPose) -> CameraPose {
        let rotation = self.rotation * base.rotation.transpose();
        CameraPose {
            rotation,
            translation: self.translation - rotation * base.translation,
        }
    }
}

/// Intrinsics, pose and image size of one viewpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose, width: usize, height: usize) -> Result<Self> {
        intrinsics.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::invalid("camera image size must be at least 1x1"));
        }
        Ok(Camera {
            intrinsics,
            pose,
            width,
            height,
        })
    }

    /// The `width x height` window starting at pixel `(x0, y0)`.
    pub fn window(&self, x0: usize, y0: usize, width: usize, height: usize) -> Camera {
        Camera {
            intrinsics: self.intrinsics.cropped(x0 as f64, y0 as f64),
            width,
            height,
            ..*self
        }
    }

    pub fn relative_to(&self, base: &Camera) -> Camera {
        Camera {
            pose: self.pose.relative_to(&base.pose),
            ..*self
        }
    }
}

/// A camera together with its `3 x H x W` linear-intensity image.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub camera: Camera,
    pub image: Tensor<f32>,
}

impl CameraView {
    pub fn new(camera: Camera, image: Tensor<f32>) -> Result<Self> {
        image.expect_shape("camera view image", &[3, camera.height, camera.width])?;
        Ok(CameraView { camera, image })
    }
}

/// Fronto-parallel planes, far to near, uniformly spaced in disparity.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPlaneSet {
    distances: Vec<f64>,
}

impl DepthPlaneSet {
    pub fn sample(near: f64, far: f64, count: usize) -> Result<Self> {
        if !(near > 0.0) || !(near < far) || !far.is_finite() {
            return Err(Error::invalid(format!(
                "depth planes need 0 < near < far, got near={near} far={far}"
            )));
        }
        if count == 0 {
            return Err(Error::invalid("depth plane count must be positive"));
        }
        if count == 1 {
            return Ok(DepthPlaneSet {
                distances: vec![far],
            });
        }
        let (d_far, d_near) = (1.0 / far, 1.0 / near);
        let step = (d_near - d_far) / (count - 1) as f64;
        let mut distances: Vec<f64> = (0..count).map(|k| 1.0 / (d_far + k as f64 * step)).collect();
        distances[0] = far;
        distances[count - 1] = near;
        Ok(DepthPlaneSet { distances })
    }

    /// Accepts explicit distances; they must be positive and strictly
    /// decreasing. Uniform disparity spacing is not enforced.
    pub fn from_distances(distances: Vec<f64>) -> Result<Self> {
        if distances.is_empty()
            || distances.iter().any(|&d| !(d > 0.0) || !d.is_finite())
            || distances.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::invalid("depth planes must be positive and strictly decreasing"));
        }
        Ok(DepthPlaneSet { distances })
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(PLANE_NORMAL)
    }

    /// Same planes, reordered by `perm` (output plane `i` is input plane
    /// `perm[i]`). The result is no longer sorted; only for equivariance tests.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        DepthPlaneSet {
            distances: perm.iter().map(|&i| self.distances[i]).collect(),
        }
    }
}

/// 3x3 projective map acting on homogeneous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        if !(matrix.determinant().abs() > 1e-12) || matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::Singular("homography"));
        }
        Ok(Homography { matrix })
    }

    pub fn identity() -> Self {
        Homography {
            matrix: Matrix3::identity(),
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        if !(self.matrix.determinant().abs() > 1e-12) {
            return Err(Error::Singular("homography inverse"));
        }
        let inv = self
            .matrix
            .try_inverse()
            .ok_or(Error::Singular("homography inverse"))?;
        Homography::new(inv)
    }

    /// Maps a pixel; `None` when the point lands on or behind the line at
    /// infinity (non-positive homogeneous coordinate).
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.matrix * Vector3::new(x, y, 1.0);
        if p.z <= 0.0 {
            return None;
        }
        Some((p.x / p.z, p.y / p.z))
    }

    /// Matrix scaled so that the bottom-right entry is 1.
    pub fn normalized(&self) -> Matrix3<f64> {
        self.matrix / self.matrix[(2, 2)]
    }

    pub fn compose(&self, other: &Homography) -> Homography {
        Homography {
            matrix: self.matrix * other.matrix,
        }
    }

    /// Expresses the map between grids sampled `scale_in` and `scale_out`
    /// times denser than the native pixel grids.
    pub fn rescaled(&self, scale_in: f64, scale_out: f64) -> Homography {
        let s_in = Matrix3::new(1.0 / scale_in, 0.0, 0.0, 0.0, 1.0 / scale_in, 0.0, 0.0, 0.0, 1.0);
        let s_out = Matrix3::new(scale_out, 0.0, 0.0, 0.0, scale_out, 0.0, 0.0, 0.0, 1.0);
        Homography {
            matrix: s_out * self.matrix * s_in,
        }
    }
}

/// Homography induced by the plane at `plane_distance`, mapping reference
/// pixels to pixels of `view`: `K_v (R_v - t_v n^T / a) K_ref^-1`.
pub fn plane_homography(
    view: &Camera,
    reference: &CameraIntrinsics,
    plane_distance: f64,
    normal: &Vector3<f64>,
) -> Result<Homography> {
    if !(plane_distance > 0.0) {
        return Err(Error::invalid(format!(
            "plane distance must be positive, got {plane_distance}"
        )));
    }
    let k_ref_inv = reference.inverse_matrix()?;
    let m = view.intrinsics.matrix()
        * (view.pose.rotation - view.pose.translation * normal.transpose() / plane_distance)
        * k_ref_inv;
    Homography::new(m)
}

/// Footprint of a camera's image rectangle on the plane `z = z_plane` of the
/// reference frame, as `(x, y)` offsets from `origin` divided by `depth`.
fn footprint(cam: &Camera, origin: &Vector3<f64>, depth: f64) -> Result<[(f64, f64); 4]> {
    let k_inv = cam.intrinsics.inverse_matrix()?;
    let rt = cam.pose.rotation.transpose();
    let center = cam.pose.center();
    let z_plane = origin.z + depth;
    let (w, h) = (cam.width as f64, cam.height as f64);
    let corners = [(-0.5, -0.5), (w - 0.5, -0.5), (-0.5, h - 0.5), (w - 0.5, h - 0.5)];
    let mut out = [(0.0, 0.0); 4];
    for (o, (u, v)) in out.iter_mut().zip(corners) {
        let dir = rt * (k_inv * Vector3::new(u, v, 1.0));
        let lambda = (z_plane - center.z) / dir.z;
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(
                "a camera frustum does not reach the far plane",
            ));
        }
        let p = center + dir * lambda - origin;
        *o = (p.x / depth, p.y / depth);
    }
    Ok(out)
}

fn union_bounds(views: &[Camera], origin: &Vector3<f64>, far: f64) -> Result<[f64; 4]> {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for cam in views {
        for (x, y) in footprint(cam, origin, far)? {
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
    }
    Ok(b)
}

fn mean_center(views: &[Camera]) -> Result<Vector3<f64>> {
    if views.is_empty() {
        return Err(Error::invalid("reference camera needs at least one view"));
    }
    Ok(views
        .iter()
        .map(|c| c.pose.center())
        .fold(Vector3::zeros(), |a, b| a + b)
        / views.len() as f64)
}

/// Virtual camera at the mean input center with identity rotation whose
/// `height x width` image, at depth `far`, covers the union of the input
/// frustum footprints.
pub fn reference_camera(views: &[Camera], height: usize, width: usize, far: f64) -> Result<Camera> {
    if height == 0 || width == 0 || !(far > 0.0) {
        return Err(Error::invalid("reference camera needs a positive size and far distance"));
    }
    let center = mean_center(views)?;
    let [x0, y0, x1, y1] = union_bounds(views, &center, far)?;
    let fx = width as f64 / (x1 - x0);
    let fy = height as f64 / (y1 - y0);
    let intrinsics = CameraIntrinsics::new(fx, fy, -0.5 - fx * x0, -0.5 - fy * y0)?;
    Camera::new(
        intrinsics,
        CameraPose {
            rotation: Matrix3::identity(),
            translation: center,
        },
        width,
        height,
    )
}

/// Reference image size whose focal lengths match the mean input focal
/// lengths under [`reference_camera`].
pub fn matched_reference_size(views: &[Camera], far: f64) -> Result<(usize, usize)> {
    let center = mean_center(views)?;
    let [x0, y0, x1, y1] = union_bounds(views, &center, far)?;
    let n = views.len() as f64;
    let fx = views.iter().map(|c| c.intrinsics.fx).sum::<f64>() / n;
    let fy = views.iter().map(|c| c.intrinsics.fy).sum::<f64>() / n;
    let w = (fx * (x1 - x0)).round().max(1.0) as usize;
    let h = (fy * (y1 - y0)).round().max(1.0) as usize;
    Ok((h, w))
}

/// One entry of a pose file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    /// Image file name relative to the scene directory.
    pub image: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 3x3 rotation.
    pub rotation: [f64; 9],
    /// Meters.
    pub translation: [f64; 3],
    /// `input` (default) or `target`; targets are held out in synthesis mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ViewRole>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewRole {
    Input,
    Target,
}

impl PoseRecord {
    pub fn from_camera(image: impl Into<String>, cam: &Camera, role: Option<ViewRole>) -> Self {
        let r = &cam.pose.rotation;
        PoseRecord {
            image: image.into(),
            fx: cam.intrinsics.fx,
            fy: cam.intrinsics.fy,
            cx: cam.intrinsics.cx,
            cy: cam.intrinsics.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: cam.pose.translation.into(),
            role,
        }
    }

    pub fn role(&self) -> ViewRole {
        self.role.unwrap_or(ViewRole::Input)
    }

    pub fn camera(&self, width: usize, height: usize) -> Result<Camera> {
        let pose = CameraPose::new(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from(self.translation),
        )?;
        Camera::new(CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)?, pose, width, height)
    }
}

/// Pose file: a TOML document with one `[[view]]` table per image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    #[serde(rename = "view", default)]
    pub views: Vec<PoseRecord>,
}

impl PoseFile {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pose file serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam_at(t: [f64; 3], k: CameraIntrinsics, w: usize, h: usize) -> Camera {
        Camera::new(k, CameraPose::from_translation(t), w, h).unwrap()
    }

    fn close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    #[test]
    fn planes_far_to_near_uniform_disparity() {
        let p = DepthPlaneSet::sample(0.5, 100.0, 64).unwrap();
        assert_eq!(p.len(), 64);
        assert_eq!(p.distances()[0], 100.0);
        assert_eq!(p.distances()[63], 0.5);
        let disp: Vec<f64> = p.distances().iter().map(|d| 1.0 / d).collect();
        let gap = disp[1] - disp[0];
        for w in disp.windows(2) {
            assert!(w[1] > w[0]);
            assert!(((w[1] - w[0]) - gap).abs() <= 1e-9 * gap);
        }
    }

    #[test]
    fn three_planes_by_hand() {
        let p = DepthPlaneSet::sample(0.5, 100.0, 3).unwrap();
        // disparities 0.01, 1.005, 2.0
        let d = p.distances();
        assert_eq!(d[0], 100.0);
        assert!((d[1] - 1.0 / 1.005).abs() < 1e-12);
        assert!((d[1] - 0.99502).abs() < 1e-5);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn plane_sampling_rejects_bad_ranges() {
        assert!(DepthPlaneSet::sample(2.0, 2.0, 1).is_err());
        assert!(DepthPlaneSet::sample(0.0, 2.0, 4).is_err());
        assert!(DepthPlaneSet::sample(3.0, 2.0, 4).is_err());
        assert!(DepthPlaneSet::sample(1.0, 2.0, 0).is_err());
        assert_eq!(DepthPlaneSet::sample(1.0, 2.0, 1).unwrap().distances(), &[2.0]);
    }

    #[test]
    fn identity_rig_gives_identity_homography() {
        let k = CameraIntrinsics::new(50.0, 55.0, 31.5, 23.5).unwrap();
        let cam = cam_at([0.0; 3], k, 64, 48);
        for a in [0.5, 2.0, 100.0] {
            let h = plane_homography(&cam, &k, a, &Vector3::z()).unwrap();
            assert!(close(&h.matrix, &Matrix3::identity(), 1e-12));
        }
    }

    #[test]
    fn x_translation_by_hand() {
        let k = CameraIntrinsics::identity();
        let cam = cam_at([1.0, 0.0, 0.0], k, 4, 4);
        let h = plane_homography(&cam, &k, 2.0, &Vector3::z()).unwrap();
        let want = Matrix3::new(1.0, 0.0, -0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(h.matrix, want);
        let far = plane_homography(&cam, &k, 1e12, &Vector3::z()).unwrap();
        assert!(close(&far.matrix, &Matrix3::identity(), 1e-11));
    }

    #[test]
    fn homography_rejects_bad_inputs() {
        let k = CameraIntrinsics::identity();
        let cam = cam_at([1.0, 0.0, 0.0], k, 4, 4);
        assert!(plane_homography(&cam, &k, 0.0, &Vector3::z()).is_err());
        let bad = CameraIntrinsics {
            fx: 0.0,
            ..k
        };
        assert!(plane_homography(&cam, &bad, 1.0, &Vector3::z()).is_err());
        assert!(Homography::new(Matrix3::zeros()).is_err());
    }

    #[test]
    fn pure_rotation_is_depth_independent() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.0, 12.0).unwrap();
        let rot = nalgebra::Rotation3::from_euler_angles(0.05, -0.1, 0.02).into_inner();
        let cam = Camera::new(k, CameraPose::new(rot, Vector3::zeros()).unwrap(), 32, 24).unwrap();
        let expected = k.matrix() * rot * k.inverse_matrix().unwrap();
        for a in [0.7, 3.0, 50.0] {
            let h = plane_homography(&cam, &k, a, &Vector3::z()).unwrap();
            assert!(close(&h.matrix, &expected, 1e-12));
        }
    }

    #[test]
    fn disparity_law_random_configurations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let k = CameraIntrinsics::identity();
        for _ in 0..10 {
            let tx: f64 = rng.gen_range(-2.0..2.0);
            let a: f64 = rng.gen_range(0.5..100.0);
            let cam = cam_at([tx, 0.0, 0.0], k, 8, 8);
            let h = plane_homography(&cam, &k, a, &Vector3::z()).unwrap();
            let (x, y) = h.apply(0.3, -0.2).unwrap();
            let shift = 0.3 - x;
            assert!((shift - tx / a).abs() <= 1e-9 * (tx / a).abs().max(1e-300));
            assert_eq!(y, -0.2);
        }
    }

    #[test]
    fn homography_continuous_in_depth() {
        let k = CameraIntrinsics::new(30.0, 30.0, 10.0, 10.0).unwrap();
        let cam = cam_at([0.3, -0.1, 0.05], k, 20, 20);
        let a = 2.5;
        let h0 = plane_homography(&cam, &k, a, &Vector3::z()).unwrap();
        let h1 = plane_homography(&cam, &k, a * (1.0 + 1e-6), &Vector3::z()).unwrap();
        let rel = (h1.matrix - h0.matrix).amax() / h0.matrix.amax();
        assert!(rel < 1e-5, "{rel}");
    }

    #[test]
    fn inverse_of_translation() {
        let h = Homography::new(Matrix3::new(1.0, 0.0, 5.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let inv = h.inverse().unwrap();
        assert_eq!(inv.matrix, Matrix3::new(1.0, 0.0, -5.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0));
        assert_eq!(Homography::identity().inverse().unwrap(), Homography::identity());
        let singular = Homography {
            matrix: Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0),
        };
        assert!(singular.inverse().is_err());
    }

    /// Gauss-Jordan elimination, independent of nalgebra's inverse.
    fn gauss_jordan(m: &Matrix3<f64>) -> Matrix3<f64> {
        let mut a = [[0.0; 6]; 3];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] = m[(r, c)];
            }
            a[r][3 + r] = 1.0;
        }
        for col in 0..3 {
            let piv = (col..3)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            let p = a[col][col];
            for v in a[col].iter_mut() {
                *v /= p;
            }
            for r in 0..3 {
                if r != col {
                    let f = a[r][col];
                    let pivot_row = a[col];
                    for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        Matrix3::from_fn(|r, c| a[r][3 + c])
    }

    proptest! {
        #[test]
        fn inverse_composes_to_identity(
            entries in prop::array::uniform9(-1.0f64..1.0),
        ) {
            // diagonally dominant => well conditioned
            let mut m = Matrix3::from_row_slice(&entries) * 0.3;
            m += Matrix3::identity() * 2.0;
            let h = Homography::new(m).unwrap();
            let inv = h.inverse().unwrap();
            let prod = h.compose(&inv);
            prop_assert!(close(&prod.normalized(), &Matrix3::identity(), 1e-9));
            prop_assert!(close(&inv.matrix, &gauss_jordan(&m), 1e-9));
        }
    }

    #[test]
    fn single_view_reference_matches_view() {
        let k = CameraIntrinsics::new(50.0, 52.0, 30.0, 21.0).unwrap();
        let cam = cam_at([0.2, -0.1, 0.0], k, 64, 48);
        let r = reference_camera(&[cam], 48, 64, 30.0).unwrap();
        assert!((r.pose.center() - cam.pose.center()).amax() < 1e-12);
        assert_eq!(r.pose.rotation, Matrix3::identity());
        for (a, b) in [
            (r.intrinsics.fx, k.fx),
            (r.intrinsics.fy, k.fy),
            (r.intrinsics.cx, k.cx),
            (r.intrinsics.cy, k.cy),
        ] {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn two_view_reference_covers_both_footprints() {
        let k = CameraIntrinsics::new(40.0, 40.0, 15.5, 15.5).unwrap();
        let far = 10.0;
        let views = [cam_at([-1.0, 0.0, 0.0], k, 32, 32), cam_at([1.0, 0.0, 0.0], k, 32, 32)];
        let r = reference_camera(&views, 32, 32, far).unwrap();
        assert!(r.pose.center().amax() < 1e-12);
        // footprint half-width of one view at the far plane, in meters
        let half = 16.0 / 40.0 * far;
        // union spans [-1 - half, 1 + half]; reference fills 32 px with it
        let fx = 32.0 / ((2.0 + 2.0 * half) / far);
        assert!((r.intrinsics.fx - fx).abs() < 1e-9);
        assert!(r.intrinsics.fx < k.fx);
        assert!((r.intrinsics.fy - k.fy).abs() < 1e-9);
        assert!(reference_camera(&[], 32, 32, far).is_err());
    }

    #[test]
    fn pose_file_is_strict() {
        let good = r#"
            [[view]]
            image = "a.png"
            fx = 10.0
            fy = 10.0
            cx = 4.0
            cy = 4.0
            rotation = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
            translation = [0.1, 0.0, 0.0]
        "#;
        let f = PoseFile::parse(good).unwrap();
        assert_eq!(f.views.len(), 1);
        assert_eq!(f.views[0].role(), ViewRole::Input);
        let cam = f.views[0].camera(8, 8).unwrap();
        assert_eq!(cam.pose.translation.x, 0.1);
        assert_eq!(PoseFile::parse(&f.to_toml()).unwrap(), f);
        let extra = good.replace("cy = 4.0", "cy = 4.0\nskew = 0.0");
        assert!(PoseFile::parse(&extra).is_err());
        let bad_rot = good.replace("[1.0, 0.0, 0.0, 0.0, 1.0", "[2.0, 0.0, 0.0, 0.0, 1.0");
        assert!(PoseFile::parse(&bad_rot).unwrap().views[0].camera(8, 8).is_err());
    }
}
