//! Procedural layered scenes with analytic ground truth, and the on-disk
//! scene format.
//!
//! A scene is a stack of fronto-parallel textured planes, far to near. Each
//! layer texture is parameterized by the pixels of a virtual "texture
//! camera" at the rig origin with identity rotation, so the texel under a
//! view pixel is found through the inverse plane homography.
//!
//! Scene directory layout:
//!
//! ```text
//! scene.toml     manifest: generator spec, seed, intensity encoding, noise
//! poses.toml     one [[view]] table per image (see geometry::PoseFile)
//! view_000.png   16-bit RGB, value = offset + scale * code / 65535
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{plane_homography, Camera, CameraIntrinsics, CameraPose, CameraView, PoseFile, PoseRecord, ViewRole};
use crate::noise::NoiseParams;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "scene.toml";
pub const POSES_FILE: &str = "poses.toml";
/// Sub-samples per pixel along each axis for ground-truth rendering.
pub const SUPERSAMPLE: usize = 4;
pub const MAX_LAYERS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    Checker,
    PerlinLike,
    Ramp,
}

impl std::str::FromStr for TextureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "checker" => Ok(TextureKind::Checker),
            "perlin-like" => Ok(TextureKind::PerlinLike),
            "ramp" => Ok(TextureKind::Ramp),
            _ => Err(format!("unknown texture kind {s:?} (checker, perlin-like, ramp)")),
        }
    }
}

/// Generator parameters; everything else is derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub layers: usize,
    pub near: f64,
    pub far: f64,
    pub texture: TextureKind,
    pub seed: u64,
    /// Explicit layer depths, far to near; sampled in disparity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<Vec<f64>>,
    #[serde(default = "SceneSpec::default_texture_size")]
    pub texture_size: usize,
    /// Tangent of the half field of view covered by the textures.
    #[serde(default = "SceneSpec::default_half_fov_tan")]
    pub half_fov_tan: f64,
}

impl SceneSpec {
    fn default_texture_size() -> usize {
        256
    }

    fn default_half_fov_tan() -> f64 {
        1.0
    }

    pub fn new(layers: usize, near: f64, far: f64, texture: TextureKind, seed: u64) -> Self {
        SceneSpec {
            layers,
            near,
            far,
            texture,
            seed,
            depths: None,
            texture_size: Self::default_texture_size(),
            half_fov_tan: Self::default_half_fov_tan(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > MAX_LAYERS {
            return Err(Error::invalid(format!("scene layers must be in 1..={MAX_LAYERS}, got {}", self.layers)));
        }
        if !(self.near > 0.0) || !(self.near < self.far) || !self.far.is_finite() {
            return Err(Error::invalid(format!(
                "scene depth range needs 0 < near < far, got {}..{}",
                self.near, self.far
            )));
        }
        if self.texture_size < 8 || !(self.half_fov_tan > 0.0) {
            return Err(Error::invalid("texture size must be >= 8 and half_fov_tan positive"));
        }
        if let Some(d) = &self.depths {
            if d.len() != self.layers
                || d.iter().any(|&a| !(a > 0.0))
                || d.windows(2).any(|w| w[1] >= w[0])
            {
                return Err(Error::invalid("explicit depths must be positive, strictly decreasing, one per layer"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub depth: f64,
    /// `3 x S x S` colors in `[0, 1]`.
    pub texture: Tensor<f32>,
    /// `1 x S x S` opacity in `[0, 1]`.
    pub mask: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Far to near.
    pub layers: Vec<Layer>,
    pub texture_intrinsics: CameraIntrinsics,
    pub spec: SceneSpec,
}

/// Intrinsics of the texture camera: an `size x size` image spanning
/// `[-half_fov_tan, half_fov_tan]` in normalized coordinates.
pub fn texture_intrinsics(size: usize, half_fov_tan: f64) -> CameraIntrinsics {
    let f = size as f64 / (2.0 * half_fov_tan);
    let c = (size as f64 - 1.0) / 2.0;
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: c,
        cy: c,
    }
}

fn hash(seed: u64, a: u64, b: u64, c: i64, d: i64) -> u64 {
    let mut z = seed;
    for v in [a, b, c as u64, d as u64] {
        z = (z ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z ^= z >> 29;
        z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z ^= z >> 32;
    }
    z
}

fn lattice(seed: u64, layer: u64, octave: u64, x: i64, y: i64) -> f64 {
    (hash(seed, layer, octave, x, y) >> 11) as f64 / (1u64 << 53) as f64
}

/// Fractal value noise in `[0, 1]`.
fn value_noise(seed: u64, layer: u64, x: f64, y: f64, cell: f64) -> f64 {
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (mut total, mut amp, mut norm, mut freq) = (0.0, 1.0, 0.0, 1.0 / cell);
    for octave in 0..4u64 {
        let (fx, fy) = (x * freq, y * freq);
        let (ix, iy) = (fx.floor(), fy.floor());
        let (tx, ty) = (smooth(fx - ix), smooth(fy - iy));
        let (ix, iy) = (ix as i64, iy as i64);
        let v = |dx: i64, dy: i64| lattice(seed, layer, octave, ix + dx, iy + dy);
        let top = v(0, 0) * (1.0 - tx) + v(1, 0) * tx;
        let bottom = v(0, 1) * (1.0 - tx) + v(1, 1) * tx;
        total += amp * (top * (1.0 - ty) + bottom * ty);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    total / norm
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn make_texture(kind: TextureKind, size: usize, layer: usize, seed: u64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (c0, c1) = (random_color(rng), random_color(rng));
    let lerp = |t: f32, c: usize| c0[c] * (1.0 - t) + c1[c] * t;
    match kind {
        TextureKind::Checker => {
            let cell = rng.gen_range(size / 16..=size / 6).max(2);
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            Tensor::from_fn(&[3, size, size], |i| {
                let parity = ((i[2] + ox) / cell + (i[1] + oy) / cell) % 2;
                lerp(parity as f32, i[0])
            })
        }
        TextureKind::PerlinLike => {
            let cell = rng.gen_range(size as f64 / 12.0..size as f64 / 4.0);
            let c2 = random_color(rng);
            Tensor::from_fn(&[3, size, size], |i| {
                let (x, y) = (i[2] as f64, i[1] as f64);
                let t = value_noise(seed, 2 * layer as u64, x, y, cell) as f32;
                let u = value_noise(seed, 2 * layer as u64 + 1, x, y, cell * 0.5) as f32;
                lerp(t, i[0]) * (1.0 - 0.5 * u) + c2[i[0]] * 0.5 * u
            })
        }
        TextureKind::Ramp => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let half = size as f64 / 2.0;
            Tensor::from_fn(&[3, size, size], |i| {
                // |p| <= 1/2 over the square, so the ramp stays affine
                let p = ((i[2] as f64 - half) * dx + (i[1] as f64 - half) * dy) / (2.0 * std::f64::consts::SQRT_2 * half);
                lerp((p + 0.5) as f32, i[0])
            })
        }
    }
}

/// Union of 1 to 3 disks covering part of the texture.
fn make_mask(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = size as f64;
    let disks: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            (
                rng.gen_range(0.3 * s..0.7 * s),
                rng.gen_range(0.3 * s..0.7 * s),
                rng.gen_range(0.08 * s..0.2 * s),
            )
        })
        .collect();
    Tensor::from_fn(&[1, size, size], |i| {
        let (x, y) = (i[2] as f64, i[1] as f64);
        disks.iter().any(|&(cx, cy, r)| (x - cx).powi(2) + (y - cy).powi(2) <= r * r) as u8 as f32
    })
}

/// Generates a scene; deterministic in `spec.seed`.
pub fn make_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let depths = match &spec.depths {
        Some(d) => d.clone(),
        None => {
            // one sample per equal disparity bin keeps depths distinct
            let (lo, hi) = (1.0 / spec.far, 1.0 / spec.near);
            let bin = (hi - lo) / spec.layers as f64;
            (0..spec.layers)
                .map(|k| 1.0 / (lo + bin * (k as f64 + rng.gen_range(0.1..0.9))))
                .collect()
        }
    };
    let n = spec.texture_size;
    let layers = depths
        .iter()
        .enumerate()
        .map(|(l, &depth)| Layer {
            depth,
            texture: make_texture(spec.texture, n, l, spec.seed, &mut rng),
            mask: if l == 0 {
                Tensor::ones(&[1, n, n])
            } else {
                make_mask(n, &mut rng)
            },
        })
        .collect();
    Ok(SyntheticScene {
        layers,
        texture_intrinsics: texture_intrinsics(n, spec.half_fov_tan),
        spec: spec.clone(),
    })
}

/// Far checker board at 20 m behind a textured disk at 2 m.
pub fn occlusion_fixture(seed: u64) -> SyntheticScene {
    let mut spec = SceneSpec::new(2, 2.0, 20.0, TextureKind::Checker, seed);
    spec.depths = Some(vec![20.0, 2.0]);
    let mut scene = make_scene(&spec).expect("valid fixture");
    let n = spec.texture_size as f64;
    let r = n * 0.15;
    scene.layers[1].mask = Tensor::from_fn(&[1, spec.texture_size, spec.texture_size], |i| {
        let (x, y) = (i[2] as f64 - (n - 1.0) / 2.0, i[1] as f64 - (n - 1.0) / 2.0);
        (x * x + y * y <= r * r) as u8 as f32
    });
    scene
}

fn sample_bilinear(t: &Tensor<f32>, c: usize, x: f64, y: f64) -> f32 {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let get = |xi: f64, yi: f64| {
        let xi = xi.clamp(0.0, (w - 1) as f64) as usize;
        let yi = yi.clamp(0.0, (h - 1) as f64) as usize;
        t.data()[(c * h + yi) * w + xi]
    };
    let top = get(x0, y0) * (1.0 - fx) + get(x0 + 1.0, y0) * fx;
    let bottom = get(x0, y0 + 1.0) * (1.0 - fx) + get(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Renders the `3 x H x W` view of `camera` (pose in the rig frame) by
/// compositing the layers near over far, averaging `SUPERSAMPLE^2`
/// sub-samples per pixel. Layers are transparent outside their texture.
pub fn render_ground_truth(scene: &SyntheticScene, camera: &Camera) -> Result<Tensor<f32>> {
    let (h, w) = (camera.height, camera.width);
    let n = scene.spec.texture_size as f64;
    let normal = Vector3::z();
    let maps = scene
        .layers
        .iter()
        .map(|l| plane_homography(camera, &scene.texture_intrinsics, l.depth, &normal)?.inverse())
        .collect::<Result<Vec<_>>>()?;
    let ss = SUPERSAMPLE;
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                    let mut color = [0.0f32; 3];
                    for (layer, map) in scene.layers.iter().zip(&maps) {
                        let Some((u, v)) = map.apply(px, py) else { continue };
                        if !(u >= -0.5 && v >= -0.5 && u <= n - 0.5 && v <= n - 0.5) {
                            continue;
                        }
                        let a = sample_bilinear(&layer.mask, 0, u, v);
                        for (c, col) in color.iter_mut().enumerate() {
                            *col = sample_bilinear(&layer.texture, c, u, v) * a + (1.0 - a) * *col;
                        }
                    }
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            for (c, v) in acc.iter().enumerate() {
                out.set(&[c, y, x], v / (ss * ss) as f32);
            }
        }
    }
    Ok(out)
}

/// Cameras on a `cols x rows` grid in the `z = 0` plane, centered on the
/// origin, identity rotation, square pixels with horizontal field of view
/// `2 * atan(half_fov_tan)`.
pub fn grid_rig(cols: usize, rows: usize, spacing: f64, width: usize, height: usize, half_fov_tan: f64) -> Result<Vec<Camera>> {
    if cols == 0 || rows == 0 {
        return Err(Error::invalid("rig needs at least one camera"));
    }
    let f = width as f64 / (2.0 * half_fov_tan);
    let k = CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)?;
    let mut cams = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let x = (c as f64 - (cols as f64 - 1.0) / 2.0) * spacing;
            let y = (r as f64 - (rows as f64 - 1.0) / 2.0) * spacing;
            cams.push(Camera::new(k, CameraPose::from_translation([x, y, 0.0]), width, height)?);
        }
    }
    Ok(cams)
}

/// Affine map between stored 16-bit codes and intensities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Encoding {
    pub offset: f64,
    pub scale: f64,
}

impl Encoding {
    pub const CLEAN: Encoding = Encoding {
        offset: 0.0,
        scale: 1.0,
    };
    /// Headroom for unclamped noisy intensities.
    pub const NOISY: Encoding = Encoding {
        offset: -2.0,
        scale: 5.0,
    };

    pub fn encode(&self, v: f32) -> u16 {
        let t = (v as f64 - self.offset) / self.scale * 65535.0;
        t.round().clamp(0.0, 65535.0) as u16
    }

    pub fn decode(&self, code: u16) -> f32 {
        (self.offset + self.scale * code as f64 / 65535.0) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRecord {
    pub sigma_r: f64,
    pub sigma_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<u32>,
    pub seed: u64,
    /// Directory of the clean counterpart, relative to this scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<String>,
}

impl NoiseRecord {
    pub fn params(&self) -> NoiseParams {
        NoiseParams {
            sigma_r: self.sigma_r,
            sigma_s: self.sigma_s,
            gain: self.gain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub encoding: Encoding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseRecord>,
}

impl Default for SceneManifest {
    fn default() -> Self {
        SceneManifest {
            encoding: Encoding::CLEAN,
            generator: None,
            noise: None,
        }
    }
}

/// A scene read from disk.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub views: Vec<CameraView>,
    pub roles: Vec<ViewRole>,
    pub names: Vec<String>,
    pub manifest: SceneManifest,
}

impl LoadedScene {
    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera).collect()
    }

    pub fn indices(&self, role: ViewRole) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }
}

pub fn view_file_name(i: usize) -> String {
    format!("view_{i:03}.png")
}

fn write_png(path: &Path, image: &Tensor<f32>, enc: &Encoding) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let x = image.data();
    let mut raw = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            raw.push(enc.encode(x[c * hw + p]));
        }
    }
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_png(path: &Path, enc: &Encoding) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgb = img.into_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    for (p, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + p] = enc.decode(px.0[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes `views` as `view_NNN.png` plus pose file and manifest.
pub fn save_views(dir: &Path, views: &[CameraView], roles: &[ViewRole], manifest: &SceneManifest) -> Result<()> {
    if views.is_empty() || roles.len() != views.len() {
        return Err(Error::invalid("save_views needs one role per view and at least one view"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut poses = PoseFile::default();
    for (i, (v, role)) in views.iter().zip(roles).enumerate() {
        let name = view_file_name(i);
        write_png(&dir.join(&name), &v.image, &manifest.encoding)?;
        let role = (*role == ViewRole::Target).then_some(ViewRole::Target);
        poses.views.push(PoseRecord::from_camera(name, &v.camera, role));
    }
    write_text(&dir.join(POSES_FILE), &poses.to_toml())?;
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join(MANIFEST_FILE), &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a scene directory, checking that every image has exactly one pose
/// and that all images share one resolution.
pub fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: SceneManifest = if manifest_path.exists() {
        toml::from_str(&read_text(&manifest_path)?).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?
    } else {
        SceneManifest::default()
    };
    let poses_path = dir.join(POSES_FILE);
    let poses = PoseFile::parse(&read_text(&poses_path)?).map_err(|message| Error::Parse {
        path: poses_path.clone(),
        message,
    })?;
    let images: BTreeSet<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    if images.len() != poses.views.len() {
        return Err(Error::CountMismatch {
            path: dir.to_path_buf(),
            images: images.len(),
            poses: poses.views.len(),
        });
    }
    let posed: BTreeSet<&str> = poses.views.iter().map(|r| r.image.as_str()).collect();
    if let Some(orphan) = images.iter().find(|n| !posed.contains(n.as_str())) {
        return Err(Error::MissingPose {
            path: dir.to_path_buf(),
            image: orphan.clone(),
        });
    }
    let mut views = Vec::with_capacity(poses.views.len());
    let mut size: Option<(usize, usize, PathBuf)> = None;
    for rec in &poses.views {
        let path = dir.join(&rec.image);
        let img = read_png(&path, &manifest.encoding)?;
        let (h, w) = (img.shape()[1], img.shape()[2]);
        match &size {
            Some((sh, sw, _)) if (*sh, *sw) != (h, w) => {
                return Err(Error::ResolutionMismatch {
                    path,
                    want_w: *sw,
                    want_h: *sh,
                    got_w: w,
                    got_h: h,
                })
            }
            None => size = Some((h, w, path.clone())),
            _ => {}
        }
        let camera = rec.camera(w, h).map_err(|e| Error::Parse {
            path: poses_path.clone(),
            message: format!("{}: {e}", rec.image),
        })?;
        views.push(CameraView::new(camera, img)?);
    }
    Ok(LoadedScene {
        roles: poses.views.iter().map(PoseRecord::role).collect(),
        names: poses.views.iter().map(|r| r.image.clone()).collect(),
        views,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rig() -> Vec<Camera> {
        grid_rig(3, 1, 0.1, 24, 16, 0.5).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(SceneSpec::new(0, 1.0, 5.0, TextureKind::Ramp, 0).validate().is_err());
        assert!(SceneSpec::new(9, 1.0, 5.0, TextureKind::Ramp, 0).validate().is_err());
        assert!(SceneSpec::new(2, 5.0, 5.0, TextureKind::Ramp, 0).validate().is_err());
        let mut s = SceneSpec::new(2, 1.0, 5.0, TextureKind::Ramp, 0);
        s.depths = Some(vec![2.0, 3.0]);
        assert!(s.validate().is_err());
        assert_eq!("perlin-like".parse::<TextureKind>().unwrap(), TextureKind::PerlinLike);
    }

    #[test]
    fn generation_is_deterministic_and_ordered() {
        let spec = SceneSpec::new(4, 1.0, 50.0, TextureKind::PerlinLike, 17);
        let a = make_scene(&spec).unwrap();
        assert_eq!(a, make_scene(&spec).unwrap());
        assert!(a.layers.windows(2).all(|w| w[1].depth < w[0].depth));
        assert!(a.layers.iter().all(|l| l.depth >= 1.0 && l.depth <= 50.0));
        assert!(a.layers.iter().all(|l| l.texture.min() >= 0.0 && l.texture.max() <= 1.0));
        let other = make_scene(&SceneSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a.layers[0].texture, other.layers[0].texture);
    }

    #[test]
    fn texture_camera_view_reproduces_the_texture() {
        let mut spec = SceneSpec::new(1, 1.0, 10.0, TextureKind::Ramp, 2);
        spec.texture_size = 32;
        let scene = make_scene(&spec).unwrap();
        let cam = Camera::new(scene.texture_intrinsics, CameraPose::identity(), 32, 32).unwrap();
        let img = render_ground_truth(&scene, &cam).unwrap();
        let tex = &scene.layers[0].texture;
        let mut err = 0.0f32;
        for c in 0..3 {
            for y in 1..31 {
                for x in 1..31 {
                    err = err.max((img.get(&[c, y, x]) - tex.get(&[c, y, x])).abs());
                }
            }
        }
        // ramp is affine, so the box filter of bilinear samples is exact
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn translation_shifts_by_disparity() {
        let mut spec = SceneSpec::new(1, 1.0, 10.0, TextureKind::PerlinLike, 4);
        spec.depths = Some(vec![4.0]);
        let scene = make_scene(&spec).unwrap();
        let k = CameraIntrinsics::new(40.0, 40.0, 15.5, 15.5).unwrap();
        let a = Camera::new(k, CameraPose::identity(), 32, 32).unwrap();
        // t_x * f / a = 0.3 * 40 / 4 = 3 px
        let b = Camera::new(k, CameraPose::from_translation([0.3, 0.0, 0.0]), 32, 32).unwrap();
        let ia = render_ground_truth(&scene, &a).unwrap();
        let ib = render_ground_truth(&scene, &b).unwrap();
        let mut err = 0.0f32;
        for y in 0..32 {
            for x in 0..29 {
                err = err.max((ib.get(&[1, y, x]) - ia.get(&[1, y, x + 3])).abs());
            }
        }
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn near_disk_occludes_checker() {
        let scene = occlusion_fixture(1);
        let k = scene.texture_intrinsics;
        let cam = Camera::new(k, CameraPose::identity(), 256, 256).unwrap();
        let img = render_ground_truth(&scene, &cam).unwrap();
        let (disk, back) = (&scene.layers[1], &scene.layers[0]);
        for (y, x) in [(128, 128), (120, 135), (10, 10), (250, 5)] {
            let src = if disk.mask.get(&[0, y, x]) == 1.0 && disk.mask.get(&[0, y + 1, x + 1]) == 1.0 {
                &disk.texture
            } else {
                &back.texture
            };
            if (y, x) == (128, 128) {
                assert!(std::ptr::eq(src, &disk.texture));
            }
            for c in 0..3 {
                let got = img.get(&[c, y, x]);
                let neighborhood = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| src.get(&[c, (y + dy).min(255), (x + dx).min(255)]));
                let (lo, hi) = neighborhood.fold((f32::MAX, f32::MIN), |(l, h), v| (l.min(v), h.max(v)));
                let prev = src.get(&[c, y.saturating_sub(1), x.saturating_sub(1)]);
                let (lo, hi) = (lo.min(prev), hi.max(prev));
                assert!(got >= lo - 1e-5 && got <= hi + 1e-5, "{y},{x},{c}: {got} not in [{lo},{hi}]");
            }
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let scene = make_scene(&SceneSpec::new(2, 1.0, 8.0, TextureKind::Checker, 3)).unwrap();
        let views: Vec<CameraView> = small_rig()
            .into_iter()
            .map(|c| CameraView::new(c, render_ground_truth(&scene, &c).unwrap()).unwrap())
            .collect();
        let roles = [ViewRole::Input, ViewRole::Target, ViewRole::Input];
        let manifest = SceneManifest {
            generator: Some(scene.spec.clone()),
            ..Default::default()
        };
        save_views(dir.path(), &views, &roles, &manifest).unwrap();
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(loaded.roles, roles);
        assert_eq!(loaded.manifest, manifest);
        for (a, b) in views.iter().zip(&loaded.views) {
            assert!((a.camera.pose.translation - b.camera.pose.translation).amax() == 0.0);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 65535.0 + 1e-7);
        }
        // a second round trip is exact
        let dir2 = tempfile::tempdir().unwrap();
        save_views(dir2.path(), &loaded.views, &roles, &manifest).unwrap();
        let again = load_scene(dir2.path()).unwrap();
        for (a, b) in loaded.views.iter().zip(&again.views) {
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn ramp_quantization_bound() {
        let enc = Encoding::CLEAN;
        let worst = (0..=10_000)
            .map(|i| {
                let v = i as f32 / 10_000.0;
                (enc.decode(enc.encode(v)) - v).abs() as f64
            })
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / (2.0 * 65535.0) + 1e-7);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let views: Vec<CameraView> = small_rig()
            .into_iter()
            .map(|c| CameraView::new(c, Tensor::full(&[3, 16, 24], 0.5)).unwrap())
            .collect();
        save_views(dir.path(), &views, &[ViewRole::Input; 3], &SceneManifest::default()).unwrap();

        let poses_path = dir.path().join(POSES_FILE);
        let full = fs::read_to_string(&poses_path).unwrap();
        let mut two = PoseFile::parse(&full).unwrap();
        two.views.pop();
        fs::write(&poses_path, two.to_toml()).unwrap();
        let err = load_scene(dir.path()).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { images: 3, poses: 2, .. }), "{err}");

        let mut renamed = PoseFile::parse(&full).unwrap();
        renamed.views[2].image = "other.png".into();
        fs::write(&poses_path, renamed.to_toml()).unwrap();
        assert!(matches!(load_scene(dir.path()).unwrap_err(), Error::MissingPose { .. }));

        fs::write(&poses_path, &full).unwrap();
        let small = CameraView::new(views[0].camera.window(0, 0, 8, 8), Tensor::zeros(&[3, 8, 8])).unwrap();
        write_png(&dir.path().join(view_file_name(1)), &small.image, &Encoding::CLEAN).unwrap();
        let err = load_scene(dir.path()).unwrap_err();
        assert!(matches!(err, Error::ResolutionMismatch { got_w: 8, .. }), "{err}");
        assert!(err.to_string().contains("view_001.png"));

        fs::write(dir.path().join(view_file_name(1)), b"not a png").unwrap();
        assert!(matches!(load_scene(dir.path()).unwrap_err(), Error::Image { .. }));
    }
}
