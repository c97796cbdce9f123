//! Homography warping with gather semantics, plane sweep volumes and the
//! projection of multiplane tensors into render views.
//!
//! The warp `W(I, H, s)` produces an image on a grid `s` times denser than
//! the grid `H` maps from: output pixel `q` reads `I` at `H(q / s)` by
//! bilinear interpolation, with zeros outside the source.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{plane_homography, Camera, DepthPlaneSet, Homography};
use crate::tensor::{Conv2d, Real, Tape, Tensor, Var, WarpJob, WarpPlan};

/// Interpolation used by every warp in the crate.
pub const INTERPOLATION: &str = "bilinear";

/// `round(s * H) x round(s * W)`, at least one pixel.
pub fn scaled_size(height: usize, width: usize, scale: f64) -> (usize, usize) {
    let r = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    (r(height), r(width))
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("warp scale must be positive, got {scale}")));
    }
    Ok(())
}

fn forward_plan<T: Real>(src_h: usize, src_w: usize, out_h: usize, out_w: usize, h: &Homography, scale: f64) -> WarpPlan<T> {
    WarpPlan::from_fn(src_h, src_w, out_h, out_w, |x, y| h.apply(x / scale, y / scale))
}

/// Plan reading a grid sampled `scale` times denser than the grid `h_inv`
/// maps into: output pixel `q` reads the source at `scale * h_inv(q)`.
fn backward_plan<T: Real>(
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
    h_inv: &Homography,
    scale: f64,
) -> WarpPlan<T> {
    WarpPlan::from_fn(src_h, src_w, out_h, out_w, |x, y| {
        h_inv.apply(x, y).map(|(u, v)| (u * scale, v * scale))
    })
}

fn chw<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::invalid(format!("{op} expects a C x H x W image, got {:?}", t.shape()))),
    }
}

fn run_plan<T: Real>(source: &Tensor<T>, plan: WarpPlan<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw("warp", source)?;
    let mut tape = Tape::new();
    let x = tape.leaf(source.clone().reshape(&[1, c, h, w])?);
    let (oh, ow) = (plan.out_h, plan.out_w);
    let jobs = vec![WarpJob {
        src_n: 0,
        dst_n: 0,
        dst_c: 0,
        plan: Arc::new(plan),
    }];
    let y = tape.warp(x, Arc::new(jobs), 1, c)?;
    tape.value(y).clone().reshape(&[c, oh, ow])
}

/// `W(source, h, scale)`; output size is `round(scale * H) x round(scale * W)`.
pub fn warp_image<T: Real>(source: &Tensor<T>, h: &Homography, scale: f64) -> Result<Tensor<T>> {
    check_scale(scale)?;
    let (_, sh, sw) = chw("warp_image", source)?;
    let (oh, ow) = scaled_size(sh, sw, scale);
    run_plan(source, forward_plan(sh, sw, oh, ow, h, scale))
}

/// Inverse of [`warp_image`] for a source that was produced at `scale`:
/// output pixel `q` of the `out_h x out_w` image reads `source` at
/// `scale * h_inv(q)`.
pub fn backward_warp<T: Real>(
    source: &Tensor<T>,
    h_inv: &Homography,
    scale: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    check_scale(scale)?;
    let (_, sh, sw) = chw("backward_warp", source)?;
    run_plan(source, backward_plan(sh, sw, out_h, out_w, h_inv, scale))
}

/// Plane sweep volume stored as `D x (V * C1) x sH x sW` on a tape; the
/// slice for plane `d` and view `v` occupies channels `v*C1 .. (v+1)*C1`
/// of batch entry `d`.
#[derive(Clone, Debug)]
pub struct PsvTensor {
    pub data: Var,
    pub depth_planes: DepthPlaneSet,
    pub reference: Camera,
    /// Input cameras expressed relative to `reference`.
    pub views: Vec<Camera>,
    pub channels: usize,
    pub scale: f64,
}

impl PsvTensor {
    pub fn depth(&self) -> usize {
        self.depth_planes.len()
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    /// Slice `(d, v)` as a `C1 x sH x sW` tensor.
    pub fn slice<T: Real>(&self, tape: &Tape<T>, d: usize, v: usize) -> Result<Tensor<T>> {
        let t = tape.value(self.data);
        let s = t.shape();
        t.narrow(0, d, 1)?
            .narrow(1, v * self.channels, self.channels)?
            .reshape(&[self.channels, s[2], s[3]])
    }
}

fn same_size(cams: &[Camera]) -> Result<(usize, usize)> {
    let first = cams.first().ok_or_else(|| Error::invalid("no cameras given"))?;
    if let Some(c) = cams
        .iter()
        .find(|c| (c.width, c.height) != (first.width, first.height))
    {
        return Err(Error::invalid(format!(
            "inconsistent image sizes: {}x{} vs {}x{}",
            first.width, first.height, c.width, c.height
        )));
    }
    Ok((first.height, first.width))
}

/// Forward-warps each of the `V` images in `images` (`V x C x H x W`) onto
/// every depth plane of `reference`, after an optional per-view convolution.
///
/// `views` are in the frame `reference.pose` is expressed in.
#[allow(clippy::too_many_arguments)]
pub fn build_psv<T: Real>(
    tape: &mut Tape<T>,
    images: Var,
    views: &[Camera],
    reference: &Camera,
    planes: &DepthPlaneSet,
    scale: f64,
    pre_conv: Option<(&Conv2d, &[Var])>,
) -> Result<PsvTensor> {
    check_scale(scale)?;
    if planes.is_empty() {
        return Err(Error::invalid("plane sweep needs at least one depth plane"));
    }
    let (h, w) = same_size(views)?;
    let shape = tape.shape(images).to_vec();
    if shape.len() != 4 || shape[0] != views.len() || shape[2] != h || shape[3] != w {
        return Err(Error::ShapeMismatch {
            op: "build_psv images",
            expected: vec![views.len(), shape.get(1).copied().unwrap_or(0), h, w],
            got: shape,
        });
    }
    let feats = match pre_conv {
        Some((conv, params)) => conv.forward(tape, params, images)?,
        None => images,
    };
    let c1 = tape.shape(feats)[1];
    let (oh, ow) = scaled_size(reference.height, reference.width, scale);
    let rel: Vec<Camera> = views.iter().map(|c| c.relative_to(reference)).collect();
    let normal = planes.normal();
    let mut jobs = Vec::with_capacity(planes.len() * rel.len());
    for (d, &a) in planes.distances().iter().enumerate() {
        for (v, cam) in rel.iter().enumerate() {
            let hom = plane_homography(cam, &reference.intrinsics, a, &normal)?;
            jobs.push(WarpJob {
                src_n: v,
                dst_n: d,
                dst_c: v * c1,
                plan: Arc::new(forward_plan(h, w, oh, ow, &hom, scale)),
            });
        }
    }
    let data = tape.warp(feats, Arc::new(jobs), planes.len(), rel.len() * c1)?;
    Ok(PsvTensor {
        data,
        depth_planes: planes.clone(),
        reference: *reference,
        views: rel,
        channels: c1,
        scale,
    })
}

/// Projected multiplane tensor: `R x (D * C) x H x W`, plane-major channels.
#[derive(Clone, Debug)]
pub struct ProjectedTensor {
    pub data: Var,
    pub depth: usize,
    pub channels: usize,
    pub render_views: Vec<Camera>,
}

fn projection_homographies(
    render: &Camera,
    reference: &Camera,
    planes: &DepthPlaneSet,
) -> Result<Vec<Homography>> {
    let cam = render.relative_to(reference);
    let normal = planes.normal();
    planes
        .distances()
        .iter()
        .map(|&a| plane_homography(&cam, &reference.intrinsics, a, &normal)?.inverse())
        .collect()
}

/// Backward-warps every depth slice of `y` (`D x C x sH x sW` on the grid of
/// `reference` at `scale`) into each render view: `Z_rd = W(Y_d, G_rd^-1, 1/s)`.
pub fn project_multiplane<T: Real>(
    tape: &mut Tape<T>,
    y: Var,
    render_views: &[Camera],
    reference: &Camera,
    planes: &DepthPlaneSet,
    scale: f64,
) -> Result<ProjectedTensor> {
    check_scale(scale)?;
    let (h, w) = same_size(render_views)?;
    let s = tape.shape(y).to_vec();
    let (sh, sw) = scaled_size(reference.height, reference.width, scale);
    if s.len() != 4 || s[0] != planes.len() || s[2] != sh || s[3] != sw {
        return Err(Error::ShapeMismatch {
            op: "project_multiplane",
            expected: vec![planes.len(), s.get(1).copied().unwrap_or(0), sh, sw],
            got: s,
        });
    }
    let c = s[1];
    let mut jobs = Vec::with_capacity(planes.len() * render_views.len());
    for (r, cam) in render_views.iter().enumerate() {
        for (d, g_inv) in projection_homographies(cam, reference, planes)?.iter().enumerate() {
            jobs.push(WarpJob {
                src_n: d,
                dst_n: r,
                dst_c: d * c,
                plan: Arc::new(backward_plan(sh, sw, h, w, g_inv, scale)),
            });
        }
    }
    let data = tape.warp(y, Arc::new(jobs), render_views.len(), planes.len() * c)?;
    Ok(ProjectedTensor {
        data,
        depth: planes.len(),
        channels: c,
        render_views: render_views.to_vec(),
    })
}

/// For each pixel of `render`, the number of depth planes whose backward
/// warp lands inside the reference grid (row-major `H x W`).
pub fn plane_coverage(
    render: &Camera,
    reference: &Camera,
    planes: &DepthPlaneSet,
    scale: f64,
) -> Result<Vec<usize>> {
    check_scale(scale)?;
    let (sh, sw) = scaled_size(reference.height, reference.width, scale);
    let mut count = vec![0usize; render.height * render.width];
    for g_inv in projection_homographies(render, reference, planes)? {
        let plan = backward_plan::<f64>(sh, sw, render.height, render.width, &g_inv, scale);
        for (c, &inside) in count.iter_mut().zip(&plan.inside) {
            *c += inside as usize;
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use nalgebra::Matrix3;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| 0.1 + 0.03 * i[2] as f64 + 0.05 * i[1] as f64 + 0.2 * i[0] as f64)
    }

    fn hom(m: [f64; 9]) -> Homography {
        Homography::new(Matrix3::from_row_slice(&m)).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let src = ramp(3, 5, 7);
        let out = warp_image(&src, &Homography::identity(), 1.0).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn shift_by_three_pixels() {
        let src = ramp(1, 8, 8);
        let out = warp_image(&src, &hom([1.0, 0.0, -3.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]), 1.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = if x < 3 { 0.0 } else { src.get(&[0, y, x - 3]) };
                assert!((out.get(&[0, y, x]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scale_two_upsamples_ramp() {
        let src = ramp(1, 6, 6);
        let out = warp_image(&src, &Homography::identity(), 2.0).unwrap();
        assert_eq!(out.shape(), &[1, 12, 12]);
        // interior: bilinear upsampling of an affine image is the affine image
        for y in 0..11 {
            for x in 0..11 {
                let want = 0.1 + 0.03 * x as f64 / 2.0 + 0.05 * y as f64 / 2.0;
                assert!((out.get(&[0, y, x]) - want).abs() < 1e-12, "{x},{y}");
            }
        }
    }

    #[test]
    fn grid_outside_source_gives_zeros() {
        let src = ramp(2, 4, 4);
        let out = warp_image(&src, &hom([1.0, 0.0, 100.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]), 1.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(warp_image(&src, &Homography::identity(), 0.0).is_err());
    }

    #[test]
    fn affine_images_warp_exactly_under_affine_maps() {
        let src = ramp(1, 16, 16);
        let h = hom([0.9, 0.1, 2.0, -0.05, 1.1, 1.5, 0.0, 0.0, 1.0]);
        let out = warp_image(&src, &h, 1.0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let (sx, sy) = h.apply(x as f64, y as f64).unwrap();
                if sx >= 0.0 && sy >= 0.0 && sx <= 15.0 && sy <= 15.0 {
                    let want = 0.1 + 0.03 * sx + 0.05 * sy;
                    assert!((out.get(&[0, y, x]) - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn warp_is_linear() {
        let a = ramp(2, 6, 6);
        let b = Tensor::from_fn(&[2, 6, 6], |i| ((i[1] * 7 + i[2] * 3) % 5) as f64 - 2.0);
        let h = hom([1.02, 0.03, -0.4, 0.01, 0.97, 0.6, 0.001, 0.0, 1.0]);
        let mix = a.zip_map(&b, |x, y| 2.0 * x - 0.5 * y).unwrap();
        let lhs = warp_image(&mix, &h, 1.25).unwrap();
        let wa = warp_image(&a, &h, 1.25).unwrap();
        let wb = warp_image(&b, &h, 1.25).unwrap();
        let rhs = wa.zip_map(&wb, |x, y| 2.0 * x - 0.5 * y).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    fn cam(t: [f64; 3], w: usize, h: usize) -> Camera {
        let k = CameraIntrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap();
        Camera::new(k, CameraPose::from_translation(t), w, h).unwrap()
    }

    #[test]
    fn psv_of_single_identity_view_is_the_image() {
        let c = cam([0.0; 3], 9, 7);
        let img = ramp(3, 7, 9);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(img.clone().reshape(&[1, 3, 7, 9]).unwrap());
        let planes = DepthPlaneSet::sample(1.0, 4.0, 1).unwrap();
        let psv = build_psv(&mut tape, x, &[c], &c, &planes, 1.0, None).unwrap();
        assert_eq!(psv.slice(&tape, 0, 0).unwrap(), img);
    }

    #[test]
    fn psv_shape_arithmetic() {
        let views = [cam([0.1, 0.0, 0.0], 20, 12), cam([0.0; 3], 20, 12), cam([-0.1, 0.0, 0.0], 20, 12)];
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[3, 5, 12, 20]));
        let planes = DepthPlaneSet::sample(1.0, 10.0, 4).unwrap();
        let psv = build_psv(&mut tape, x, &views, &views[1], &planes, 1.5, None).unwrap();
        assert_eq!(tape.shape(psv.data), &[4, 15, 18, 30]);
        assert!(build_psv(&mut tape, x, &views[..2], &views[1], &planes, 1.5, None).is_err());
    }

    #[test]
    fn projection_into_reference_is_identity() {
        let c = cam([0.0; 3], 8, 6);
        let planes = DepthPlaneSet::sample(1.0, 4.0, 3).unwrap();
        let y = Tensor::from_fn(&[3, 2, 6, 8], |i| (i[0] * 100 + i[1] * 10 + i[2] * 8 + i[3]) as f64);
        let mut tape = Tape::<f64>::new();
        let yv = tape.leaf(y.clone());
        let z = project_multiplane(&mut tape, yv, &[c], &c, &planes, 1.0).unwrap();
        assert_eq!(tape.value(z.data).data(), y.data());
        assert_eq!(plane_coverage(&c, &c, &planes, 1.0).unwrap(), vec![3; 48]);
    }

    #[test]
    fn backward_warp_undoes_forward_warp() {
        let src = Tensor::from_fn(&[1, 32, 32], |i| {
            let (x, y) = (i[2] as f64, i[1] as f64);
            0.5 + 0.3 * (x / 9.0).sin() * (y / 11.0).cos()
        });
        let h = hom([1.01, 0.02, 0.7, -0.01, 0.99, -0.4, 0.0005, 0.0002, 1.0]);
        let up = warp_image(&src, &h, 1.25).unwrap();
        let back = backward_warp(&up, &h.inverse().unwrap(), 1.25, 32, 32).unwrap();
        let mut err = 0.0f64;
        for y in 8..24 {
            for x in 8..24 {
                err = err.max((back.get(&[0, y, x]) - src.get(&[0, y, x])).abs());
            }
        }
        assert!(err < 5e-3, "{err}");
    }
}
