//! PSNR and SSIM on `C x H x W` images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    match *a.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!("metrics expect C x H x W, got {:?}", a.shape()))),
    }
}

/// `10 log10(peak^2 / MSE)` over the image with `crop` pixels removed from
/// each border; [`PSNR_CAP`] when the region matches exactly.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64, crop: usize) -> Result<f64> {
    let (c, h, w) = dims(a, b)?;
    if 2 * crop >= h || 2 * crop >= w {
        return Err(Error::invalid(format!("crop {crop} leaves nothing of {w}x{h}")));
    }
    let (x, y) = (a.data(), b.data());
    let mut sum = 0.0;
    for ch in 0..c {
        for r in crop..h - crop {
            let row = (ch * h + r) * w;
            for col in crop..w - crop {
                let d = x[row + col].to_f64() - y[row + col].to_f64();
                sum += d * d;
            }
        }
    }
    let mse = sum / (c * (h - 2 * crop) * (w - 2 * crop)) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|i| g[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

fn gray<T: Real>(t: &Tensor<T>, c: usize, hw: usize) -> Vec<f64> {
    let x = t.data();
    (0..hw)
        .map(|p| (0..c).map(|ch| x[ch * hw + p].to_f64()).sum::<f64>() / c as f64)
        .collect()
}

/// Mean SSIM over valid 11x11 Gaussian windows of the channel-mean images,
/// dynamic range 1.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = dims(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let (x, y) = (gray(a, c, h * w), gray(b, c, h * w));
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, h, w, &g);
    let mu_y = filter_valid(&y, h, w, &g);
    let xx = filter_valid(&prod(&x, &x), h, w, &g);
    let yy = filter_valid(&prod(&y, &y), h, w, &g);
    let xy = filter_valid(&prod(&x, &y), h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-view scores and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub crop: usize,
}

impl MetricReport {
    /// Scores `pred[i]` against `target[i]` with `crop` border pixels removed
    /// for both metrics.
    pub fn compute<T: Real>(pred: &[Tensor<T>], target: &[Tensor<T>], crop: usize) -> Result<Self> {
        if pred.len() != target.len() || pred.is_empty() {
            return Err(Error::invalid(format!(
                "{} predictions for {} targets",
                pred.len(),
                target.len()
            )));
        }
        let mut views = Vec::with_capacity(pred.len());
        for (i, (p, t)) in pred.iter().zip(target).enumerate() {
            let (pc, tc) = (crop_border(p, crop)?, crop_border(t, crop)?);
            views.push(ViewMetrics {
                view: i,
                psnr: psnr(&pc, &tc, 1.0, 0)?,
                ssim: ssim(&pc, &tc)?,
            });
        }
        let n = views.len() as f64;
        Ok(MetricReport {
            mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            views,
            crop,
        })
    }

    /// One JSON object per view followed by a summary object.
    pub fn to_json_lines(&self, label: &str) -> String {
        let mut out = String::new();
        for v in &self.views {
            let rec = serde_json::json!({"label": label, "view": v.view, "psnr": v.psnr, "ssim": v.ssim});
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "label": label,
            "summary": true,
            "views": self.views.len(),
            "crop": self.crop,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Removes `crop` pixels from every border of a `C x H x W` image.
pub fn crop_border<T: Real>(t: &Tensor<T>, crop: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 3 || 2 * crop >= s[1] || 2 * crop >= s[2] {
        return Err(Error::invalid(format!("cannot crop {crop} px from {s:?}")));
    }
    t.narrow(1, crop, s[1] - 2 * crop)?.narrow(2, crop, s[2] - 2 * crop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn psnr_of_known_mse() {
        let a = Tensor::<f64>::zeros(&[1, 4, 4]);
        let b = Tensor::<f64>::full(&[1, 4, 4], 0.1);
        assert!((psnr(&a, &b, 1.0, 0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0, 0).unwrap(), PSNR_CAP);
        assert_eq!(psnr(&a, &b, 1.0, 0).unwrap(), psnr(&b, &a, 1.0, 0).unwrap());
    }

    #[test]
    fn psnr_crop_region() {
        let a = Tensor::<f32>::zeros(&[3, 480, 800]);
        let mut b = a.clone();
        // errors only on the border band are ignored by a 16 px crop
        for c in 0..3 {
            for x in 0..800 {
                b.set(&[c, 0, x], 1.0);
                b.set(&[c, 479, x], 1.0);
            }
        }
        assert_eq!(psnr(&a, &b, 1.0, 16).unwrap(), PSNR_CAP);
        assert_eq!(crop_border(&a, 16).unwrap().shape(), &[3, 448, 768]);
        assert!(psnr(&a, &Tensor::zeros(&[3, 480, 801]), 1.0, 0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let clean = Tensor::<f64>::from_fn(&[1, 32, 32], |_| rng.gen_range(0.0..1.0));
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = crate::noise::add_noise(&clean, &crate::noise::NoiseParams::new(sigma, 0.0).unwrap(), 5);
            let p = psnr(&clean, &noisy, 1.0, 0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = Tensor::<f64>::from_fn(&[3, 16, 16], |i| ((i[1] * 5 + i[2] * 3) % 7) as f64 / 7.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let zero = Tensor::<f64>::zeros(&[1, 11, 11]);
        let one = Tensor::<f64>::ones(&[1, 11, 11]);
        let s = ssim(&zero, &one).unwrap();
        assert!((s - 1e-4 / (1.0 + 1e-4)).abs() < 1e-9, "{s}");
        assert!(ssim(&Tensor::<f64>::zeros(&[1, 10, 20]), &Tensor::zeros(&[1, 10, 20])).is_err());
    }

    #[test]
    fn anticorrelated_ramps_are_negative() {
        let a = Tensor::<f64>::from_fn(&[1, 16, 16], |i| 0.5 + 0.02 * i[2] as f64);
        let b = Tensor::<f64>::from_fn(&[1, 16, 16], |i| 0.5 - 0.02 * i[2] as f64);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_bounded_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let a = Tensor::<f64>::from_fn(&[1, 11, 11], |_| rng.gen_range(-1.0..2.0));
            let b = Tensor::<f64>::from_fn(&[1, 11, 11], |_| rng.gen_range(-1.0..2.0));
            let s = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s), "{s}");
        }
    }

    #[test]
    fn report_json_lines() {
        let a = Tensor::<f32>::zeros(&[3, 12, 12]);
        let r = MetricReport::compute(&[a.clone(), a.clone()], &[a.clone(), a], 0).unwrap();
        assert_eq!(r.mean_psnr, PSNR_CAP);
        let text = r.to_json_lines("x");
        assert_eq!(text.lines().count(), 3);
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last["summary"], true);
    }
}
