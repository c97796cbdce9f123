//! Signal-dependent Gaussian noise, `I ~ N(I*, sigma_r^2 + sigma_s * I*)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Gains with tabulated `(log10 sigma_r, log10 sigma_s)`.
pub const TABLE_GAINS: [u32; 4] = [4, 8, 16, 20];
/// Every accepted gain.
pub const SUPPORTED_GAINS: [u32; 6] = [1, 2, 4, 8, 16, 20];

const LOG_TABLE: [(u32, f64, f64); 4] = [(4, -1.44, -1.84), (8, -1.08, -1.48), (16, -0.72, -1.12), (20, -0.6, -1.0)];

/// Per-doubling increase of both log parameters across the table; used to
/// extend it to gains 1 and 2.
const LOG_STEP_PER_DOUBLING: f64 = 0.36;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub sigma_r: f64,
    pub sigma_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<u32>,
}

impl NoiseParams {
    pub fn new(sigma_r: f64, sigma_s: f64) -> Result<Self> {
        if !(sigma_r >= 0.0 && sigma_s >= 0.0) || !sigma_r.is_finite() || !sigma_s.is_finite() {
            return Err(Error::invalid(format!(
                "noise parameters must be non-negative, got sigma_r={sigma_r} sigma_s={sigma_s}"
            )));
        }
        Ok(NoiseParams {
            sigma_r,
            sigma_s,
            gain: None,
        })
    }

    pub fn variance(&self, intensity: f64) -> f64 {
        self.sigma_r * self.sigma_r + self.sigma_s * intensity.max(0.0)
    }
}

/// `(log10 sigma_r, log10 sigma_s)` for a supported gain.
pub fn gain_log_params(gain: u32) -> Result<(f64, f64)> {
    if let Some(&(_, r, s)) = LOG_TABLE.iter().find(|(g, _, _)| *g == gain) {
        return Ok((r, s));
    }
    if gain == 1 || gain == 2 {
        let (_, r4, s4) = LOG_TABLE[0];
        let shift = LOG_STEP_PER_DOUBLING * (4.0 / gain as f64).log2();
        return Ok((r4 - shift, s4 - shift));
    }
    Err(Error::invalid(format!(
        "unsupported gain {gain}; expected one of {SUPPORTED_GAINS:?}"
    )))
}

pub fn gain_to_params(gain: u32) -> Result<NoiseParams> {
    let (lr, ls) = gain_log_params(gain)?;
    Ok(NoiseParams {
        sigma_r: 10f64.powf(lr),
        sigma_s: 10f64.powf(ls),
        gain: Some(gain),
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal sample keyed by `(seed, index)`; independent of the
/// order in which indices are visited.
pub fn normal_at(seed: u64, index: u64) -> f64 {
    let key = splitmix64(seed ^ splitmix64(index));
    let a = splitmix64(key);
    let b = splitmix64(key ^ 0xD1B5_4A32_D192_ED03);
    // 53-bit uniforms; u1 in (0, 1] keeps the log finite
    let u1 = ((a >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Noisy observation of `clean`; values are not clamped.
pub fn add_noise<T: Real>(clean: &Tensor<T>, params: &NoiseParams, seed: u64) -> Tensor<T> {
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = v.to_f64();
            let std = params.variance(x).sqrt();
            if std == 0.0 {
                v
            } else {
                T::from_f64(x + std * normal_at(seed, i as u64))
            }
        })
        .collect();
    Tensor::from_vec(clean.shape(), data).expect("same shape")
}

/// `1 x H x W` map of `sqrt(sigma_r^2 + sigma_s * max(I, 0))`, with `I` the
/// channel mean of the `C x H x W` observation.
pub fn sigma_map<T: Real>(image: &Tensor<T>, params: &NoiseParams) -> Result<Tensor<T>> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] if c > 0 => [c, h, w],
        _ => return Err(Error::invalid(format!("sigma_map expects C x H x W, got {:?}", image.shape()))),
    };
    let x = image.data();
    let hw = h * w;
    let data = (0..hw)
        .map(|p| {
            let mean = (0..c).map(|ch| x[ch * hw + p].to_f64()).sum::<f64>() / c as f64;
            T::from_f64(params.variance(mean).sqrt())
        })
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_twenty() {
        assert_eq!(gain_log_params(20).unwrap(), (-0.6, -1.0));
        let p = gain_to_params(20).unwrap();
        assert!((p.sigma_r - 0.251_188_643).abs() < 1e-8);
        assert!((p.sigma_s - 0.1).abs() < 1e-15);
    }

    #[test]
    fn gain_four() {
        let p = gain_to_params(4).unwrap();
        assert!((p.sigma_r - 0.036_307_805).abs() < 1e-8);
        assert!((p.sigma_s - 0.014_454_398).abs() < 1e-8);
        assert!(gain_to_params(3).is_err());
    }

    #[test]
    fn small_gains_extend_the_table() {
        let (r2, s2) = gain_log_params(2).unwrap();
        assert!((r2 + 1.80).abs() < 1e-12 && (s2 + 2.20).abs() < 1e-12);
        let (r1, _) = gain_log_params(1).unwrap();
        assert!((r1 + 2.16).abs() < 1e-12);
        // the doubling law also reproduces the tabulated gains
        for (g, r, _) in LOG_TABLE {
            let law = -1.44 + LOG_STEP_PER_DOUBLING * (g as f64 / 4.0).log2();
            assert!((law - r).abs() < 5e-3, "{g}");
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let clean = Tensor::<f32>::from_fn(&[3, 4, 4], |i| i[2] as f32 / 4.0);
        let p = NoiseParams::new(0.0, 0.0).unwrap();
        assert_eq!(add_noise(&clean, &p, 9), clean);
    }

    #[test]
    fn fixed_seed_is_bitwise_stable() {
        let clean = Tensor::<f32>::full(&[3, 8, 8], 0.5);
        let p = gain_to_params(8).unwrap();
        let a = add_noise(&clean, &p, 42);
        let b = add_noise(&clean, &p, 42);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&add_noise(&clean, &p, 43)));
    }

    #[test]
    fn half_gray_gain_four_variance() {
        let n = 1_000_000;
        let clean = Tensor::<f64>::full(&[n], 0.5);
        let p = gain_to_params(4).unwrap();
        let noisy = add_noise(&clean, &p, 1);
        let mean = noisy.mean();
        let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = 0.008_543;
        assert!((p.variance(0.5) - want).abs() < 1e-5);
        assert!((var - want).abs() < 0.02 * want, "{var}");
        assert!((mean - 0.5).abs() < 3.0 * want.sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn sigma_map_values() {
        let p = gain_to_params(20).unwrap();
        let zero = Tensor::<f64>::zeros(&[3, 2, 2]);
        let m = sigma_map(&zero, &p).unwrap();
        assert_eq!(m.shape(), &[1, 2, 2]);
        assert!((m.data()[0] - 0.251_188_643).abs() < 1e-8);
        let flat = NoiseParams::new(0.1, 0.0).unwrap();
        let ramp = Tensor::<f64>::from_fn(&[3, 1, 5], |i| i[2] as f64 - 1.0);
        assert!(sigma_map(&ramp, &flat).unwrap().data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let m = sigma_map(&ramp, &p).unwrap();
        assert!(m.data().windows(2).all(|w| w[1] >= w[0]));
    }
}
