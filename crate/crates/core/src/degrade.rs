//! Synthetic degradation: Gaussian blur, block-average downsampling,
//! Gaussian noise, an 8×8 DCT JPEG round-trip and nearest-neighbour
//! upsampling back to the input resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::DegradationRanges;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Standard JPEG luminance quantization table (row-major, natural order).
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationParams {
    pub sigma: f64,
    pub r: usize,
    pub delta: f64,
    pub q: u32,
}

impl DegradationParams {
    /// Draws parameters from the default ranges for an image of side `size`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        DegradationRanges::default().sample(rng, size)
    }
}

impl DegradationRanges {
    /// `sigma` and `delta` are uniform reals; `r` is uniform over the
    /// integers in `[1, r_max]` for which `size / r` is still a multiple of
    /// 8; `q` is a uniform integer.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> DegradationParams {
        let factors: Vec<usize> = (1..=self.r_max.max(1))
            .filter(|r| size % r == 0 && (size / r) % 8 == 0)
            .collect();
        let sigma = rng.gen_range(self.sigma_min..=self.sigma_max);
        let r = if factors.is_empty() { 1 } else { factors[rng.gen_range(0..factors.len())] };
        let delta = rng.gen_range(self.delta_min..=self.delta_max);
        let q = rng.gen_range(self.q_min..=self.q_max);
        DegradationParams { sigma, r, delta, q }
    }
}

fn hwc(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Shape(format!("expected H×W×C image, got {s:?}"))),
    }
}

/// Symmetric reflection without repeating the edge sample (`d c b | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Sampled 1-D Gaussian of radius `ceil(3 sigma)`, normalized to sum 1.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> =
        (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

/// Separable Gaussian blur with reflect padding. `sigma = 0` is the identity.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Argument(format!("blur sigma must be ≥ 0, got {sigma}")));
    }
    let (h, w, c) = hwc(image)?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let taps = gaussian_kernel_1d(sigma);
    let radius = (taps.len() / 2) as isize;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &k) in taps.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - radius, w);
                    acc += k * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &k) in taps.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - radius, h);
                    acc += k * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// r×r block averaging.
pub fn resample_down(image: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(image)?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Argument(format!("extents {h}×{w} not divisible by factor {r}")));
    }
    if r == 1 {
        return Ok(image.clone());
    }
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![0.0; ho * wo * c];
    let inv = 1.0 / (r * r) as f64;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[((y / r) * wo + x / r) * c + ch] += image.data()[(y * w + x) * c + ch] * inv;
            }
        }
    }
    Tensor::new(&[ho, wo, c], out)
}

/// Nearest-neighbour replication by factor `r`.
pub fn resample_up(image: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(image)?;
    if r == 0 {
        return Err(Error::Argument("resampling factor must be at least 1".into()));
    }
    if r == 1 {
        return Ok(image.clone());
    }
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..ho {
        for x in 0..wo {
            let src = ((y / r) * w + x / r) * c;
            out[(y * wo + x) * c..(y * wo + x + 1) * c].copy_from_slice(&image.data()[src..src + c]);
        }
    }
    Tensor::new(&[ho, wo, c], out)
}

/// Adds i.i.d. zero-mean Gaussian noise of standard deviation `delta / 255`
/// and clamps to `[0, 1]`.
pub fn add_noise(image: &Tensor, delta: f64, seed: u64) -> Result<Tensor> {
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::Argument(format!("noise level must be ≥ 0, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, delta / 255.0).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(image.map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)))
}

/// Luminance table scaled for quality `q`, entries clamped to at least 1.
pub fn scaled_quant_table(q: u32) -> Result<[u16; 64]> {
    if !(1..=100).contains(&q) {
        return Err(Error::Argument(format!("JPEG quality {q} outside [1, 100]")));
    }
    let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
    Ok(LUMA_QUANT.map(|e| ((e as u32 * s + 50) / 100).max(1) as u16))
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

/// Grayscale JPEG round-trip without entropy coding: level shift, 8×8
/// orthonormal DCT-II, quantize/dequantize, inverse DCT, clamp.
pub fn jpeg_roundtrip(image: &Tensor, q: u32) -> Result<Tensor> {
    let (h, w, c) = hwc(image)?;
    if c != 1 {
        return Err(Error::Shape(format!("JPEG round-trip is single-channel, got {c} channels")));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Argument(format!("extents {h}×{w} not divisible by 8")));
    }
    let table = scaled_quant_table(q)?;
    let basis = dct_basis();
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = src[(by + y) * w + bx + x] * 255.0 - 128.0;
                }
            }
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            acc += basis[u][y] * basis[v][x] * block[y][x];
                        }
                    }
                    let step = table[u * 8 + v] as f64;
                    coef[u][v] = (acc / step).round() * step;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let mut acc = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            acc += basis[u][y] * basis[v][x] * coef[u][v];
                        }
                    }
                    out[(by + y) * w + bx + x] = ((acc + 128.0) / 255.0).clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// blur → downsample → noise → JPEG → upsample. Output extents equal input.
pub fn degrade(image: &Tensor, params: &DegradationParams, seed: u64) -> Result<Tensor> {
    let (h, w, _) = hwc(image)?;
    let r = params.r;
    if r == 0 || h % r != 0 || w % r != 0 || (h / r) % 8 != 0 || (w / r) % 8 != 0 {
        return Err(Error::Argument(format!(
            "extents {h}×{w} incompatible with factor {r} and 8×8 JPEG blocks"
        )));
    }
    let blurred = gaussian_blur(image, params.sigma)?;
    let small = resample_down(&blurred, r)?;
    let noisy = add_noise(&small, params.delta, seed)?;
    let coded = jpeg_roundtrip(&noisy, params.q)?;
    resample_up(&coded, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Tensor {
        let data = (0..n * n).map(|i| ((i / n) * 7 + (i % n) * 3) as f64 % 17.0 / 16.0).collect();
        Tensor::new(&[n, n, 1], data).unwrap()
    }

    #[test]
    fn blur_identity_and_constants() {
        let x = ramp(16);
        assert_eq!(gaussian_blur(&x, 0.0).unwrap(), x);
        let c = Tensor::full(&[16, 16, 1], 0.3);
        assert!(gaussian_blur(&c, 2.5).unwrap().max_abs_diff(&c) < 1e-14);
        assert!(gaussian_blur(&x, -1.0).is_err());
    }

    #[test]
    fn blur_of_impulse_is_the_sampled_kernel() {
        let n = 15;
        let mut x = Tensor::zeros(&[n, n, 1]);
        x.data_mut()[7 * n + 7] = 1.0;
        let out = gaussian_blur(&x, 1.0).unwrap();
        let mut z = 0.0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                z += (-((dx * dx + dy * dy) as f64) / 2.0).exp();
            }
        }
        for y in 0..n {
            for xx in 0..n {
                let (dy, dx) = (y as i32 - 7, xx as i32 - 7);
                let expect = if dy.abs() <= 3 && dx.abs() <= 3 {
                    (-((dx * dx + dy * dy) as f64) / 2.0).exp() / z
                } else {
                    0.0
                };
                assert!((out.data()[y * n + xx] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn resample_examples() {
        let x = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let d = resample_down(&x, 2).unwrap();
        assert_eq!(d.shape(), &[1, 1, 1]);
        assert_eq!(d.data(), &[0.5]);
        assert_eq!(resample_up(&d, 2).unwrap().data(), &[0.5; 4]);
        let r = ramp(8);
        assert_eq!(resample_down(&r, 1).unwrap(), r);
        assert_eq!(resample_up(&r, 1).unwrap(), r);
        let c = Tensor::full(&[8, 8, 1], 0.25);
        assert_eq!(resample_down(&c, 4).unwrap().data(), &[0.25; 4]);
        assert!(resample_down(&r, 3).is_err());
    }

    #[test]
    fn noise_examples() {
        let c = Tensor::full(&[64, 64, 1], 0.5);
        assert_eq!(add_noise(&c, 0.0, 1).unwrap(), c);
        let a = add_noise(&c, 20.0, 9).unwrap();
        assert_eq!(a, add_noise(&c, 20.0, 9).unwrap());
        let diffs: Vec<f64> = a.data().iter().map(|v| v - 0.5).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        let target = 20.0 / 255.0;
        assert!((sd - target).abs() <= 0.15 * target, "sd {sd}");
    }

    #[test]
    fn quant_table_scaling() {
        assert_eq!(scaled_quant_table(50).unwrap(), LUMA_QUANT);
        let t10 = scaled_quant_table(10).unwrap();
        assert_eq!(t10[0], ((16 * 500 + 50) / 100) as u16);
        assert!(scaled_quant_table(100).unwrap().iter().all(|&e| e == 1));
        assert!(scaled_quant_table(0).is_err());
        assert!(scaled_quant_table(101).is_err());
    }

    #[test]
    fn jpeg_examples() {
        // At q = 50 the DC step (16) divides the level-shifted DC value of
        // black (-1024), so the round trip is exact.
        let z = Tensor::zeros(&[16, 16, 1]);
        assert_eq!(jpeg_roundtrip(&z, 50).unwrap(), z);
        let c = Tensor::full(&[16, 16, 1], 0.5);
        assert!(jpeg_roundtrip(&c, 90).unwrap().max_abs_diff(&c) <= 0.01);
        assert!(jpeg_roundtrip(&Tensor::zeros(&[12, 16, 1]), 50).is_err());
        assert!(jpeg_roundtrip(&Tensor::zeros(&[8, 8, 2]), 50).is_err());
    }

    #[test]
    fn degrade_shape_and_determinism() {
        let x = ramp(32);
        for r in [1, 2, 4] {
            let p = DegradationParams { sigma: 1.0, r, delta: 5.0, q: 60 };
            let a = degrade(&x, &p, 11).unwrap();
            assert_eq!(a.shape(), x.shape());
            assert_eq!(a, degrade(&x, &p, 11).unwrap());
        }
        let bad = DegradationParams { sigma: 1.0, r: 3, delta: 0.0, q: 60 };
        assert!(degrade(&x, &bad, 0).is_err());
    }

    #[test]
    fn sampled_params_respect_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = DegradationParams::sample(&mut rng, 32);
            assert!((1.0..=4.0).contains(&p.sigma));
            assert!([1, 2, 4].contains(&p.r));
            assert!((0.0..=20.0).contains(&p.delta));
            assert!((30..=90).contains(&p.q));
        }
    }
}
