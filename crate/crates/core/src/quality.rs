//! Differentiable no-reference quality proxies and the score pipeline built
//! on them: corpus min/max normalization, ensemble mean and integer binning.
//!
//! Three proxies enter the ensemble:
//!
//! 1. mean Sobel gradient magnitude (sharpness),
//! 2. pixel standard deviation (contrast),
//! 3. mean absolute 4-neighbour Laplacian response (high-frequency energy).
//!
//! A fourth, held-out proxy (mean absolute difference-of-Gaussians response)
//! is never used for training; it judges whether optimizing the ensemble
//! games the proxies. All convolutions are unpadded so every proxy is
//! invariant to mirroring and to permuting channels.

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

pub const NUM_PROXIES: usize = 3;

/// Added to the min/max range so a degenerate corpus does not divide by zero.
pub const NORMALIZE_EPS: f64 = 0.00001;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// Widths of the two Gaussians in the held-out difference-of-Gaussians judge.
pub const DOG_SIGMAS: (f64, f64) = (0.6, 1.5);

/// Largest `f64` strictly below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Depthwise k×k kernel expressed as a dense k×k×C×C convolution kernel.
fn depthwise(weights: &[f64], k: usize, channels: usize) -> Tensor {
    let mut data = vec![0.0; k * k * channels * channels];
    for (tap, &w) in weights.iter().enumerate() {
        for c in 0..channels {
            data[tap * channels * channels + c * channels + c] = w;
        }
    }
    Tensor::new(&[k, k, channels, channels], data).expect("kernel shape")
}

fn channels_of(tape: &Tape, image: Var) -> Result<usize> {
    match tape.shape(image) {
        [h, w, c] if *h >= 5 && *w >= 5 => Ok(*c),
        s => Err(Error::Shape(format!("quality proxies need an H×W×C image with H, W ≥ 5, got {s:?}"))),
    }
}

fn filter(tape: &mut Tape, image: Var, weights: &[f64], k: usize) -> Result<Var> {
    let c = channels_of(tape, image)?;
    let kern = tape.constant(depthwise(weights, k, c));
    tape.conv2d(image, kern, 1, 0)
}

/// Records the three proxies for `image` on `tape`.
pub fn proxy_vars(tape: &mut Tape, image: Var) -> Result<[Var; NUM_PROXIES]> {
    let gx = filter(tape, image, &SOBEL_X, 3)?;
    let gy = filter(tape, image, &SOBEL_Y, 3)?;
    let gx2 = tape.square(gx);
    let gy2 = tape.square(gy);
    let sq = tape.add(gx2, gy2)?;
    let mag = tape.sqrt(sq);
    let sharpness = tape.mean(mag);

    let mu = tape.mean(image);
    let neg_mu = tape.scale(mu, -1.0);
    let centered = tape.add_scalar_var(image, neg_mu)?;
    let sq = tape.square(centered);
    let var = tape.mean(sq);
    let contrast = tape.sqrt(var);

    let lap = filter(tape, image, &LAPLACIAN, 3)?;
    let lap_abs = tape.abs(lap);
    let energy = tape.mean(lap_abs);

    Ok([sharpness, contrast, energy])
}

/// Raw proxy triple `(sharpness, contrast, high-frequency energy)`.
pub fn proxy_scores(image: &Tensor) -> Result<[f64; NUM_PROXIES]> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let vars = proxy_vars(&mut tape, x)?;
    Ok(vars.map(|v| tape.value(v).item()))
}

fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut taps = Vec::with_capacity((2 * radius + 1).pow(2));
    for y in -r..=r {
        for x in -r..=r {
            taps.push((-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let z: f64 = taps.iter().sum();
    taps.iter().map(|t| t / z).collect()
}

/// 5×5 difference-of-Gaussians taps, each Gaussian normalized to sum 1.
pub fn dog_kernel() -> Vec<f64> {
    let narrow = gaussian_taps(DOG_SIGMAS.0, 2);
    let wide = gaussian_taps(DOG_SIGMAS.1, 2);
    narrow.iter().zip(&wide).map(|(a, b)| a - b).collect()
}

/// Records the held-out judge on `tape`.
pub fn holdout_var(tape: &mut Tape, image: Var) -> Result<Var> {
    let resp = filter(tape, image, &dog_kernel(), 5)?;
    let abs = tape.abs(resp);
    Ok(tape.mean(abs))
}

/// Held-out judge: mean absolute difference-of-Gaussians response.
pub fn holdout_score(image: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let v = holdout_var(&mut tape, x)?;
    Ok(tape.value(v).item())
}

/// Per-proxy `(min, max)` statistics fitted once over a reference corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusNormalizer {
    pub min: [f64; NUM_PROXIES],
    pub max: [f64; NUM_PROXIES],
}

impl CorpusNormalizer {
    pub fn fit(raw: &[[f64; NUM_PROXIES]]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Argument("cannot fit a normalizer on an empty corpus".into()));
        }
        let mut min = [f64::INFINITY; NUM_PROXIES];
        let mut max = [f64::NEG_INFINITY; NUM_PROXIES];
        for r in raw {
            for p in 0..NUM_PROXIES {
                min[p] = min[p].min(r[p]);
                max[p] = max[p].max(r[p]);
            }
        }
        Ok(Self { min, max })
    }

    /// Unclamped affine map `(s - min) / (max - min + 1e-5)`.
    pub fn affine(&self, proxy: usize) -> (f64, f64) {
        let scale = 1.0 / (self.max[proxy] - self.min[proxy] + NORMALIZE_EPS);
        (scale, -self.min[proxy] * scale)
    }

    pub fn normalize(&self, proxy: usize, raw: f64) -> f64 {
        normalize(raw, self.min[proxy], self.max[proxy])
    }

    pub fn report(&self, raw: [f64; NUM_PROXIES]) -> QualityReport {
        let normalized = std::array::from_fn(|p| self.normalize(p, raw[p]));
        let s = normalized.iter().sum::<f64>() / NUM_PROXIES as f64;
        QualityReport { raw, normalized, ensemble: s, bin: bin_score(s) }
    }

    pub fn score(&self, image: &Tensor) -> Result<QualityReport> {
        Ok(self.report(proxy_scores(image)?))
    }

    /// Differentiable ensemble score of `image`, using the unclamped affine
    /// normalization so gradients survive outside the corpus range.
    pub fn ensemble_var(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let proxies = proxy_vars(tape, image)?;
        let mut acc: Option<Var> = None;
        for (p, v) in proxies.into_iter().enumerate() {
            let (scale, offset) = self.affine(p);
            let scaled = tape.scale(v, scale / NUM_PROXIES as f64);
            let term = tape.add_const(scaled, offset / NUM_PROXIES as f64);
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok(acc.expect("at least one proxy"))
    }

    /// Value of [`Self::ensemble_var`] without recording gradients.
    pub fn ensemble_objective(&self, image: &Tensor) -> Result<f64> {
        let raw = proxy_scores(image)?;
        Ok((0..NUM_PROXIES)
            .map(|p| {
                let (scale, offset) = self.affine(p);
                raw[p] * scale + offset
            })
            .sum::<f64>()
            / NUM_PROXIES as f64)
    }
}

/// `(raw - min) / (max - min + 1e-5)`, clamped into `[0, 1)`.
pub fn normalize(raw: f64, min: f64, max: f64) -> f64 {
    ((raw - min) / (max - min + NORMALIZE_EPS)).clamp(0.0, BELOW_ONE)
}

/// Arithmetic mean of normalized scores.
pub fn ensemble(normalized: &[f64]) -> Result<f64> {
    if normalized.is_empty() {
        return Err(Error::Argument("ensemble of an empty score list".into()));
    }
    Ok(normalized.iter().sum::<f64>() / normalized.len() as f64)
}

/// `clamp(floor(10 * s), 0, 9)`.
pub fn bin_score(s: f64) -> usize {
    (10.0 * s).floor().clamp(0.0, 9.0) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub raw: [f64; NUM_PROXIES],
    pub normalized: [f64; NUM_PROXIES],
    pub ensemble: f64,
    pub bin: usize,
}
