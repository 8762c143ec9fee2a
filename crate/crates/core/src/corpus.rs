//! Procedural HQ corpus whose intrinsic quality varies through a
//! right-skewed intrinsic blur.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::config::CorpusSpec;
use crate::degrade::gaussian_blur;
use crate::error::{Error, Result};
use crate::image::{quantize_to_u8_grid, read_pgm, write_pgm};
use crate::numeric::Tensor;
use crate::quality::proxy_scores;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusImage {
    pub id: String,
    pub image: Tensor,
    pub sigma_gt: f64,
    pub seed: u64,
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

/// Layers of one synthetic scene before intrinsic blur.
struct Scene {
    /// Smooth radial gradient.
    shading: Vec<f64>,
    /// 1–3 filled ellipses.
    shapes: Vec<f64>,
    /// Sinusoidal texture patch.
    texture: Vec<f64>,
}

fn compose_scene(rng: &mut ChaCha8Rng, size: usize) -> Scene {
    let n = size as f64;
    let (cx, cy) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
    let shading = (0..size * size)
        .map(|i| (((i % size) as f64 - cx).powi(2) + ((i / size) as f64 - cy).powi(2)).sqrt() / n)
        .collect();

    let mut shapes = vec![0.0; size * size];
    let ellipses = rng.gen_range(1..=3);
    for _ in 0..ellipses {
        let (ex, ey) = (rng.gen_range(4.0..n - 4.0), rng.gen_range(4.0..n - 4.0));
        let (ra, rb) = (rng.gen_range(4.0..9.0), rng.gen_range(4.0..9.0));
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let value = rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (s, c) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - ex, y as f64 - ey);
                let u = (c * dx + s * dy) / ra;
                let v = (-s * dx + c * dy) / rb;
                if u * u + v * v <= 1.0 {
                    shapes[y * size + x] = value;
                }
            }
        }
    }

    let pw = rng.gen_range(8..=16).min(size);
    let ph = rng.gen_range(8..=16).min(size);
    let (px0, py0) = (rng.gen_range(0..=size - pw), rng.gen_range(0..=size - ph));
    let period = rng.gen_range(3.0..6.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (fx, fy) = (angle.cos() / period, angle.sin() / period);
    let mut texture = vec![0.0; size * size];
    for y in py0..py0 + ph {
        for x in px0..px0 + pw {
            let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase;
            texture[y * size + x] = t.sin();
        }
    }
    Scene { shading, shapes, texture }
}

/// Raw proxy values every unblurred scene is brought to.
const SCENE_TARGET: [f64; 3] = [0.3, 0.14, 0.07];
const SCENE_MEAN: f64 = 0.5;
const BALANCE_START: [f64; 3] = [0.3, 0.3, 0.15];
const BALANCE_ITERATIONS: usize = 30;
const BALANCE_TOLERANCE: f64 = 0.02;
/// Layouts drawn before giving up on balancing and keeping the last one.
const LAYOUT_ATTEMPTS: usize = 16;

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    if d.abs() < 1e-12 {
        return None;
    }
    Some(std::array::from_fn(|c| {
        let mut mc = m;
        for row in 0..3 {
            mc[row][c] = r[row];
        }
        det(mc) / d
    }))
}

/// Mixes the layers as `0.5 + g·shading + k·shapes + t·texture`, with the
/// weights fitted by damped Newton iterations so the unblurred scene hits
/// [`SCENE_TARGET`] on all three proxies. Intrinsic blur, not how busy the
/// random layout happens to be, then decides quality. Returns `None` when
/// the layout cannot be balanced to within 2%.
fn balance(scene: &Scene, size: usize) -> Result<Option<Tensor>> {
    let layers = [centered(&scene.shading), centered(&scene.shapes), centered(&scene.texture)];
    let mix = |w: [f64; 3]| -> Result<Tensor> {
        let px = (0..size * size).map(|i| SCENE_MEAN + (0..3).map(|l| w[l] * layers[l][i]).sum::<f64>()).collect();
        Tensor::new(&[size, size, 1], px)
    };
    let mut w = BALANCE_START;
    for _ in 0..BALANCE_ITERATIONS {
        let p = proxy_scores(&mix(w)?)?;
        let r: [f64; 3] = std::array::from_fn(|i| SCENE_TARGET[i] - p[i]);
        if r.iter().all(|v| v.abs() < 1e-6) {
            break;
        }
        let mut jac = [[0.0; 3]; 3];
        for l in 0..3 {
            let mut wl = w;
            wl[l] += 1e-4;
            let pl = proxy_scores(&mix(wl)?)?;
            for i in 0..3 {
                jac[i][l] = (pl[i] - p[i]) / 1e-4;
            }
        }
        let Some(step) = solve3(jac, r) else { break };
        for l in 0..3 {
            w[l] = (w[l] + 0.7 * step[l]).max(0.0);
        }
    }
    let img = mix(w)?.map(|v| v.clamp(0.0, 1.0));
    let p = proxy_scores(&img)?;
    let ok = (0..3).all(|i| (p[i] - SCENE_TARGET[i]).abs() <= BALANCE_TOLERANCE * SCENE_TARGET[i]);
    Ok(ok.then_some(img))
}

/// Draws the intrinsic blur: zero with probability `sharp_fraction`,
/// otherwise log-normal around `blur_median`.
fn draw_sigma(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> Result<f64> {
    if rng.gen_bool(spec.sharp_fraction.clamp(0.0, 1.0)) {
        return Ok(0.0);
    }
    let dist = LogNormal::new(spec.blur_median.ln(), spec.blur_spread)
        .map_err(|e| Error::Argument(format!("blur distribution: {e}")))?;
    Ok(dist.sample(rng).min(6.0))
}

/// Generates image `index` of the corpus from its own seed `spec.seed + index`.
pub fn gen_image(spec: &CorpusSpec, index: usize) -> Result<CorpusImage> {
    let seed = spec.seed.wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        img = balance(&compose_scene(&mut rng, spec.size), spec.size)?;
        if img.is_some() {
            break;
        }
    }
    let img = match img {
        Some(img) => img,
        None => return Err(Error::Argument(format!("no balanced layout for image {index}"))),
    };
    let sigma_gt = draw_sigma(&mut rng, spec)?;
    let blurred = gaussian_blur(&img, sigma_gt)?;
    Ok(CorpusImage { id: image_id(index), image: quantize_to_u8_grid(&blurred), sigma_gt, seed })
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusImage>> {
    if spec.count < 64 {
        return Err(Error::Argument(format!("corpus count {} below the minimum of 64", spec.count)));
    }
    if spec.size < 16 || spec.size % 8 != 0 {
        return Err(Error::Argument(format!("image size {} must be a multiple of 8, at least 16", spec.size)));
    }
    (0..spec.count).map(|i| gen_image(spec, i)).collect()
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes `<id>.pgm` files plus `manifest.csv` (image_id, sigma_gt, seed).
pub fn write_corpus(dir: &Path, images: &[CorpusImage]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("image_id,sigma_gt,seed\n");
    for im in images {
        write_pgm(&dir.join(format!("{}.pgm", im.id)), &im.image)?;
        writeln!(manifest, "{},{},{}", im.id, im.sigma_gt, im.seed).expect("write to string");
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads the images listed in a directory's manifest, in manifest order.
/// Returns `(id, image)` pairs.
pub fn read_image_dir(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = manifest.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?;
    if !header.starts_with("image_id") {
        return Err(Error::Format(format!("manifest header {header:?} lacks image_id")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let id = l.split(',').next().unwrap_or("").to_string();
            let img = read_pgm(&dir.join(format!("{id}.pgm")))?;
            Ok((id, img))
        })
        .collect()
}
