//! Plain-text PGM (P2) image I/O for single-channel images in `[0, 1]`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Renders an H×W×1 image as plain PGM with maxval 255.
pub fn to_pgm(image: &Tensor) -> Result<String> {
    let (h, w) = match image.shape() {
        [h, w, 1] => (*h, *w),
        s => return Err(Error::Shape(format!("PGM needs H×W×1, got {s:?}"))),
    };
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in image.data().chunks(w) {
        let line: Vec<String> = row.iter().map(|&v| quantize_u8(v).to_string()).collect();
        writeln!(out, "{}", line.join(" ")).expect("write to string");
    }
    Ok(out)
}

fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses plain PGM into an H×W×1 image scaled to `[0, 1]`.
pub fn from_pgm(text: &str) -> Result<Tensor> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::Format("missing P2 magic".into()));
    }
    let mut next_num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Format(format!("truncated PGM: missing {what}")))?
            .parse::<usize>()
            .map_err(|e| Error::Format(format!("bad {what}: {e}")))
    };
    let w = next_num("width")?;
    let h = next_num("height")?;
    let maxval = next_num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("maxval {maxval} out of range")));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let v = next_num("pixel")?;
        if v > maxval {
            return Err(Error::Format(format!("pixel {v} exceeds maxval {maxval}")));
        }
        data.push(v as f64 / maxval as f64);
    }
    Tensor::new(&[h, w, 1], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    from_pgm(&std::fs::read_to_string(path)?)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, to_pgm(image)?)?;
    Ok(())
}

/// Rounds an image to the 8-bit grid PGM files can represent.
pub fn quantize_to_u8_grid(image: &Tensor) -> Tensor {
    image.map(|v| quantize_u8(v) as f64 / 255.0)
}
