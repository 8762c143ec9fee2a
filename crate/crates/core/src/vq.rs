//! Codebooks, nearest-entry quantization and dual-codebook fusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

pub const COMMON_SIZE: usize = 64;
pub const HQ_PLUS_SIZE: usize = 32;
pub const CODE_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodebookRole {
    Common,
    HqPlus,
}

impl CodebookRole {
    pub fn name(self) -> &'static str {
        match self {
            CodebookRole::Common => "common",
            CodebookRole::HqPlus => "hq_plus",
        }
    }
}

/// N×c matrix of code entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Tensor,
    pub role: CodebookRole,
}

impl Codebook {
    pub fn new(entries: Tensor, role: CodebookRole) -> Result<Self> {
        if entries.rank() != 2 {
            return Err(Error::Shape(format!("codebook must be N×c, got {:?}", entries.shape())));
        }
        if !entries.all_finite() {
            return Err(Error::Argument("codebook entries must be finite".into()));
        }
        Ok(Self { entries, role })
    }

    /// Entries uniform in `[-1/c, 1/c]`.
    pub fn random<R: Rng + ?Sized>(size: usize, dim: usize, role: CodebookRole, rng: &mut R) -> Self {
        let entries = Tensor::uniform(&[size, dim], 1.0 / dim as f64, rng);
        Self { entries, role }
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.data()[k * d..(k + 1) * d]
    }

    /// Index of the nearest entry to `v` in squared Euclidean distance,
    /// lowest index on ties.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = self.entry(k).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Assembles an h×w×c feature map from code indices.
    pub fn lookup(&self, codes: &[usize], grid: (usize, usize)) -> Result<Tensor> {
        if codes.len() != grid.0 * grid.1 {
            return Err(Error::Shape(format!("{} codes for a {}×{} grid", codes.len(), grid.0, grid.1)));
        }
        let mut data = Vec::with_capacity(codes.len() * self.dim());
        for &k in codes {
            if k >= self.size() {
                return Err(Error::Index { index: k, extent: self.size() });
            }
            data.extend_from_slice(self.entry(k));
        }
        Tensor::new(&[grid.0, grid.1, self.dim()], data)
    }
}

/// Nearest-entry quantization of every grid vector of an h×w×c map.
pub fn quantize(z: &Tensor, codebook: &Codebook) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = match z.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Shape(format!("expected h×w×c latent, got {s:?}"))),
    };
    if c != codebook.dim() {
        return Err(Error::Shape(format!("latent dim {c} vs codebook dim {}", codebook.dim())));
    }
    let codes: Vec<usize> = z.data().chunks(c).map(|v| codebook.nearest(v)).collect();
    let zq = codebook.lookup(&codes, (h, w))?;
    Ok((zq, codes))
}

/// Dual-codebook fusion with quality routing: `zq1 + alpha * zq2` when
/// `score > threshold`, otherwise `zq1`.
pub fn fuse(zq1: &Tensor, zq2: &Tensor, score: f64, threshold: f64, alpha: f64) -> Result<Tensor> {
    if zq1.shape() != zq2.shape() {
        return Err(Error::Shape(format!("fuse {:?} vs {:?}", zq1.shape(), zq2.shape())));
    }
    if score > threshold {
        fuse_always(zq1, zq2, alpha)
    } else {
        Ok(zq1.clone())
    }
}

/// Unconditional fusion `zq1 + alpha * zq2`.
pub fn fuse_always(zq1: &Tensor, zq2: &Tensor, alpha: f64) -> Result<Tensor> {
    if zq1.shape() != zq2.shape() {
        return Err(Error::Shape(format!("fuse {:?} vs {:?}", zq1.shape(), zq2.shape())));
    }
    let data = zq1.data().iter().zip(zq2.data()).map(|(a, b)| a + alpha * b).collect();
    Tensor::new(zq1.shape(), data)
}

/// Records `zq1 + alpha * zq2`.
pub fn fuse_var(tape: &mut Tape, zq1: Var, zq2: Var, alpha: f64) -> Result<Var> {
    let scaled = tape.scale(zq2, alpha);
    tape.add(zq1, scaled)
}

/// Code feature loss `‖sg(zh) - zq‖² + beta ‖zh - sg(zq)‖²` (sum of squares).
/// Codebook entries are trained by the first term, the encoder by the second.
pub fn codebook_loss(tape: &mut Tape, zh: Var, zq: Var, beta: f64) -> Result<Var> {
    feature_loss(tape, zh, zq, beta, true)
}

/// [`codebook_loss`] without the stop-gradients: the same forward value,
/// differentiated as the plain function `(1 + beta) ‖zh - zq‖²`.
pub fn codebook_loss_undetached(tape: &mut Tape, zh: Var, zq: Var, beta: f64) -> Result<Var> {
    feature_loss(tape, zh, zq, beta, false)
}

fn feature_loss(tape: &mut Tape, zh: Var, zq: Var, beta: f64, stop_gradients: bool) -> Result<Var> {
    let (zh_sg, zq_sg) = if stop_gradients { (tape.detach(zh), tape.detach(zq)) } else { (zh, zq) };
    let d1 = tape.sub(zh_sg, zq)?;
    let s1 = tape.square(d1);
    let t1 = tape.sum(s1);
    let d2 = tape.sub(zh, zq_sg)?;
    let s2 = tape.square(d2);
    let t2 = tape.sum(s2);
    let t2 = tape.scale(t2, beta);
    tape.add(t1, t2)
}

/// Looks up `codes` in a codebook recorded on the tape, giving an h×w×c map
/// whose gradient flows back into the selected entries.
pub fn lookup_var(tape: &mut Tape, entries: Var, codes: &[usize], grid: (usize, usize)) -> Result<Var> {
    let rows = tape.gather_rows(entries, codes)?;
    let c = tape.shape(entries)[1];
    tape.reshape(rows, &[grid.0, grid.1, c])
}

/// Fraction of codebook entries used at least once.
pub fn utilization(codes: &[usize], size: usize) -> f64 {
    let mut seen = vec![false; size];
    for &c in codes {
        if c < size {
            seen[c] = true;
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / size as f64
}
