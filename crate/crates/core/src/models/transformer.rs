use rand::Rng;

use super::networks::LATENT_GRID;
use super::params::{linear, Bound, ParamStore};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::vq::CODE_DIM;

pub const NUM_BINS: usize = 10;
pub const NUM_TOKENS: usize = LATENT_GRID * LATENT_GRID;

/// One learned h·w·c vector per quality bin, added to the LQ latent.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEmbedding {
    pub params: ParamStore,
}

impl ScoreEmbedding {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let bound = (6.0 / NUM_BINS as f64).sqrt();
        p.push("score_embedding.table", Tensor::uniform(&[NUM_BINS, NUM_TOKENS * CODE_DIM], bound, rng));
        Self { params: p }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, bin: usize) -> Result<Var> {
        if bin >= NUM_BINS {
            return Err(Error::Argument(format!("score bin {bin} outside [0, {}]", NUM_BINS - 1)));
        }
        let row = tape.gather_rows(b[0], &[bin])?;
        tape.reshape(row, &[LATENT_GRID, LATENT_GRID, CODE_DIM])
    }

    pub fn embed(&self, bin: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let v = self.forward(&mut tape, &b, bin)?;
        Ok(tape.value(v).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub common_size: usize,
    pub hq_size: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 4, ffn: 64, common_size: crate::vq::COMMON_SIZE, hq_size: crate::vq::HQ_PLUS_SIZE }
    }
}

const PER_LAYER: usize = 16;

/// Pre-norm self-attention stack over the 16 latent tokens with learned
/// positional encodings and two classification heads, one per codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTransformer {
    pub params: ParamStore,
    pub config: TransformerConfig,
}

impl CodeTransformer {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Self {
        if CODE_DIM % config.heads != 0 {
            panic!("model width {CODE_DIM} not divisible by {} heads", config.heads);
        }
        let d = CODE_DIM;
        let mut p = ParamStore::new();
        p.push("transformer.pos", Tensor::uniform(&[NUM_TOKENS, d], 1.0 / (d as f64).sqrt(), rng));
        for l in 0..config.layers {
            let n = format!("transformer.layer{l}");
            p.push_layer_norm(&format!("{n}.ln1"), d);
            p.push_linear(&format!("{n}.q"), d, d, rng);
            p.push_linear(&format!("{n}.k"), d, d, rng);
            p.push_linear(&format!("{n}.v"), d, d, rng);
            p.push_linear(&format!("{n}.o"), d, d, rng);
            p.push_layer_norm(&format!("{n}.ln2"), d);
            p.push_linear(&format!("{n}.ff1"), d, config.ffn, rng);
            p.push_linear(&format!("{n}.ff2"), config.ffn, d, rng);
        }
        p.push_layer_norm("transformer.ln_out", d);
        p.push_linear("transformer.head_common", d, config.common_size, rng);
        p.push_linear("transformer.head_hq_plus", d, config.hq_size, rng);
        Self { params: p, config }
    }

    fn attention(&self, tape: &mut Tape, b: &Bound, base: usize, h: Var) -> Result<Var> {
        let q = linear(tape, b, base + 2, h)?;
        let k = linear(tape, b, base + 4, h)?;
        let v = linear(tape, b, base + 6, h)?;
        let hd = CODE_DIM / self.config.heads;
        let inv = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, inv);
            let a = tape.softmax_rows(s)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        linear(tape, b, base + 8, cat)
    }

    /// Logits over the common and HQ+ codebooks for each of the 16 tokens.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, z: Var) -> Result<(Var, Var)> {
        let expect = [LATENT_GRID, LATENT_GRID, CODE_DIM];
        if tape.shape(z) != expect {
            return Err(Error::Shape(format!("transformer expects {expect:?}, got {:?}", tape.shape(z))));
        }
        let tokens = tape.reshape(z, &[NUM_TOKENS, CODE_DIM])?;
        let mut x = tape.add(tokens, b[0])?;
        for l in 0..self.config.layers {
            let base = 1 + l * PER_LAYER;
            let h = tape.layer_norm(x, b[base], b[base + 1], 1e-5)?;
            let a = self.attention(tape, b, base, h)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, b[base + 10], b[base + 11], 1e-5)?;
            let f = linear(tape, b, base + 12, h)?;
            let f = tape.silu(f);
            let f = linear(tape, b, base + 14, f)?;
            x = tape.add(x, f)?;
        }
        let tail = 1 + self.config.layers * PER_LAYER;
        let h = tape.layer_norm(x, b[tail], b[tail + 1], 1e-5)?;
        let l1 = linear(tape, b, tail + 2, h)?;
        let l2 = linear(tape, b, tail + 4, h)?;
        Ok((l1, l2))
    }

    pub fn logits(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let (l1, l2) = self.forward(&mut tape, &b, zv)?;
        Ok((tape.value(l1).clone(), tape.value(l2).clone()))
    }
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let m = logits.shape()[1];
    logits
        .data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
