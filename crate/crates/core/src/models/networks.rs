use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{conv, Bound, ParamStore};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::vq::CODE_DIM;

pub const IMAGE_SIZE: usize = 32;
pub const LATENT_GRID: usize = 4;

/// Seed of the frozen perceptual feature extractor.
pub const PERCEPTUAL_SEED: u64 = 0x5EED_0F_F1;

fn expect_shape(tape: &Tape, v: Var, shape: &[usize], what: &str) -> Result<()> {
    if tape.shape(v) != shape {
        return Err(Error::Shape(format!("{what} expects {shape:?}, got {:?}", tape.shape(v))));
    }
    Ok(())
}

/// 32×32×1 image → 4×4×32 latent: three stride-2 convolutions after a stem,
/// one residual block and a 1×1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub params: ParamStore,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        p.push_conv("encoder.stem", 3, 1, 8, rng);
        p.push_conv("encoder.down1", 3, 8, 16, rng);
        p.push_conv("encoder.down2", 3, 16, 32, rng);
        p.push_conv("encoder.down3", 3, 32, CODE_DIM, rng);
        p.push_conv("encoder.res", 3, CODE_DIM, CODE_DIM, rng);
        p.push_conv("encoder.proj", 1, CODE_DIM, CODE_DIM, rng);
        Self { params: p }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        expect_shape(tape, x, &[IMAGE_SIZE, IMAGE_SIZE, 1], "encoder")?;
        let h = conv(tape, b, 0, x, 1, 1)?;
        let h = tape.silu(h);
        let h = conv(tape, b, 2, h, 2, 1)?;
        let h = tape.silu(h);
        let h = conv(tape, b, 4, h, 2, 1)?;
        let h = tape.silu(h);
        let h = conv(tape, b, 6, h, 2, 1)?;
        let a = tape.silu(h);
        let r = conv(tape, b, 8, a, 1, 1)?;
        let h = tape.add(h, r)?;
        conv(tape, b, 10, h, 1, 0)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.forward(&mut tape, &b, xv)?;
        Ok(tape.value(z).clone())
    }
}

/// 4×4×32 latent → 32×32×1 image in `[0, 1]` via nearest upsampling and
/// convolutions, finished by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub params: ParamStore,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        p.push_conv("decoder.stem", 3, CODE_DIM, 32, rng);
        p.push_conv("decoder.res", 3, 32, 32, rng);
        p.push_conv("decoder.up1", 3, 32, 16, rng);
        p.push_conv("decoder.up2", 3, 16, 8, rng);
        p.push_conv("decoder.up3", 3, 8, 4, rng);
        p.push_conv("decoder.out", 3, 4, 1, rng);
        Self { params: p }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, z: Var) -> Result<Var> {
        expect_shape(tape, z, &[LATENT_GRID, LATENT_GRID, CODE_DIM], "decoder")?;
        let h = conv(tape, b, 0, z, 1, 1)?;
        let a = tape.silu(h);
        let r = conv(tape, b, 2, a, 1, 1)?;
        let h = tape.add(h, r)?;
        let mut h = tape.silu(h);
        for idx in [4, 6, 8] {
            let up = tape.upsample_nearest(h, 2)?;
            let c = conv(tape, b, idx, up, 1, 1)?;
            h = tape.silu(c);
        }
        let out = conv(tape, b, 10, h, 1, 1)?;
        Ok(tape.sigmoid(out))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let x = self.forward(&mut tape, &b, zv)?;
        Ok(tape.value(x).clone())
    }
}

/// Patch discriminator: three stride-2 convolutions and a 1×1 logit layer
/// without normalization, 32×32 → 4×4 logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        p.push_conv("disc.conv1", 3, 1, 8, rng);
        p.push_conv("disc.conv2", 3, 8, 16, rng);
        p.push_conv("disc.conv3", 3, 16, 16, rng);
        p.push_conv("disc.logit", 1, 16, 1, rng);
        Self { params: p }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for idx in [0, 2, 4] {
            let c = conv(tape, b, idx, h, 2, 1)?;
            h = tape.silu(c);
        }
        conv(tape, b, 6, h, 1, 0)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let l = self.forward(&mut tape, &b, xv)?;
        Ok(tape.value(l).clone())
    }
}

/// `-log D(real) - log(1 - D(fake))` averaged over patches, with D = sigmoid
/// of the logits. This is the negated adversarial objective, minimized by
/// the discriminator.
pub fn discriminator_loss(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let neg_real = tape.scale(real_logits, -1.0);
    let a = tape.softplus(neg_real);
    let b = tape.softplus(fake_logits);
    let ma = tape.mean(a);
    let mb = tape.mean(b);
    tape.add(ma, mb)
}

/// Non-saturating generator loss `-log D(fake)` averaged over patches.
pub fn generator_adv_loss(tape: &mut Tape, fake_logits: Var) -> Var {
    let neg = tape.scale(fake_logits, -1.0);
    let s = tape.softplus(neg);
    tape.mean(s)
}

/// Frozen random-convolution feature extractor: three stride-2 layers whose
/// activations are all returned.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet {
    pub params: ParamStore,
}

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualNet {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let mut p = ParamStore::new();
        p.push_conv("perceptual.conv1", 3, 1, 8, &mut rng);
        p.push_conv("perceptual.conv2", 3, 8, 16, &mut rng);
        p.push_conv("perceptual.conv3", 3, 16, 16, &mut rng);
        Self { params: p }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(3);
        let mut h = x;
        for idx in [0, 2, 4] {
            let c = conv(tape, b, idx, h, 2, 1)?;
            h = tape.silu(c);
            feats.push(h);
        }
        Ok(feats)
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, &b, xv)?;
        Ok(f.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

/// Feature-space squared distance, averaged per element within each layer
/// and summed over layers.
pub fn perceptual_loss(tape: &mut Tape, a: &[Var], b: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&fa, &fb) in a.iter().zip(b) {
        let d = tape.sub(fa, fb)?;
        let s = tape.square(d);
        let m = tape.mean(s);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    total.ok_or_else(|| Error::Argument("no feature maps".into()))
}
