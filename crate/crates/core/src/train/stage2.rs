use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Pair;
use super::pipeline::Pipeline;
use super::GradPath;
use crate::config::Stage2Config;
use crate::error::{Error, Result};
use crate::models::{argmax_rows, Bound, Encoder, Model, LATENT_GRID};
use crate::numeric::{Tape, Tensor, Var};
use crate::quality::CorpusNormalizer;
use crate::vq::CODE_DIM;

/// Precomputed supervision for one LQ/HQ pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Target {
    pub lq: Tensor,
    /// Conditioning bin fed to the score embedding.
    pub bin: usize,
    pub codes1: Vec<usize>,
    pub codes2: Vec<usize>,
    /// Fused HQ latent `C1[c1] + alpha * C2[c2]` (common lookup alone for a
    /// single-codebook pipeline).
    pub latent: Tensor,
}

impl Stage2Target {
    pub fn from_pair(pipe: &Pipeline, pair: &Pair) -> Result<Self> {
        let (codes1, codes2) = pipe.target_codes(&pair.hq)?;
        let latent = pipe.fused_latent(&codes1, &codes2)?;
        Ok(Self { lq: pair.lq.clone(), bin: pipe.effective_bin(pair.report.bin), codes1, codes2, latent })
    }
}

/// Tape bindings for a stage-II evaluation. Decoder and codebooks are
/// recorded as constants, so they can never receive a gradient.
pub struct Stage2Vars {
    pub encoder: Bound,
    pub embedding: Bound,
    pub transformer: Bound,
    pub decoder: Bound,
    pub common: Var,
    pub hq_plus: Var,
}

impl Stage2Vars {
    pub fn bind(tape: &mut Tape, model: &Model) -> Self {
        Self {
            encoder: model.encoder.params.bind(tape, true),
            embedding: model.embedding.params.bind(tape, true),
            transformer: model.transformer.params.bind(tape, true),
            decoder: model.decoder.params.bind(tape, false),
            common: tape.constant(model.common.entries.clone()),
            hq_plus: tape.constant(model.hq_plus.entries.clone()),
        }
    }
}

/// Batch-mean loss terms and `total = feat + lambda1 * index + lambda2 * quality`.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Losses {
    pub feat: Var,
    pub index: Var,
    /// `-ensemble` of the decoded prediction; absent when the quality term
    /// is switched off for this step.
    pub quality: Option<Var>,
    pub total: Var,
}

/// Soft code mixture `softmax(logits) @ codebook`, laid out on the latent grid.
fn soft_latent(tape: &mut Tape, logits: Var, codebook: Var) -> Result<Var> {
    let p = tape.softmax_rows(logits)?;
    let z = tape.matmul(p, codebook)?;
    tape.reshape(z, &[LATENT_GRID, LATENT_GRID, CODE_DIM])
}

fn hard_latent(tape: &mut Tape, logits: Var, codebook: Var) -> Result<Var> {
    let codes = argmax_rows(tape.value(logits));
    crate::vq::lookup_var(tape, codebook, &codes, (LATENT_GRID, LATENT_GRID))
}

/// Settings of [`stage2_objective`] that come from the pipeline rather
/// than from the optimizer configuration.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Setup<'a> {
    pub normalizer: &'a CorpusNormalizer,
    pub alpha: f64,
    pub dual_codebook: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub with_quality: bool,
}

/// Records the stage-II objective for `batch` on `tape`.
///
/// With [`GradPath::StraightThrough`] the quality term decodes the argmax
/// codes and passes gradients through the soft code mixture; with
/// [`GradPath::Exact`] it decodes the soft mixture itself.
pub fn stage2_objective(
    tape: &mut Tape,
    model: &Model,
    vars: &Stage2Vars,
    batch: &[&Stage2Target],
    setup: Stage2Setup<'_>,
    path: GradPath,
) -> Result<Stage2Losses> {
    if batch.is_empty() {
        return Err(Error::Argument("empty stage-II batch".into()));
    }
    let mut feats = Vec::with_capacity(batch.len());
    let mut indices = Vec::with_capacity(batch.len());
    let mut qualities = Vec::with_capacity(batch.len());
    for t in batch {
        let x = tape.constant(t.lq.clone());
        let zl = model.encoder.forward(tape, &vars.encoder, x)?;
        let target = tape.constant(t.latent.clone());
        let d = tape.sub(zl, target)?;
        let d2 = tape.square(d);
        feats.push(tape.mean(d2));

        let emb = model.embedding.forward(tape, &vars.embedding, t.bin)?;
        let zhat = tape.add(zl, emb)?;
        let (lg1, lg2) = model.transformer.forward(tape, &vars.transformer, zhat)?;
        let mut index = tape.cross_entropy(lg1, &t.codes1)?;
        if setup.dual_codebook {
            let ce2 = tape.cross_entropy(lg2, &t.codes2)?;
            index = tape.add(index, ce2)?;
        }
        indices.push(index);

        if setup.with_quality {
            let mut soft = soft_latent(tape, lg1, vars.common)?;
            if setup.dual_codebook {
                let s2 = soft_latent(tape, lg2, vars.hq_plus)?;
                let s2 = tape.scale(s2, setup.alpha);
                soft = tape.add(soft, s2)?;
            }
            let zf = match path {
                GradPath::Exact => soft,
                GradPath::StraightThrough => {
                    let mut hard = hard_latent(tape, lg1, vars.common)?;
                    if setup.dual_codebook {
                        let h2 = hard_latent(tape, lg2, vars.hq_plus)?;
                        let h2 = tape.scale(h2, setup.alpha);
                        hard = tape.add(hard, h2)?;
                    }
                    tape.straight_through(soft, hard)?
                }
            };
            let xr = model.decoder.forward(tape, &vars.decoder, zf)?;
            let s = setup.normalizer.ensemble_var(tape, xr)?;
            qualities.push(tape.scale(s, -1.0));
        }
    }
    let feat = batch_mean(tape, &feats)?;
    let index = batch_mean(tape, &indices)?;
    let quality = if qualities.is_empty() { None } else { Some(batch_mean(tape, &qualities)?) };
    let wi = tape.scale(index, setup.lambda1);
    let mut total = tape.add(feat, wi)?;
    if let Some(q) = quality {
        let wq = tape.scale(q, setup.lambda2);
        total = tape.add(total, wq)?;
    }
    Ok(Stage2Losses { feat, index, quality, total })
}

fn batch_mean(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vs.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Record {
    pub step: usize,
    pub total: f64,
    pub feat: f64,
    pub index: f64,
    pub quality: f64,
}

impl Stage2Record {
    pub const HEADER: [&'static str; 5] = ["step", "total", "feat", "index", "quality"];

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.total.to_string(),
            self.feat.to_string(),
            self.index.to_string(),
            self.quality.to_string(),
        ]
    }
}

pub struct Stage2Output {
    pub pipeline: Pipeline,
    pub curve: Vec<Stage2Record>,
}

/// Prepares the stage-II starting point from a stage-I pipeline: freezes
/// its encoder as the target encoder and applies the encoder-init choice.
pub fn stage2_start(base: &Pipeline, cfg: &Stage2Config) -> Result<Pipeline> {
    if base.stage < 1 {
        return Err(Error::Checkpoint("base checkpoint lacks stage-I weights".into()));
    }
    let mut pipe = base.clone();
    let frozen = base.target_encoder.clone().unwrap_or_else(|| base.model.encoder.clone());
    if !cfg.init_from_stage1 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0E2C_0DE2);
        pipe.model.encoder = Encoder::new(&mut rng);
    }
    pipe.target_encoder = Some(frozen);
    pipe.condition = cfg.condition;
    pipe.stage = 2;
    pipe.seed = cfg.seed;
    pipe.step = 0;
    Ok(pipe)
}

/// Trains encoder, score embedding and transformer on LQ/HQ pairs while
/// the codebooks and decoder of `base` stay frozen.
pub fn train_stage2(pairs: &[Pair], cfg: &Stage2Config, base: &Pipeline) -> Result<Stage2Output> {
    if pairs.is_empty() {
        return Err(Error::Argument("empty stage-II pair set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut pipe = stage2_start(base, cfg)?;
    let targets = pairs.iter().map(|p| Stage2Target::from_pair(&pipe, p)).collect::<Result<Vec<_>>>()?;
    let quality_from = if cfg.defer_quality { cfg.steps - cfg.steps / 4 } else { 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_7A6E_2);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..targets.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&targets[order.pop().expect("non-empty")]);
        }
        let setup = Stage2Setup {
            normalizer: &pipe.normalizer,
            alpha: pipe.alpha,
            dual_codebook: pipe.dual_codebook,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            with_quality: cfg.lambda2 != 0.0 && step >= quality_from,
        };
        let mut tape = Tape::new();
        let vars = Stage2Vars::bind(&mut tape, &pipe.model);
        let losses = stage2_objective(&mut tape, &pipe.model, &vars, &batch, setup, GradPath::StraightThrough)?;
        let total = tape.value(losses.total).item();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let grads = tape.backward(losses.total)?;
        pipe.model.encoder.params.sgd_step(&grads, &vars.encoder, cfg.lr);
        pipe.model.embedding.params.sgd_step(&grads, &vars.embedding, cfg.lr);
        pipe.model.transformer.params.sgd_step(&grads, &vars.transformer, cfg.lr);
        curve.push(Stage2Record {
            step,
            total,
            feat: tape.value(losses.feat).item(),
            index: tape.value(losses.index).item(),
            quality: losses.quality.map(|q| tape.value(q).item()).unwrap_or(0.0),
        });
    }
    pipe.step = cfg.steps;
    Ok(Stage2Output { pipeline: pipe, curve })
}
