use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::HqSample;
use super::pipeline::Pipeline;
use super::GradPath;
use crate::config::Stage1Config;
use crate::error::{Error, Result};
use crate::models::{
    discriminator_loss, generator_adv_loss, perceptual_loss, Bound, Model, TransformerConfig, LATENT_GRID,
};
use crate::numeric::{Tape, Tensor, Var};
use crate::quality::CorpusNormalizer;
use crate::vq::{codebook_loss, codebook_loss_undetached, fuse_var, lookup_var, quantize, Codebook, CodebookRole, CODE_DIM};

/// Tape bindings for one stage-I generator evaluation.
pub struct Stage1Vars {
    pub encoder: Bound,
    pub decoder: Bound,
    pub common: Var,
    pub hq_plus: Var,
    pub perceptual: Bound,
    pub discriminator: Bound,
}

impl Stage1Vars {
    /// Generator weights and codebooks trainable; perceptual and
    /// discriminator weights constant.
    pub fn bind(tape: &mut Tape, model: &Model) -> Self {
        Self {
            encoder: model.encoder.params.bind(tape, true),
            decoder: model.decoder.params.bind(tape, true),
            common: tape.param(model.common.entries.clone()),
            hq_plus: tape.param(model.hq_plus.entries.clone()),
            perceptual: model.perceptual.params.bind(tape, false),
            discriminator: model.discriminator.params.bind(tape, false),
        }
    }
}

/// Per-term batch means plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub l1: Var,
    pub per: Var,
    pub adv: Option<Var>,
    pub feat: Var,
    pub total: Var,
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        None => Ok(v),
        Some(a) => tape.add(a, v),
    }
}

/// Records the stage-I generator objective
/// `L1 + w_per·L_per + w_adv·L_adv + L_feat`, averaged over `batch`.
/// Each batch entry is an image and its ensemble score, which routes the
/// HQ+ codebook. Returns the loss terms and the reconstruction variables.
pub fn stage1_generator_objective(
    tape: &mut Tape,
    model: &Model,
    vars: &Stage1Vars,
    batch: &[(&Tensor, f64)],
    cfg: &Stage1Config,
    adversarial: bool,
    path: GradPath,
) -> Result<(Stage1Terms, Vec<Var>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty stage-I batch".into()));
    }
    let common = Codebook::new(tape.value(vars.common).clone(), CodebookRole::Common)?;
    let hq_plus = Codebook::new(tape.value(vars.hq_plus).clone(), CodebookRole::HqPlus)?;
    let grid = (LATENT_GRID, LATENT_GRID);
    let (mut l1s, mut pers, mut advs, mut feats) = (None, None, None, None);
    let mut recs = Vec::with_capacity(batch.len());
    for &(image, score) in batch {
        let x = tape.constant(image.clone());
        let zh = model.encoder.forward(tape, &vars.encoder, x)?;
        let (_, codes1) = quantize(tape.value(zh), &common)?;
        let mut zq = lookup_var(tape, vars.common, &codes1, grid)?;
        if cfg.dual_codebook && score > cfg.s_thr {
            let (_, codes2) = quantize(tape.value(zh), &hq_plus)?;
            let zq2 = lookup_var(tape, vars.hq_plus, &codes2, grid)?;
            zq = fuse_var(tape, zq, zq2, cfg.alpha)?;
        }
        let feat = match path {
            GradPath::StraightThrough => codebook_loss(tape, zh, zq, cfg.beta)?,
            GradPath::Exact => codebook_loss_undetached(tape, zh, zq, cfg.beta)?,
        };
        let feat = tape.scale(feat, 1.0 / tape.value(zh).len() as f64);
        let dec_in = match path {
            GradPath::StraightThrough => tape.straight_through(zh, zq)?,
            GradPath::Exact => zq,
        };
        let xr = model.decoder.forward(tape, &vars.decoder, dec_in)?;
        let diff = tape.sub(xr, x)?;
        let ad = tape.abs(diff);
        let l1 = tape.mean(ad);
        let fr = model.perceptual.forward(tape, &vars.perceptual, xr)?;
        let fx = model.perceptual.forward(tape, &vars.perceptual, x)?;
        let per = perceptual_loss(tape, &fr, &fx)?;
        if adversarial {
            let logits = model.discriminator.forward(tape, &vars.discriminator, xr)?;
            let adv = generator_adv_loss(tape, logits);
            advs = Some(accumulate(tape, advs, adv)?);
        }
        l1s = Some(accumulate(tape, l1s, l1)?);
        pers = Some(accumulate(tape, pers, per)?);
        feats = Some(accumulate(tape, feats, feat)?);
        recs.push(xr);
    }
    let inv = 1.0 / batch.len() as f64;
    let l1 = tape.scale(l1s.expect("non-empty"), inv);
    let per = tape.scale(pers.expect("non-empty"), inv);
    let feat = tape.scale(feats.expect("non-empty"), inv);
    let adv = advs.map(|a| tape.scale(a, inv));

    let wper = tape.scale(per, cfg.per_weight);
    let mut total = tape.add(l1, wper)?;
    if let Some(a) = adv {
        let wadv = tape.scale(a, cfg.adv_weight);
        total = tape.add(total, wadv)?;
    }
    total = tape.add(total, feat)?;
    Ok((Stage1Terms { l1, per, adv, feat, total }, recs))
}

/// Records the discriminator objective over paired real and reconstructed
/// images, averaged over the batch.
pub fn discriminator_objective(
    tape: &mut Tape,
    model: &Model,
    disc: &Bound,
    reals: &[&Tensor],
    fakes: &[Tensor],
) -> Result<Var> {
    let mut acc = None;
    for (real, fake) in reals.iter().zip(fakes) {
        let r = tape.constant((*real).clone());
        let f = tape.constant(fake.clone());
        let lr = model.discriminator.forward(tape, disc, r)?;
        let lf = model.discriminator.forward(tape, disc, f)?;
        let l = discriminator_loss(tape, lr, lf)?;
        acc = Some(accumulate(tape, acc, l)?);
    }
    let acc = acc.ok_or_else(|| Error::Argument("empty discriminator batch".into()))?;
    Ok(tape.scale(acc, 1.0 / reals.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Record {
    pub step: usize,
    pub total: f64,
    pub l1: f64,
    pub per: f64,
    pub adv: f64,
    pub feat: f64,
    pub disc: f64,
    pub hq_plus_samples: usize,
}

impl Stage1Record {
    pub const HEADER: [&'static str; 8] = ["step", "total", "l1", "per", "adv", "feat", "disc", "hq_plus_samples"];

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.total.to_string(),
            self.l1.to_string(),
            self.per.to_string(),
            self.adv.to_string(),
            self.feat.to_string(),
            self.disc.to_string(),
            self.hq_plus_samples.to_string(),
        ]
    }
}

pub struct Stage1Output {
    pub pipeline: Pipeline,
    pub curve: Vec<Stage1Record>,
    pub warnings: Vec<String>,
}

fn codebook_update(cb: &mut Codebook, grad: Option<&[f64]>, lr: f64) {
    if let Some(g) = grad {
        for (w, gv) in cb.entries.data_mut().iter_mut().zip(g) {
            *w -= lr * gv;
        }
    }
}

/// One generator step followed, when the adversarial term is active, by one
/// discriminator step. Returns the curve record for the step.
pub(crate) fn stage1_step(
    model: &mut Model,
    batch: &[&HqSample],
    cfg: &Stage1Config,
    step: usize,
    adversarial: bool,
) -> Result<Stage1Record> {
    let mut tape = Tape::new();
    let vars = Stage1Vars::bind(&mut tape, model);
    let items: Vec<(&Tensor, f64)> = batch.iter().map(|s| (&s.image, s.report.ensemble)).collect();
    let (terms, recs) = stage1_generator_objective(&mut tape, model, &vars, &items, cfg, adversarial, GradPath::StraightThrough)?;
    let total = tape.value(terms.total).item();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss(step));
    }
    let grads = tape.backward(terms.total)?;
    model.encoder.params.sgd_step(&grads, &vars.encoder, cfg.lr);
    model.decoder.params.sgd_step(&grads, &vars.decoder, cfg.lr);
    codebook_update(&mut model.common, grads.get(vars.common), cfg.lr);
    codebook_update(&mut model.hq_plus, grads.get(vars.hq_plus), cfg.lr);

    let mut record = Stage1Record {
        step,
        total,
        l1: tape.value(terms.l1).item(),
        per: tape.value(terms.per).item(),
        adv: terms.adv.map(|a| tape.value(a).item()).unwrap_or(0.0),
        feat: tape.value(terms.feat).item(),
        disc: 0.0,
        hq_plus_samples: items.iter().filter(|(_, s)| cfg.dual_codebook && *s > cfg.s_thr).count(),
    };

    if adversarial {
        let fakes: Vec<Tensor> = recs.iter().map(|&v| tape.value(v).clone()).collect();
        drop(tape);
        let mut dtape = Tape::new();
        let disc = model.discriminator.params.bind(&mut dtape, true);
        let reals: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let dl = discriminator_objective(&mut dtape, model, &disc, &reals, &fakes)?;
        let dv = dtape.value(dl).item();
        if !dv.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let dgrads = dtape.backward(dl)?;
        model.discriminator.params.sgd_step(&dgrads, &disc, cfg.lr);
        record.disc = dv;
    }
    Ok(record)
}

/// Images encoded to seed the codebooks.
const CODEBOOK_INIT_IMAGES: usize = 64;

/// Seeds the common codebook with encoder outputs of randomly chosen
/// images and the HQ+ codebook with the residuals `zh - zq1` of HQ+
/// images, so both start on the data the initial encoder produces.
/// A codebook keeps its random entries when too few vectors are available.
fn init_codebooks(model: &mut Model, corpus: &[HqSample], cfg: &Stage1Config, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut picks: Vec<usize> = (0..corpus.len()).collect();
    picks.shuffle(rng);
    picks.truncate(CODEBOOK_INIT_IMAGES);
    let mut latents = Vec::new();
    for &i in &picks {
        let z = model.encoder.encode(&corpus[i].image)?;
        latents.extend(z.data().chunks(CODE_DIM).map(<[f64]>::to_vec));
    }
    fill_from(&mut model.common, &latents, rng);

    let mut residuals = Vec::new();
    for s in corpus.iter().filter(|s| s.report.ensemble > cfg.s_thr).take(CODEBOOK_INIT_IMAGES) {
        let z = model.encoder.encode(&s.image)?;
        let (zq, _) = quantize(&z, &model.common)?;
        residuals.extend(
            z.data().chunks(CODE_DIM).zip(zq.data().chunks(CODE_DIM)).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()),
        );
    }
    fill_from(&mut model.hq_plus, &residuals, rng);
    Ok(())
}

fn fill_from(cb: &mut Codebook, vectors: &[Vec<f64>], rng: &mut ChaCha8Rng) {
    let n = cb.size();
    if vectors.len() < n {
        return;
    }
    let chosen = rand::seq::index::sample(rng, vectors.len(), n);
    let data = cb.entries.data_mut();
    for (k, i) in chosen.iter().enumerate() {
        data[k * CODE_DIM..(k + 1) * CODE_DIM].copy_from_slice(&vectors[i]);
    }
}

/// Trains encoder, both codebooks, decoder and discriminator on the scored
/// HQ corpus. Batches are drawn from a seeded reshuffle each epoch.
pub fn train_stage1(
    corpus: &[HqSample],
    normalizer: &CorpusNormalizer,
    cfg: &Stage1Config,
    transformer: TransformerConfig,
) -> Result<Stage1Output> {
    if corpus.is_empty() {
        return Err(Error::Argument("empty stage-I corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut warnings = Vec::new();
    let above = corpus.iter().filter(|s| s.report.ensemble > cfg.s_thr).count();
    if cfg.dual_codebook && (above == 0 || above == corpus.len()) {
        warnings.push(format!(
            "all {} samples lie on one side of S_thr = {}; the dual codebook degenerates",
            corpus.len(),
            cfg.s_thr
        ));
    }
    let mut model = Model::new(cfg.seed, transformer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00A1_5EED);
    init_codebooks(&mut model, corpus, cfg, &mut rng)?;
    let mut order: Vec<usize> = Vec::new();
    let warmup = (cfg.adv_warmup * cfg.steps as f64).ceil() as usize;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&corpus[order.pop().expect("non-empty")]);
        }
        let adversarial = cfg.adv_weight > 0.0 && step >= warmup;
        curve.push(stage1_step(&mut model, &batch, cfg, step, adversarial)?);
    }
    let pipeline = Pipeline {
        model,
        normalizer: normalizer.clone(),
        stage: 1,
        alpha: cfg.alpha,
        s_thr: cfg.s_thr,
        dual_codebook: cfg.dual_codebook,
        condition: true,
        target_encoder: None,
        seed: cfg.seed,
        step: cfg.steps,
    };
    Ok(Stage1Output { pipeline, curve, warnings })
}
