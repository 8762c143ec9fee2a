use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::models::{argmax_rows, Encoder, Model, LATENT_GRID};
use crate::numeric::Tensor;
use crate::quality::{CorpusNormalizer, NUM_PROXIES};
use crate::vq::{fuse_always, quantize};

/// Conditioning bin used for every sample when conditioning is disabled.
pub const UNCONDITIONED_BIN: usize = 5;

/// Default restoration condition: the highest quality bin.
pub const DEFAULT_RESTORE_BIN: usize = 9;

/// Trained networks plus everything needed to use them: the frozen score
/// normalizer, the routing settings and the stage reached.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub model: Model,
    pub normalizer: CorpusNormalizer,
    pub stage: u8,
    pub alpha: f64,
    pub s_thr: f64,
    pub dual_codebook: bool,
    pub condition: bool,
    /// Frozen stage-I encoder that defines the code targets of stage II.
    pub target_encoder: Option<Encoder>,
    pub seed: u64,
    pub step: usize,
}

const TARGET_PREFIX: &str = "target.";

impl Pipeline {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.records.push(("normalizer.min".into(), Tensor::new(&[NUM_PROXIES], self.normalizer.min.to_vec()).expect("shape")));
        ckpt.records.push(("normalizer.max".into(), Tensor::new(&[NUM_PROXIES], self.normalizer.max.to_vec()).expect("shape")));
        if let Some(enc) = &self.target_encoder {
            ckpt.records.extend(enc.params.renamed(TARGET_PREFIX).named().map(|(n, t)| (n.to_string(), t.clone())));
        }
        ckpt.set_meta("stage", self.stage);
        ckpt.set_meta("alpha", self.alpha);
        ckpt.set_meta("s_thr", self.s_thr);
        ckpt.set_meta("dual_codebook", self.dual_codebook);
        ckpt.set_meta("condition", self.condition);
        ckpt.set_meta("seed", self.seed);
        ckpt.set_meta("step", self.step);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        fn meta<T: std::str::FromStr>(c: &Checkpoint, k: &str) -> Result<T> {
            c.meta(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata {k}")))
        }
        let model = Model::from_checkpoint(ckpt)?;
        let vec3 = |name: &str| -> Result<[f64; NUM_PROXIES]> {
            let t = ckpt.tensor(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            t.data().try_into().map_err(|_| Error::Checkpoint(format!("{name} must have {NUM_PROXIES} entries")))
        };
        let normalizer = CorpusNormalizer { min: vec3("normalizer.min")?, max: vec3("normalizer.max")? };
        let target_encoder = if ckpt.tensor(&format!("{TARGET_PREFIX}encoder.stem.weight")).is_some() {
            let mut enc = model.encoder.clone();
            enc.params.load_from(|n| ckpt.tensor(&format!("{TARGET_PREFIX}{n}")))?;
            Some(enc)
        } else {
            None
        };
        Ok(Self {
            model,
            normalizer,
            stage: meta(ckpt, "stage")?,
            alpha: meta(ckpt, "alpha")?,
            s_thr: meta(ckpt, "s_thr")?,
            dual_codebook: meta(ckpt, "dual_codebook")?,
            condition: meta(ckpt, "condition")?,
            target_encoder,
            seed: meta(ckpt, "seed")?,
            step: meta(ckpt, "step")?,
        })
    }

    fn require_stage2(&self) -> Result<()> {
        if self.stage < 2 {
            return Err(Error::Checkpoint("checkpoint lacks stage-II weights".into()));
        }
        Ok(())
    }

    /// Bin actually fed to the score embedding for a requested bin.
    pub fn effective_bin(&self, bin: usize) -> usize {
        if self.condition {
            bin
        } else {
            UNCONDITIONED_BIN
        }
    }

    /// Fused latent from code indices: `C1[c1] + alpha * C2[c2]`, or the
    /// common lookup alone for a single-codebook pipeline.
    pub fn fused_latent(&self, codes1: &[usize], codes2: &[usize]) -> Result<Tensor> {
        let grid = (LATENT_GRID, LATENT_GRID);
        let z1 = self.model.common.lookup(codes1, grid)?;
        if !self.dual_codebook {
            return Ok(z1);
        }
        let z2 = self.model.hq_plus.lookup(codes2, grid)?;
        fuse_always(&z1, &z2, self.alpha)
    }

    /// Stage-I reconstruction: quantize the encoder output against the common
    /// codebook, add the HQ+ feature when `score` exceeds the threshold, decode.
    pub fn reconstruct(&self, image: &Tensor, score: f64) -> Result<Tensor> {
        let zh = self.model.encoder.encode(image)?;
        let (zq1, _) = quantize(&zh, &self.model.common)?;
        let zq = if self.dual_codebook && score > self.s_thr {
            let (zq2, _) = quantize(&zh, &self.model.hq_plus)?;
            fuse_always(&zq1, &zq2, self.alpha)?
        } else {
            zq1
        };
        self.model.decoder.decode(&zq)
    }

    /// Predicted code sequences for an LQ input under condition `bin`.
    pub fn predict_codes(&self, lq: &Tensor, bin: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.require_stage2()?;
        let zl = self.model.encoder.encode(lq)?;
        let emb = self.model.embedding.embed(self.effective_bin(bin))?;
        let zhat = Tensor::new(zl.shape(), zl.data().iter().zip(emb.data()).map(|(a, b)| a + b).collect())?;
        let (l1, l2) = self.model.transformer.logits(&zhat)?;
        Ok((argmax_rows(&l1), argmax_rows(&l2)))
    }

    /// encode → add score embedding → predict codes → look up and fuse → decode.
    pub fn restore(&self, lq: &Tensor, bin: usize) -> Result<Tensor> {
        let (c1, c2) = self.predict_codes(lq, bin)?;
        let zf = self.fused_latent(&c1, &c2)?;
        self.model.decoder.decode(&zf)
    }

    /// Code targets of an HQ image: nearest entries of the frozen stage-I
    /// encoder output in each codebook.
    pub fn target_codes(&self, hq: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
        let enc = self.target_encoder.as_ref().unwrap_or(&self.model.encoder);
        let zh = enc.encode(hq)?;
        let (_, c1) = quantize(&zh, &self.model.common)?;
        let (_, c2) = quantize(&zh, &self.model.hq_plus)?;
        Ok((c1, c2))
    }
}
