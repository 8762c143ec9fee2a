//! Training, corpus and degradation configuration, plus the plain-text
//! `key = value` run-config format that covers all of them.

use std::path::PathBuf;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Weight of the HQ+ feature in the fused latent.
    pub alpha: f64,
    /// Commitment weight of the code feature loss.
    pub beta: f64,
    /// Ensemble score above which a sample engages the HQ+ codebook.
    pub s_thr: f64,
    pub per_weight: f64,
    pub adv_weight: f64,
    /// Fraction of steps before the adversarial term switches on.
    pub adv_warmup: f64,
    pub dual_codebook: bool,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr: 1.0,
            steps: 2000,
            batch_size: 4,
            alpha: 1.0,
            beta: 0.25,
            s_thr: 0.90,
            per_weight: 0.1,
            adv_weight: 0.05,
            adv_warmup: 0.25,
            dual_codebook: true,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Condition code prediction on the HQ quality bin; when off every
    /// sample uses bin 5 and restoration ignores the requested bin.
    pub condition: bool,
    /// Start the stage-II encoder from the stage-I encoder.
    pub init_from_stage1: bool,
    /// Apply the quality loss only during the final 25% of steps.
    pub defer_quality: bool,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr: 0.1,
            steps: 6000,
            batch_size: 4,
            lambda1: 0.5,
            lambda2: 0.1,
            condition: true,
            init_from_stage1: true,
            defer_quality: false,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Probability that an image is left unblurred.
    pub sharp_fraction: f64,
    /// Log-normal intrinsic blur: median and log-space spread.
    pub blur_median: f64,
    pub blur_spread: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { count: 512, size: 32, seed: 7, sharp_fraction: 0.08, blur_median: 0.8, blur_spread: 0.5 }
    }
}

/// Sampling ranges of the degradation pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationRanges {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub r_max: usize,
    pub delta_min: f64,
    pub delta_max: f64,
    pub q_min: u32,
    pub q_max: u32,
    pub seed: u64,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self { sigma_min: 1.0, sigma_max: 4.0, r_max: 4, delta_min: 0.0, delta_max: 20.0, q_min: 30, q_max: 90, seed: 7 }
    }
}

/// Everything a CLI run reads from its config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub degrade: DegradationRanges,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval_count: usize,
    pub opt_steps: usize,
    pub opt_step_size: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            corpus: CorpusSpec::default(),
            degrade: DegradationRanges::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval_count: 64,
            opt_steps: 200,
            opt_step_size: 0.1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Argument(format!("{key}: cannot parse {value:?}: {e}")))
}

/// Documentation for every config key, in file order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("run.dir", "output directory for all artifacts"),
    ("corpus.count", "number of synthetic HQ images"),
    ("corpus.size", "image side length in pixels"),
    ("corpus.seed", "corpus generation seed"),
    ("corpus.sharp_fraction", "probability of an unblurred image"),
    ("corpus.blur_median", "median intrinsic blur sigma"),
    ("corpus.blur_spread", "log-space spread of the intrinsic blur"),
    ("degrade.sigma_min", "lower bound of the blur sigma"),
    ("degrade.sigma_max", "upper bound of the blur sigma"),
    ("degrade.r_max", "largest resampling factor"),
    ("degrade.delta_min", "lower bound of the noise level (0-255 scale)"),
    ("degrade.delta_max", "upper bound of the noise level (0-255 scale)"),
    ("degrade.q_min", "lowest JPEG quality"),
    ("degrade.q_max", "highest JPEG quality"),
    ("degrade.seed", "pair synthesis seed"),
    ("stage1.lr", "stage-I learning rate"),
    ("stage1.steps", "stage-I steps"),
    ("stage1.batch_size", "stage-I batch size"),
    ("stage1.alpha", "HQ+ fusion weight (1.0)"),
    ("stage1.beta", "commitment weight (0.25)"),
    ("stage1.s_thr", "HQ+ quality threshold (0.90)"),
    ("stage1.per_weight", "perceptual loss weight"),
    ("stage1.adv_weight", "adversarial loss weight"),
    ("stage1.adv_warmup", "fraction of steps before the adversarial term"),
    ("stage1.dual_codebook", "train the HQ+ codebook"),
    ("stage1.seed", "stage-I seed"),
    ("stage2.lr", "stage-II learning rate"),
    ("stage2.steps", "stage-II steps"),
    ("stage2.batch_size", "stage-II batch size"),
    ("stage2.lambda1", "code index loss weight (0.5)"),
    ("stage2.lambda2", "quality loss weight (0.1)"),
    ("stage2.condition", "condition on the quality bin"),
    ("stage2.init_from_stage1", "initialize the encoder from stage I"),
    ("stage2.defer_quality", "apply the quality loss only in the last 25% of steps"),
    ("stage2.seed", "stage-II seed"),
    ("eval.count", "evaluation set size"),
    ("opt.steps", "continuous ascent steps / discrete sweep limit"),
    ("opt.step_size", "initial continuous ascent step"),
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "run.dir" => self.run_dir = PathBuf::from(v),
            "corpus.count" => self.corpus.count = parse(key, v)?,
            "corpus.size" => self.corpus.size = parse(key, v)?,
            "corpus.seed" => self.corpus.seed = parse(key, v)?,
            "corpus.sharp_fraction" => self.corpus.sharp_fraction = parse(key, v)?,
            "corpus.blur_median" => self.corpus.blur_median = parse(key, v)?,
            "corpus.blur_spread" => self.corpus.blur_spread = parse(key, v)?,
            "degrade.sigma_min" => self.degrade.sigma_min = parse(key, v)?,
            "degrade.sigma_max" => self.degrade.sigma_max = parse(key, v)?,
            "degrade.r_max" => self.degrade.r_max = parse(key, v)?,
            "degrade.delta_min" => self.degrade.delta_min = parse(key, v)?,
            "degrade.delta_max" => self.degrade.delta_max = parse(key, v)?,
            "degrade.q_min" => self.degrade.q_min = parse(key, v)?,
            "degrade.q_max" => self.degrade.q_max = parse(key, v)?,
            "degrade.seed" => self.degrade.seed = parse(key, v)?,
            "stage1.lr" => self.stage1.lr = parse(key, v)?,
            "stage1.steps" => self.stage1.steps = parse(key, v)?,
            "stage1.batch_size" => self.stage1.batch_size = parse(key, v)?,
            "stage1.alpha" => self.stage1.alpha = parse(key, v)?,
            "stage1.beta" => self.stage1.beta = parse(key, v)?,
            "stage1.s_thr" => self.stage1.s_thr = parse(key, v)?,
            "stage1.per_weight" => self.stage1.per_weight = parse(key, v)?,
            "stage1.adv_weight" => self.stage1.adv_weight = parse(key, v)?,
            "stage1.adv_warmup" => self.stage1.adv_warmup = parse(key, v)?,
            "stage1.dual_codebook" => self.stage1.dual_codebook = parse(key, v)?,
            "stage1.seed" => self.stage1.seed = parse(key, v)?,
            "stage2.lr" => self.stage2.lr = parse(key, v)?,
            "stage2.steps" => self.stage2.steps = parse(key, v)?,
            "stage2.batch_size" => self.stage2.batch_size = parse(key, v)?,
            "stage2.lambda1" => self.stage2.lambda1 = parse(key, v)?,
            "stage2.lambda2" => self.stage2.lambda2 = parse(key, v)?,
            "stage2.condition" => self.stage2.condition = parse(key, v)?,
            "stage2.init_from_stage1" => self.stage2.init_from_stage1 = parse(key, v)?,
            "stage2.defer_quality" => self.stage2.defer_quality = parse(key, v)?,
            "stage2.seed" => self.stage2.seed = parse(key, v)?,
            "eval.count" => self.eval_count = parse(key, v)?,
            "opt.steps" => self.opt_steps = parse(key, v)?,
            "opt.step_size" => self.opt_step_size = parse(key, v)?,
            _ => return Err(Error::Argument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEY_DOCS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        let d = &self.degrade;
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        let values = [
            self.run_dir.display().to_string(),
            c.count.to_string(),
            c.size.to_string(),
            c.seed.to_string(),
            c.sharp_fraction.to_string(),
            c.blur_median.to_string(),
            c.blur_spread.to_string(),
            d.sigma_min.to_string(),
            d.sigma_max.to_string(),
            d.r_max.to_string(),
            d.delta_min.to_string(),
            d.delta_max.to_string(),
            d.q_min.to_string(),
            d.q_max.to_string(),
            d.seed.to_string(),
            s1.lr.to_string(),
            s1.steps.to_string(),
            s1.batch_size.to_string(),
            s1.alpha.to_string(),
            s1.beta.to_string(),
            s1.s_thr.to_string(),
            s1.per_weight.to_string(),
            s1.adv_weight.to_string(),
            s1.adv_warmup.to_string(),
            s1.dual_codebook.to_string(),
            s1.seed.to_string(),
            s2.lr.to_string(),
            s2.steps.to_string(),
            s2.batch_size.to_string(),
            s2.lambda1.to_string(),
            s2.lambda2.to_string(),
            s2.condition.to_string(),
            s2.init_from_stage1.to_string(),
            s2.defer_quality.to_string(),
            s2.seed.to_string(),
            self.eval_count.to_string(),
            self.opt_steps.to_string(),
            self.opt_step_size.to_string(),
        ];
        KEY_DOCS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Argument(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
