use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use iqvq::checkpoint::Checkpoint;
use iqvq::config::RunConfig;
use iqvq::corpus::{gen_corpus, read_image_dir, write_corpus};
use iqvq::image::{read_pgm, write_pgm};
use iqvq::models::TransformerConfig;
use iqvq::train::{
    eval_csv, evaluate, make_pairs, optimize_quality_continuous, optimize_quality_discrete, run_ablation,
    score_images, split_holdout, to_csv, train_stage1, train_stage2, AblationRow, HqSample, OptimizeTrace, Pair,
    Pipeline, Stage1Record, Stage2Record,
};

use crate::{Cli, Command, Common, Mode, ModelArg};

/// Resolved configuration; every default path hangs off its run directory.
struct Run {
    cfg: RunConfig,
}

impl Run {
    fn load(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                RunConfig::parse(&text).with_context(|| format!("in config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        for kv in &common.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(dir) = &common.run_dir {
            cfg.run_dir = dir.clone();
        }
        Ok(Self { cfg })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.run_dir.join(rel)
    }

    /// Writes the effective configuration next to the run's other artifacts.
    fn echo(&self, command: &str) -> Result<()> {
        let dir = self.path("config");
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("{command}.txt")), self.cfg.to_text())?;
        Ok(())
    }

    fn corpus(&self) -> Result<Vec<(String, iqvq::Tensor)>> {
        let dir = self.path("corpus");
        read_image_dir(&dir).with_context(|| format!("reading corpus {} (run gen-corpus first)", dir.display()))
    }

    fn scored(&self) -> Result<(iqvq::quality::CorpusNormalizer, Vec<HqSample>)> {
        Ok(score_images(&self.corpus()?)?)
    }

    /// Pairs are re-synthesized from the corpus; `gen-pairs` writes the
    /// same pairs for inspection.
    fn pairs(&self) -> Result<Vec<Pair>> {
        let (_, samples) = self.scored()?;
        Ok(make_pairs(&samples, &self.cfg.degrade)?)
    }

    /// Training and held-out pair sets; the last `eval.count` pairs are held out.
    fn pair_split(&self, pairs: &[Pair]) -> Result<(Vec<Pair>, Vec<Pair>)> {
        let (train, eval) = split_holdout(pairs, self.cfg.eval_count)?;
        Ok((train.to_vec(), eval.to_vec()))
    }

    fn model(&self, arg: &ModelArg) -> Result<Pipeline> {
        let path = arg.ckpt.clone().unwrap_or_else(|| self.path("stage2/final.ckpt"));
        load_pipeline(&path)
    }
}

fn load_pipeline(path: &Path) -> Result<Pipeline> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Pipeline::from_checkpoint(&ckpt)?)
}

fn save_pipeline(pipe: &Pipeline, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    pipe.to_checkpoint().save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut run = Run::load(&cli.common)?;
    match cli.command {
        Command::GenCorpus { count, seed, out } => {
            if let Some(c) = count {
                run.cfg.corpus.count = c;
            }
            if let Some(s) = seed {
                run.cfg.corpus.seed = s;
            }
            let dir = out.unwrap_or_else(|| run.path("corpus"));
            let images = gen_corpus(&run.cfg.corpus)?;
            write_corpus(&dir, &images)?;
            run.echo("gen-corpus")?;
            eprintln!("wrote {} images to {}", images.len(), dir.display());
        }
        Command::Score { images, out } => {
            let dir = images.unwrap_or_else(|| run.path("corpus"));
            let named = read_image_dir(&dir).with_context(|| format!("reading {}", dir.display()))?;
            let (norm, samples) = score_images(&named)?;
            let rows = samples.iter().map(|s| {
                let r = &s.report;
                let mut f = vec![s.id.clone()];
                f.extend(r.raw.iter().chain(&r.normalized).map(f64::to_string));
                f.push(r.ensemble.to_string());
                f.push(r.bin.to_string());
                f
            });
            let header = ["image_id", "p1_raw", "p2_raw", "p3_raw", "p1", "p2", "p3", "ensemble", "bin"];
            let out = out.unwrap_or_else(|| run.path("scores.csv"));
            write(&out, &to_csv(&header, rows))?;
            let bounds = (0..3).map(|p| vec![format!("p{}", p + 1), norm.min[p].to_string(), norm.max[p].to_string()]);
            write(&out.with_file_name("normalizer.csv"), &to_csv(&["proxy", "min", "max"], bounds))?;
            run.echo("score")?;
            eprintln!("scored {} images into {}", samples.len(), out.display());
        }
        Command::GenPairs { seed, out } => {
            if let Some(s) = seed {
                run.cfg.degrade.seed = s;
            }
            let pairs = run.pairs()?;
            let dir = out.unwrap_or_else(|| run.path("pairs"));
            fs::create_dir_all(dir.join("lq"))?;
            for p in &pairs {
                write_pgm(&dir.join("lq").join(format!("{}.pgm", p.id)), &p.lq)?;
            }
            let rows = pairs.iter().map(|p| {
                vec![
                    p.id.clone(),
                    p.params.sigma.to_string(),
                    p.params.r.to_string(),
                    p.params.delta.to_string(),
                    p.params.q.to_string(),
                    p.seed.to_string(),
                    p.report.ensemble.to_string(),
                    p.report.bin.to_string(),
                ]
            });
            let header = ["image_id", "sigma", "r", "delta", "q", "seed", "hq_ensemble", "hq_bin"];
            write(&dir.join("pairs.csv"), &to_csv(&header, rows))?;
            run.echo("gen-pairs")?;
            eprintln!("wrote {} pairs to {}", pairs.len(), dir.display());
        }
        Command::TrainStage1 { steps, seed, single_codebook, out } => {
            if let Some(s) = steps {
                run.cfg.stage1.steps = s;
            }
            if let Some(s) = seed {
                run.cfg.stage1.seed = s;
            }
            if single_codebook {
                run.cfg.stage1.dual_codebook = false;
            }
            let (norm, samples) = run.scored()?;
            let (train, _) = split_holdout(&samples, run.cfg.eval_count)?;
            let dir = out.unwrap_or_else(|| run.path("stage1"));
            let res = train_stage1(train, &norm, &run.cfg.stage1, TransformerConfig::default())?;
            save_pipeline(&res.pipeline, &dir.join("final.ckpt"))?;
            write(&dir.join("curve.csv"), &to_csv(&Stage1Record::HEADER, res.curve.iter().map(Stage1Record::fields)))?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            run.echo("train-stage1")?;
            eprintln!("stage I: {} steps, checkpoint in {}", res.curve.len(), dir.display());
        }
        Command::TrainStage2 { stage1, steps, seed, out } => {
            if let Some(s) = steps {
                run.cfg.stage2.steps = s;
            }
            if let Some(s) = seed {
                run.cfg.stage2.seed = s;
            }
            let base = load_pipeline(&stage1.unwrap_or_else(|| run.path("stage1/final.ckpt")))?;
            let pairs = run.pairs()?;
            let (train, _) = run.pair_split(&pairs)?;
            let dir = out.unwrap_or_else(|| run.path("stage2"));
            let res = train_stage2(&train, &run.cfg.stage2, &base)?;
            save_pipeline(&res.pipeline, &dir.join("final.ckpt"))?;
            write(&dir.join("curve.csv"), &to_csv(&Stage2Record::HEADER, res.curve.iter().map(Stage2Record::fields)))?;
            run.echo("train-stage2")?;
            eprintln!("stage II: {} steps, checkpoint in {}", res.curve.len(), dir.display());
        }
        Command::Restore { model, input, bin, out } => {
            let pipe = run.model(&model)?;
            let lq = read_pgm(&input).with_context(|| format!("reading {}", input.display()))?;
            let img = pipe.restore(&lq, bin)?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            write_pgm(&out, &img)?;
        }
        Command::OptimizeQuality { model, input, bin, mode, steps, step_size, out } => {
            let pipe = run.model(&model)?;
            let lq = read_pgm(&input).with_context(|| format!("reading {}", input.display()))?;
            let steps = steps.unwrap_or(run.cfg.opt_steps);
            let trace = match mode {
                Mode::Continuous => {
                    optimize_quality_continuous(&pipe, &lq, bin, steps, step_size.unwrap_or(run.cfg.opt_step_size))?
                }
                Mode::Discrete => optimize_quality_discrete(&pipe, &lq, bin, steps)?,
            };
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            write_pgm(&out, &trace.image)?;
            let rows = trace
                .train_trace
                .iter()
                .zip(&trace.holdout_trace)
                .enumerate()
                .map(|(i, (t, h))| vec![i.to_string(), t.to_string(), h.to_string()]);
            write(&out.with_extension("csv"), &to_csv(&["step", "train_score", "holdout_score"], rows))?;
            eprintln!(
                "train score {:.4} -> {:.4}, held-out {:.4} -> {:.4}",
                trace.train_trace[0],
                trace.final_train(),
                trace.holdout_trace[0],
                trace.final_holdout()
            );
        }
        Command::Eval { model, bins, out } => {
            let pipe = run.model(&model)?;
            let pairs = run.pairs()?;
            let (_, eval) = run.pair_split(&pairs)?;
            let rows = evaluate(&pipe, &eval, &bins)?;
            let out = out.unwrap_or_else(|| run.path("eval/eval.csv"));
            write(&out, &eval_csv(&rows, eval.len()))?;
            run.echo("eval")?;
            for r in &rows {
                eprintln!("bin {}: ensemble {:.4}  l1 {:.4}", r.bin, r.ensemble_mean, r.l1);
            }
        }
        Command::OveroptExperiment { model, count, out } => {
            let pipe = run.model(&model)?;
            let pairs = run.pairs()?;
            let (_, eval) = run.pair_split(&pairs)?;
            if count == 0 || count > eval.len() {
                bail!("--count must be in 1..={}", eval.len());
            }
            let dir = out.unwrap_or_else(|| run.path("overopt"));
            let (traces, summary) = overopt(&pipe, &eval[..count], &run.cfg)?;
            write(&dir.join("traces.csv"), &traces)?;
            write(&dir.join("summary.csv"), &summary)?;
            run.echo("overopt-experiment")?;
            eprintln!("wrote {} and {}", dir.join("traces.csv").display(), dir.join("summary.csv").display());
        }
        Command::Ablate { seed, stage1, out } => {
            if let Some(s) = seed {
                run.cfg.stage1.seed = s;
                run.cfg.stage2.seed = s;
            }
            let dir = out.unwrap_or_else(|| run.path("ablation"));
            let (norm, samples) = run.scored()?;
            let (hq_train, _) = split_holdout(&samples, run.cfg.eval_count)?;
            let stage1_path = stage1.or_else(|| Some(run.path("stage1/final.ckpt")).filter(|p| p.exists()));
            let dual = match stage1_path {
                Some(p) => load_pipeline(&p)?,
                None => {
                    let cfg = iqvq::config::Stage1Config { dual_codebook: true, ..run.cfg.stage1.clone() };
                    let p = train_stage1(hq_train, &norm, &cfg, TransformerConfig::default())?.pipeline;
                    save_pipeline(&p, &dir.join("stage1_dual.ckpt"))?;
                    p
                }
            };
            let single_cfg = iqvq::config::Stage1Config { dual_codebook: false, ..run.cfg.stage1.clone() };
            let single = train_stage1(hq_train, &norm, &single_cfg, TransformerConfig::default())?.pipeline;
            save_pipeline(&single, &dir.join("stage1_single.ckpt"))?;
            let pairs = make_pairs(&samples, &run.cfg.degrade)?;
            let (train, eval) = run.pair_split(&pairs)?;
            let rows = run_ablation(&single, &dual, &train, &eval, &run.cfg.stage2)?;
            write(&dir.join("ablation.csv"), &AblationRow::csv(&rows))?;
            run.echo("ablate")?;
            for r in &rows {
                eprintln!("{}: bin-9 ensemble {:.4}", r.variant.name, r.ensemble_bin9);
            }
        }
    }
    Ok(())
}

/// Runs both optimizers on every input. Returns the paired per-step traces
/// and a one-row-per-input summary, both as CSV.
fn overopt(pipe: &Pipeline, inputs: &[Pair], cfg: &RunConfig) -> Result<(String, String)> {
    let mut trace_rows = Vec::new();
    let mut summary_rows = Vec::new();
    for pair in inputs {
        let c = optimize_quality_continuous(pipe, &pair.lq, 9, cfg.opt_steps, cfg.opt_step_size)?;
        let d = optimize_quality_discrete(pipe, &pair.lq, 9, cfg.opt_steps)?;
        let cell = |t: &OptimizeTrace, i: usize| {
            let pick = |v: &[f64]| v.get(i).map(f64::to_string).unwrap_or_default();
            [pick(&t.train_trace), pick(&t.holdout_trace)]
        };
        for i in 0..c.train_trace.len().max(d.train_trace.len()) {
            let mut row = vec![pair.id.clone(), i.to_string()];
            row.extend(cell(&c, i));
            row.extend(cell(&d, i));
            trace_rows.push(row);
        }
        let cr = c.final_holdout() / c.holdout_trace[0];
        let dr = d.final_holdout() / d.holdout_trace[0];
        summary_rows.push(vec![
            pair.id.clone(),
            c.final_train().to_string(),
            d.final_train().to_string(),
            cr.to_string(),
            dr.to_string(),
            (c.final_train() >= d.final_train()).to_string(),
            (cr < 0.9 && (dr - 1.0).abs() <= 0.1).to_string(),
        ]);
    }
    let traces = to_csv(
        &["image_id", "step", "continuous_train", "continuous_holdout", "discrete_train", "discrete_holdout"],
        trace_rows,
    );
    let summary = to_csv(
        &[
            "image_id",
            "continuous_train_final",
            "discrete_train_final",
            "continuous_holdout_ratio",
            "discrete_holdout_ratio",
            "train_continuous_ge_discrete",
            "holdout_contrast",
        ],
        summary_rows,
    );
    Ok((traces, summary))
}
