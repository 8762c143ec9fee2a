use super::data::Pair;
use super::pipeline::Pipeline;
use super::to_csv;
use crate::error::{Error, Result};
use crate::quality::{holdout_score, NUM_PROXIES};
use crate::vq::utilization;

/// Restoration metrics over an evaluation set at one condition bin.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub bin: usize,
    /// Mean and population std of each normalized proxy.
    pub proxy_mean: [f64; NUM_PROXIES],
    pub proxy_std: [f64; NUM_PROXIES],
    pub ensemble_mean: f64,
    pub ensemble_std: f64,
    pub holdout_mean: f64,
    /// Mean absolute error against the HQ ground truth.
    pub l1: f64,
    /// Top-1 agreement of predicted codes with the HQ target codes.
    pub code_acc_common: f64,
    pub code_acc_hq_plus: f64,
    /// Fraction of each codebook's entries predicted at least once.
    pub util_common: f64,
    pub util_hq_plus: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn agreement(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x == y).count()
}

/// Restores every pair at each requested bin and aggregates the metrics,
/// one row per bin in the order given.
pub fn evaluate(pipe: &Pipeline, set: &[Pair], bins: &[usize]) -> Result<Vec<EvalRow>> {
    if set.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let targets = set.iter().map(|p| pipe.target_codes(&p.hq)).collect::<Result<Vec<_>>>()?;
    bins.iter()
        .map(|&bin| {
            let mut proxies = vec![Vec::with_capacity(set.len()); NUM_PROXIES];
            let mut ens = Vec::with_capacity(set.len());
            let mut hold = Vec::with_capacity(set.len());
            let (mut l1, mut hit1, mut hit2) = (0.0, 0, 0);
            let (mut all1, mut all2) = (Vec::new(), Vec::new());
            for (pair, (t1, t2)) in set.iter().zip(&targets) {
                let (c1, c2) = pipe.predict_codes(&pair.lq, bin)?;
                let out = pipe.model.decoder.decode(&pipe.fused_latent(&c1, &c2)?)?;
                let rep = pipe.normalizer.score(&out)?;
                for (p, v) in rep.normalized.iter().enumerate() {
                    proxies[p].push(*v);
                }
                ens.push(rep.ensemble);
                hold.push(holdout_score(&out)?);
                l1 += out.data().iter().zip(pair.hq.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.len() as f64;
                hit1 += agreement(&c1, t1);
                hit2 += agreement(&c2, t2);
                all1.extend(c1);
                all2.extend(c2);
            }
            let n = set.len() as f64;
            let tokens = all1.len() as f64;
            let stats: Vec<(f64, f64)> = proxies.iter().map(|p| mean_std(p)).collect();
            let (ensemble_mean, ensemble_std) = mean_std(&ens);
            Ok(EvalRow {
                bin,
                proxy_mean: std::array::from_fn(|p| stats[p].0),
                proxy_std: std::array::from_fn(|p| stats[p].1),
                ensemble_mean,
                ensemble_std,
                holdout_mean: hold.iter().sum::<f64>() / n,
                l1: l1 / n,
                code_acc_common: hit1 as f64 / tokens,
                code_acc_hq_plus: hit2 as f64 / tokens,
                util_common: utilization(&all1, pipe.model.common.size()),
                util_hq_plus: utilization(&all2, pipe.model.hq_plus.size()),
            })
        })
        .collect()
}

pub const EVAL_HEADER: [&str; 16] = [
    "bin",
    "p1_mean",
    "p1_std",
    "p2_mean",
    "p2_std",
    "p3_mean",
    "p3_std",
    "ensemble_mean",
    "ensemble_std",
    "holdout_mean",
    "l1",
    "code_acc_common",
    "code_acc_hq_plus",
    "util_common",
    "util_hq_plus",
    "count",
];

/// CSV rendering of [`evaluate`] output; `count` is the evaluation-set size.
pub fn eval_csv(rows: &[EvalRow], count: usize) -> String {
    to_csv(
        &EVAL_HEADER,
        rows.iter().map(|r| {
            let mut f = vec![r.bin.to_string()];
            for p in 0..NUM_PROXIES {
                f.push(r.proxy_mean[p].to_string());
                f.push(r.proxy_std[p].to_string());
            }
            f.extend(
                [
                    r.ensemble_mean,
                    r.ensemble_std,
                    r.holdout_mean,
                    r.l1,
                    r.code_acc_common,
                    r.code_acc_hq_plus,
                    r.util_common,
                    r.util_hq_plus,
                ]
                .map(|v| v.to_string()),
            );
            f.push(count.to_string());
            f
        }),
    )
}
