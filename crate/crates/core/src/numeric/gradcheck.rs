use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all entries.
///
/// `f` records its computation on the supplied tape, reading its inputs from
/// the given variables (one per tensor in `params`), and returns the scalar
/// output.
pub fn check_gradients<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = params.iter().map(|t| (0..t.len()).collect()).collect();
    check_entries(f, params, eps, &all)
}

/// Like [`check_gradients`], but probes at most `per_tensor` entries of each
/// tensor, chosen by a seeded draw without replacement. Meant for whole-model
/// losses where probing every weight would take too long.
pub fn check_gradients_sampled<F>(f: F, params: &[Tensor], eps: f64, per_tensor: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = params
        .iter()
        .map(|t| {
            let mut idx = rand::seq::index::sample(&mut rng, t.len(), per_tensor.min(t.len())).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_entries(f, params, eps, &picks)
}

fn check_entries<F>(f: F, params: &[Tensor], eps: f64, entries: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |values: &[Tensor]| -> Result<(f64, Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Shape("gradient check needs a scalar output".into()));
        }
        let item = v.item();
        Ok((item, tape, vars, out))
    };

    let (base, tape, vars, out) = eval(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite { param: 0, entry: 0 });
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for &e in &entries[p] {
            let orig = params[p].data()[e];
            probe[p].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?.0;
            probe[p].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?.0;
            probe[p].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { param: p, entry: e });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e];
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
