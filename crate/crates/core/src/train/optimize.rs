use super::pipeline::Pipeline;
use crate::error::{Error, Result};
use crate::models::NUM_TOKENS;
use crate::numeric::{Tape, Tensor};
use crate::quality::holdout_score;

/// Final image plus per-step scores. Entry 0 of each trace scores the plain
/// restoration; later entries follow each accepted step (continuous) or
/// each sweep (discrete).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeTrace {
    pub image: Tensor,
    pub train_trace: Vec<f64>,
    pub holdout_trace: Vec<f64>,
}

impl OptimizeTrace {
    pub fn final_train(&self) -> f64 {
        *self.train_trace.last().expect("trace starts non-empty")
    }

    pub fn final_holdout(&self) -> f64 {
        *self.holdout_trace.last().expect("trace starts non-empty")
    }
}

const INITIAL_STEP_FLOOR: f64 = 1e-6;

fn objective_and_grad(pipe: &Pipeline, z: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let dec = pipe.model.decoder.params.bind(&mut tape, false);
    let zv = tape.param(z.clone());
    let x = pipe.model.decoder.forward(&mut tape, &dec, zv)?;
    let s = pipe.normalizer.ensemble_var(&mut tape, x)?;
    let value = tape.value(s).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    let grads = tape.backward(s)?;
    Ok((value, grads.wrt(zv), tape.value(x).clone()))
}

/// Gradient ascent on the ensemble score directly in the fused latent,
/// starting from the restoration latent. Each step moves `eta` along the
/// normalized gradient; `eta` starts at `step_size` and halves whenever a
/// move fails to improve the score. Stops after `steps` accepted moves or
/// once `eta` falls below 1e-6.
pub fn optimize_quality_continuous(
    pipe: &Pipeline,
    lq: &Tensor,
    bin: usize,
    steps: usize,
    step_size: f64,
) -> Result<OptimizeTrace> {
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::Argument(format!("step size {step_size} must be positive")));
    }
    let (c1, c2) = pipe.predict_codes(lq, bin)?;
    let mut z = pipe.fused_latent(&c1, &c2)?;
    let (mut score, mut grad, mut image) = objective_and_grad(pipe, &z)?;
    let mut train_trace = vec![score];
    let mut holdout_trace = vec![holdout_score(&image)?];
    let mut eta = step_size;
    'steps: for _ in 0..steps {
        let norm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        loop {
            let cand = Tensor::new(z.shape(), z.data().iter().zip(grad.data()).map(|(a, g)| a + eta * g / norm).collect())?;
            let (s, g, x) = objective_and_grad(pipe, &cand)?;
            if s > score {
                (z, score, grad, image) = (cand, s, g, x);
                break;
            }
            eta *= 0.5;
            if eta < INITIAL_STEP_FLOOR {
                break 'steps;
            }
        }
        train_trace.push(score);
        holdout_trace.push(holdout_score(&image)?);
    }
    Ok(OptimizeTrace { image, train_trace, holdout_trace })
}

/// Greedy coordinate ascent over code indices. A sweep visits the 16
/// positions of the common codes, then of the HQ+ codes, and at each
/// position keeps the entry with the best decoded ensemble score (changing
/// only on strict improvement). Stops after `steps` sweeps or after a sweep
/// without change.
pub fn optimize_quality_discrete(pipe: &Pipeline, lq: &Tensor, bin: usize, steps: usize) -> Result<OptimizeTrace> {
    let (mut c1, mut c2) = pipe.predict_codes(lq, bin)?;
    let eval = |c1: &[usize], c2: &[usize]| -> Result<(f64, Tensor)> {
        let x = pipe.model.decoder.decode(&pipe.fused_latent(c1, c2)?)?;
        Ok((pipe.normalizer.ensemble_objective(&x)?, x))
    };
    let (mut best, mut image) = eval(&c1, &c2)?;
    let mut train_trace = vec![best];
    let mut holdout_trace = vec![holdout_score(&image)?];
    for _ in 0..steps {
        let mut changed = false;
        let books: &[(bool, usize)] =
            &[(true, pipe.model.common.size()), (false, pipe.model.hq_plus.size())];
        for &(first, size) in books {
            if !first && !pipe.dual_codebook {
                continue;
            }
            for pos in 0..NUM_TOKENS {
                for k in 0..size {
                    let codes = if first { &mut c1 } else { &mut c2 };
                    let old = codes[pos];
                    if k == old {
                        continue;
                    }
                    codes[pos] = k;
                    let (s, x) = eval(&c1, &c2)?;
                    if s > best {
                        best = s;
                        image = x;
                        changed = true;
                    } else {
                        let codes = if first { &mut c1 } else { &mut c2 };
                        codes[pos] = old;
                    }
                }
            }
        }
        train_trace.push(best);
        holdout_trace.push(holdout_score(&image)?);
        if !changed {
            break;
        }
    }
    Ok(OptimizeTrace { image, train_trace, holdout_trace })
}
