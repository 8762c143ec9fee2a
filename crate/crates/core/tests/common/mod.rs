#![allow(dead_code)]

use iqvq::models::Model;
use iqvq::numeric::{Tape, Tensor, Unary, Var};
use iqvq::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Recorder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable kernel, reduced to a scalar through a fixed random
/// projection so every output entry contributes a distinct weight.
pub struct KernelCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Recorder,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let half = (hi - lo) / 2.0;
    Tensor::uniform(shape, half, rng).map(|v| v + lo + half)
}

/// Values bounded away from zero with random signs: keeps |x| and sqrt
/// off their kinks.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, -1.0, 1.0, rng).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

/// `sum(w ⊙ y)` for a fixed seeded weight tensor matching `y`.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(uniform(&shape, -1.0, 1.0, &mut rng(seed)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// SHA-256 over the exact bits of both codebooks and every decoder tensor.
pub fn frozen_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    let tensors = [&model.common.entries, &model.hq_plus.entries].into_iter().chain(model.decoder.params.tensors());
    for t in tensors {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> KernelCase {
    KernelCase { name, inputs, f: Box::new(f) }
}

/// Every differentiable primitive of the tape on small seeded inputs.
/// `straight_through` is excluded: its backward pass is deliberately not
/// the derivative of its forward pass.
pub fn kernel_cases() -> Vec<KernelCase> {
    let r = &mut rng(2024);
    let m34 = || uniform(&[3, 4], -1.0, 1.0, &mut rng(11));
    let m34b = || uniform(&[3, 4], -1.0, 1.0, &mut rng(12));
    let img = uniform(&[6, 6, 2], -1.0, 1.0, r);
    let kern3 = uniform(&[3, 3, 2, 3], -0.5, 0.5, r);
    let kern2 = uniform(&[2, 2, 2, 2], -0.5, 0.5, r);
    let unary = |name: &'static str, u: Unary, x: Tensor| {
        case(name, vec![x], move |t, v| {
            let y = t.unary(v[0], u);
            project(t, y, 1)
        })
    };
    vec![
        case("add", vec![m34(), m34b()], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 1)
        }),
        case("sub", vec![m34(), m34b()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 1)
        }),
        case("mul", vec![m34(), m34b()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 1)
        }),
        case("scale", vec![m34()], |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, 1)
        }),
        case("add_const", vec![m34()], |t, v| {
            let y = t.add_const(v[0], 0.3);
            let y = t.square(y);
            project(t, y, 1)
        }),
        case("add_scalar_var", vec![m34(), Tensor::scalar(0.4)], |t, v| {
            let y = t.add_scalar_var(v[0], v[1])?;
            let y = t.square(y);
            project(t, y, 1)
        }),
        case("mul_scalar_var", vec![m34(), Tensor::scalar(-0.6)], |t, v| {
            let y = t.mul_scalar_var(v[0], v[1])?;
            project(t, y, 1)
        }),
        case("add_bias", vec![img.clone(), uniform(&[2], -1.0, 1.0, r)], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let y = t.square(y);
            project(t, y, 1)
        }),
        unary("silu", Unary::Silu, uniform(&[3, 4], -3.0, 3.0, r)),
        unary("sigmoid", Unary::Sigmoid, uniform(&[3, 4], -3.0, 3.0, r)),
        unary("tanh", Unary::Tanh, uniform(&[3, 4], -2.0, 2.0, r)),
        unary("abs", Unary::Abs, away_from_zero(&[3, 4], r)),
        unary("square", Unary::Square, uniform(&[3, 4], -2.0, 2.0, r)),
        unary("sqrt", Unary::Sqrt, uniform(&[3, 4], 0.2, 2.0, r)),
        unary("softplus", Unary::Softplus, uniform(&[3, 4], -3.0, 3.0, r)),
        unary("exp", Unary::Exp, uniform(&[3, 4], -1.0, 1.0, r)),
        case("matmul", vec![m34(), uniform(&[4, 5], -1.0, 1.0, r)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        }),
        case("transpose", vec![m34()], |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, 1)
        }),
        case("conv2d_s1_p1", vec![img.clone(), kern3.clone()], |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1)?;
            project(t, y, 1)
        }),
        case("conv2d_s2_p1", vec![img.clone(), kern3], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            project(t, y, 1)
        }),
        case("conv2d_s2_p0", vec![img.clone(), kern2], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 0)?;
            project(t, y, 1)
        }),
        case("downsample_avg", vec![img.clone()], |t, v| {
            let y = t.downsample_avg(v[0], 2)?;
            project(t, y, 1)
        }),
        case("upsample_nearest", vec![uniform(&[3, 3, 2], -1.0, 1.0, r)], |t, v| {
            let y = t.upsample_nearest(v[0], 2)?;
            project(t, y, 1)
        }),
        case("softmax_rows", vec![uniform(&[3, 5], -2.0, 2.0, r)], |t, v| {
            let y = t.softmax_rows(v[0])?;
            project(t, y, 1)
        }),
        case("cross_entropy", vec![uniform(&[4, 5], -2.0, 2.0, r)], |t, v| t.cross_entropy(v[0], &[0, 3, 4, 1])),
        case(
            "layer_norm",
            vec![uniform(&[3, 6], -2.0, 2.0, r), uniform(&[6], 0.5, 1.5, r), uniform(&[6], -0.5, 0.5, r)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, 1)
            },
        ),
        case("sum", vec![m34()], |t, v| {
            let y = t.square(v[0]);
            Ok(t.sum(y))
        }),
        case("mean", vec![m34()], |t, v| {
            let y = t.square(v[0]);
            Ok(t.mean(y))
        }),
        case("reshape", vec![m34()], |t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            project(t, y, 1)
        }),
        case("slice_cols", vec![m34()], |t, v| {
            let y = t.slice_cols(v[0], 1, 2)?;
            project(t, y, 1)
        }),
        case("concat_cols", vec![m34(), uniform(&[3, 2], -1.0, 1.0, r)], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            project(t, y, 1)
        }),
        case("gather_rows", vec![uniform(&[5, 3], -1.0, 1.0, r)], |t, v| {
            let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            project(t, y, 1)
        }),
    ]
}
