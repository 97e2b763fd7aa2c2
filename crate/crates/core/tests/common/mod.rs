//! Shared helpers for the integration tests and the acceptance runner.
#![allow(dead_code)]

use cs2_core::gan::{
    generator_loss, Discriminator, Generator, GeneratorArch, LeastSquares, LossWeights,
    StyleExtractor,
};
use cs2_core::numerics::{grad_check_params, ParamStore, Tape, Tensor, Var, NORM_EPS};
use cs2_core::seed;
use cs2_core::Result;

pub const H: f64 = 1e-5;

/// Contracts `out` against fixed random weights so every output element
/// contributes a distinct amount to the scalar loss.
fn contract(tape: &mut Tape, out: Var, salt: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut seed::rng(1000 + salt));
    let wv = tape.leaf(w);
    let m = tape.mul(out, wv)?;
    Ok(tape.sum(m))
}

fn store(tensors: &[(&str, Tensor)]) -> ParamStore {
    let mut p = ParamStore::new();
    for (n, t) in tensors {
        p.push(*n, t.clone());
    }
    p
}

fn uni(shape: &[usize], s: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut seed::rng(s))
}

/// Away from zero so ReLU-family kinks sit far outside the probe step.
fn off_zero(shape: &[usize], s: u64) -> Tensor {
    let mut t = uni(shape, s);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

type Case = (&'static str, ParamStore, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn cases() -> Vec<Case> {
    let x = uni(&[3, 5, 6], 1);
    let targets: Vec<usize> = (0..30).map(|i| (i * 7) % 3).collect();
    vec![
        (
            "conv2d stride 1 pad 1",
            store(&[("x", uni(&[2, 5, 6], 2)), ("w", uni(&[3, 2, 3, 3], 3)), ("b", uni(&[3], 4))]),
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                contract(t, y, 1)
            }),
        ),
        (
            "conv2d stride 2 pad 1",
            store(&[("x", uni(&[2, 6, 6], 5)), ("w", uni(&[3, 2, 3, 3], 6))]),
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1)?;
                contract(t, y, 2)
            }),
        ),
        (
            "conv2d pointwise",
            store(&[("x", uni(&[4, 1, 7], 7)), ("w", uni(&[3, 4, 1, 1], 8)), ("b", uni(&[3], 9))]),
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
                contract(t, y, 3)
            }),
        ),
        ("relu", store(&[("x", off_zero(&[2, 3, 4], 10))]), Box::new(|t, v| {
            let y = t.relu(v[0]);
            contract(t, y, 4)
        })),
        ("leaky_relu", store(&[("x", off_zero(&[2, 3, 4], 11))]), Box::new(|t, v| {
            let y = t.leaky_relu(v[0], 0.2);
            contract(t, y, 5)
        })),
        ("sigmoid", store(&[("x", uni(&[2, 3, 4], 12))]), Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            contract(t, y, 6)
        })),
        ("softplus", store(&[("x", uni(&[2, 3, 4], 13))]), Box::new(|t, v| {
            let y = t.softplus(v[0]);
            contract(t, y, 7)
        })),
        (
            "add",
            store(&[("a", uni(&[2, 3, 4], 14)), ("b", uni(&[2, 3, 4], 15))]),
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                contract(t, y, 8)
            }),
        ),
        (
            "mul",
            store(&[("a", uni(&[2, 3, 4], 16)), ("b", uni(&[2, 3, 4], 17))]),
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                contract(t, y, 9)
            }),
        ),
        ("scale", store(&[("x", uni(&[2, 3, 4], 18))]), Box::new(|t, v| {
            let y = t.scale(v[0], -1.7);
            contract(t, y, 10)
        })),
        ("sum", store(&[("x", uni(&[2, 3, 4], 19))]), Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        })),
        ("mean", store(&[("x", uni(&[2, 3, 4], 20))]), Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        })),
        (
            "mse",
            store(&[("a", uni(&[2, 3, 4], 21)), ("b", uni(&[2, 3, 4], 22))]),
            Box::new(|t, v| t.mse(v[0], v[1])),
        ),
        (
            "cross_entropy",
            store(&[("logits", uni(&[3, 5, 6], 23))]),
            Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
        ),
        ("instance_norm", store(&[("x", x.clone())]), Box::new(|t, v| {
            let y = t.instance_norm(v[0], NORM_EPS)?;
            contract(t, y, 11)
        })),
        ("channel_mean", store(&[("x", uni(&[3, 4, 4], 24))]), Box::new(|t, v| {
            let y = t.channel_mean(v[0])?;
            contract(t, y, 12)
        })),
        ("channel_std", store(&[("x", uni(&[3, 4, 4], 25))]), Box::new(|t, v| {
            let y = t.channel_std(v[0], NORM_EPS)?;
            contract(t, y, 13)
        })),
        (
            "channel_affine",
            store(&[("x", uni(&[3, 4, 4], 26)), ("s", uni(&[3], 27)), ("b", uni(&[3], 28))]),
            Box::new(|t, v| {
                let y = t.channel_affine(v[0], v[1], v[2])?;
                contract(t, y, 14)
            }),
        ),
        (
            "adain",
            store(&[("content", uni(&[3, 4, 5], 29)), ("style", uni(&[3, 6, 6], 30))]),
            Box::new(|t, v| {
                let y = t.adain(v[0], v[1], NORM_EPS)?;
                contract(t, y, 15)
            }),
        ),
        ("upsample2", store(&[("x", uni(&[2, 3, 4], 31))]), Box::new(|t, v| {
            let y = t.upsample2(v[0])?;
            contract(t, y, 16)
        })),
        ("gram", store(&[("x", uni(&[3, 4, 5], 32))]), Box::new(|t, v| {
            let y = t.gram(v[0])?;
            contract(t, y, 17)
        })),
    ]
}

/// Worst relative finite-difference error of every differentiable op.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|(name, params, f)| {
            let err = grad_check_params(|t, v| f(t, v), &params, H, None, 0)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, err)
        })
        .collect()
}

/// Worst error of the full weighted generator loss on a 16x16 slab, probing
/// a seeded sample of every generator parameter tensor.
pub fn composed_generator_error() -> f64 {
    let arch = GeneratorArch {
        channels: 2,
        encoder_widths: vec![4, 6],
        n_resblocks: 1,
    };
    let gen = Generator::new(arch, 3).unwrap();
    let disc = Discriminator::new(2, &[4, 4], 4).unwrap();
    let ext = StyleExtractor::new(2, 5);
    let mut rng = seed::rng(6);
    let guidance = Tensor::uniform(&[2, 16, 16], 0.0, 1.0, &mut rng);
    let reference = Tensor::uniform(&[2, 16, 16], 0.0, 1.0, &mut rng);
    let weights = LossWeights::default();
    grad_check_params(
        |tape, vars| {
            let g = tape.leaf(guidance.clone());
            let r = tape.leaf(reference.clone());
            let fwd = gen.forward(tape, vars, g, r)?;
            let dv = disc.params.bind_frozen(tape);
            let (loss, ..) =
                generator_loss(tape, &LeastSquares, &disc, &dv, &ext, &weights, fwd.output, r, g)?;
            Ok(loss)
        },
        &gen.params,
        H,
        Some(6),
        11,
    )
    .unwrap()
}
