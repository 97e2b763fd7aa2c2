//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Below this magnitude the error is effectively absolute: a central
/// difference of an exactly-zero gradient is round-off of order
/// `eps * |loss| / h`, around 1e-11.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central difference with step `h`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    store.push("x", x.clone());
    grad_check_params(|tape, vars| f(tape, vars[0]), &store, h, None, 0)
}

/// Like [`grad_check`] over every tensor of a [`ParamStore`].
///
/// With `per_tensor = Some(k)`, at most `k` coordinates per tensor are
/// probed, chosen by a seeded RNG; `None` probes all of them.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamStore,
    h: f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let grads = params.collect_grads(&tape.backward(loss)?, &vars);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = p.bind_frozen(&mut t);
        let l = f(&mut t, &v)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for ti in 0..params.len() {
        let n = params.get(ti).len();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = params.get(ti).data()[j];
            probe.get_mut(ti).data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(ti).data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(ti).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(grads[ti].data()[j], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly 0 has a one-sided derivative the central
        // difference averages to 0.5
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.relu(v);
                Ok(t.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
