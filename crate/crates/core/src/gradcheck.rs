//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Which coordinates of each parameter tensor to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// At most `per_tensor` coordinates per tensor, drawn with `seed`.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Max over coordinates of `|analytic - fd| / max(1e-8, |fd|)` with central
/// differences of half-width `step`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(grad_check_with(f, params, step, Coordinates::All)?.max_rel_error)
}

pub fn grad_check_with<F>(f: F, params: &[Tensor], step: f64, coords: Coordinates) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_steps(f, params, &[step], coords)
}

/// Like [`grad_check_with`], but each coordinate is scored by its best match
/// over several step sizes. For piecewise-linear activations a single step
/// can straddle a kink, which spoils that difference quotient but not the
/// smaller one; a wrong analytic gradient still fails at every step.
pub fn grad_check_steps<F>(f: F, params: &[Tensor], steps: &[f64], coords: Coordinates) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert!(!steps.is_empty(), "grad_check_steps needs at least one step");
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let v = loss.value().data()[0];
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match coords {
            Coordinates::All => (0..p.len()).collect(),
            Coordinates::Sample { per_tensor, seed } => {
                if p.len() <= per_tensor {
                    (0..p.len()).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9e37));
                    let mut picked = sample(&mut rng, p.len(), per_tensor).into_vec();
                    picked.sort_unstable();
                    picked
                }
            }
        };
        for i in coords {
            let orig = p.data()[i];
            let mut err = f64::INFINITY;
            for &step in steps {
                work[pi].data_mut()[i] = orig + step;
                let plus = eval(&work)?;
                work[pi].data_mut()[i] = orig - step;
                let minus = eval(&work)?;
                work[pi].data_mut()[i] = orig;
                let fd = (plus - minus) / (2.0 * step);
                err = err.min((analytic[pi].data()[i] - fd).abs() / fd.abs().max(1e-8));
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_fn(&[6], |i| i as f64 - 2.5);
        let w = Tensor::from_fn(&[6], |i| (i as f64).cos());
        let err = grad_check(|_, v| v[0].dot_const(&x), &[w], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(w) with the gradient scaled by a constant-valued sub-path removed
        let w = Tensor::from_fn(&[3], |i| 1.0 + i as f64);
        let err = grad_check(
            |tape, v| {
                let frozen = tape.constant((*v[0].value()).clone());
                v[0].mul(frozen).map(|y| y.sum())
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.4);
    }
}
