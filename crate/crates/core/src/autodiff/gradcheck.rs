//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamHost, ParamId};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// How many elements of each parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many seeded-random elements per tensor.
    Sample { per_tensor: usize, seed: u64 },
}

/// Compares reverse-mode gradients of `loss` against central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every trainable parameter of `host`.
///
/// The relative error of one element is `|analytic − numeric| / max(1, |analytic|)`.
/// `loss` must be deterministic and bind parameters through
/// [`crate::params::ParamStore::bind`].
pub fn finite_difference_check<H, F>(
    host: &mut H,
    eps: f64,
    coverage: Coverage,
    mut loss: F,
) -> Result<GradCheckReport>
where
    H: ParamHost<f64>,
    F: FnMut(&H, &mut Tape<f64>) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let out = loss(host, &mut tape)?;
    let base = tape.scalar(out);
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; host.params().len()];
    // A parameter bound more than once has one gradient per binding.
    for (pid, g) in grads.params() {
        match &mut analytic[pid] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }
    drop(tape);
    let mut eval = |host: &H| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss(host, &mut tape)?;
        Ok(tape.scalar(v))
    };


    let ids: Vec<ParamId> = host.params().ids().collect();
    let mut report = GradCheckReport {
        loss: base,
        params: Vec::new(),
    };
    for id in ids {
        if !host.params().get(id).requires_grad() {
            continue;
        }
        let n = host.params().get(id).len();
        let ga = analytic[id.0].clone().unwrap_or_else(|| vec![0.0; n]);
        let elems: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { per_tensor, seed } if per_tensor < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut picked = sample(&mut rng, n, per_tensor).into_vec();
                picked.sort_unstable();
                picked
            }
            Coverage::Sample { .. } => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: host.params().name(id).to_string(),
            checked: elems.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut first = true;
        for i in elems {
            let orig = host.params().get(id).data()[i];
            host.params_mut().get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(host);
            host.params_mut().get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(host);
            host.params_mut().get_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at perturbed {}[{i}]",
                    host.params().name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (ga[i] - numeric).abs() / ga[i].abs().max(1.0);
            if first || rel > check.max_rel_error {
                first = false;
                check.max_rel_error = rel;
                check.worst_index = i;
                check.analytic = ga[i];
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut t = Tensor::new(vec![values.len()], values).unwrap();
        t.set_requires_grad(true);
        s.insert("x", t).unwrap();
        s
    }

    #[test]
    fn sum_of_squares_is_near_exact() {
        let mut s = store(vec![0.5, -1.5, 2.0, 3.25]);
        let report = finite_difference_check(&mut s, 1e-4, Coverage::All, |s, tape| {
            let x = s.bind(tape, ParamId(0));
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(report.checked(), 4);
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn repeated_bindings_sum() {
        let mut s = store(vec![0.5, -1.5]);
        let report = finite_difference_check(&mut s, 1e-4, Coverage::All, |s, tape| {
            let a = s.bind(tape, ParamId(0));
            let b = s.bind(tape, ParamId(0));
            let ab = tape.mul(a, b)?;
            Ok(tape.sum(ab))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn zero_eps_is_rejected() {
        let mut s = store(vec![1.0]);
        let err = finite_difference_check(&mut s, 0.0, Coverage::All, |s, tape| {
            let x = s.bind(tape, ParamId(0));
            Ok(tape.sum(x))
        });
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_perturbation_is_reported() {
        // log is finite at x but not at x − eps.
        let mut s = store(vec![1e-5]);
        let err = finite_difference_check(&mut s, 1e-4, Coverage::All, |s, tape| {
            let x = s.bind(tape, ParamId(0));
            let l = tape.log(x);
            Ok(tape.sum(l))
        });
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn parameters_are_restored() {
        let mut s = store(vec![0.25, 0.75]);
        let before = s.clone();
        finite_difference_check(&mut s, 1e-3, Coverage::All, |s, tape| {
            let x = s.bind(tape, ParamId(0));
            let e = tape.exp(x);
            Ok(tape.sum(e))
        })
        .unwrap();
        assert_eq!(s, before);
    }
}
