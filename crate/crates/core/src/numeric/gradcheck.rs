//! Central finite-difference validation of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; tensors smaller than this are checked exhaustively.
    pub samples_per_tensor: usize,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to rounding are compared absolutely.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 20,
            denom_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<24} n={:<4} max_rel={:.3e} (analytic {:.6e}, numeric {:.6e})",
                t.name, t.checked, t.max_rel_error, t.worst_analytic, t.worst_numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare tape gradients against central differences.
///
/// `forward` builds a scalar loss on a fresh tape from the given parameters.
/// It is evaluated twice up front; differing values mean the forward is not
/// deterministic (dropout left on, say) and the check refuses to run.
pub fn finite_diff_check<F>(params: &mut ParamSet, mut forward: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(Tape, Var)>,
{
    let (tape, loss) = forward(params)?;
    let first = tape.value(loss).item();
    let (_, loss2) = {
        let (t2, l2) = forward(params)?;
        let v = t2.value(l2).item();
        (t2, v)
    };
    if first.to_bits() != loss2.to_bits() {
        return Err(Error::NonDeterministic { first, second: loss2 });
    }

    params.zero_grad();
    tape.backward(loss, params)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut eval = |ps: &ParamSet| -> Result<f64> {
        let (t, l) = forward(ps)?;
        Ok(t.value(l).item())
    };

    let ids: Vec<_> = params.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let p = params.get(id);
        let candidates: Vec<usize> = (0..p.value.numel()).filter(|&i| !p.is_frozen(i)).collect();
        let coords: Vec<usize> = if candidates.len() <= opts.samples_per_tensor {
            candidates
        } else {
            let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), opts.samples_per_tensor)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            picked.sort_unstable();
            picked
        };

        let mut check = TensorCheck {
            name: p.name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in coords {
            let analytic = params.grad(id).data()[i];
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic, numeric, opts.denom_floor);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.worst_analytic = analytic;
                check.worst_numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: opts.tolerance,
    })
}
