//! Central-difference verification oracle for analytic gradients.
//!
//! Runs in f64 only: finite differences are unreliable in single precision.
//! For each parameter tensor a random subsample of coordinates is perturbed
//! by ±h (scaled per coordinate), and the symmetric difference quotient is
//! compared against the analytic gradient from one backward pass.

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.per_param.iter().all(|p| p.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for p in &self.per_param {
            s.push_str(&format!(
                "{} {:24} coords={:3} max_rel_err={:.3e}\n",
                if p.pass { "ok  " } else { "FAIL" },
                p.name,
                p.coords_checked,
                p.max_rel_err
            ));
        }
        s
    }
}

pub const MAX_COORDS_PER_PARAM: usize = 64;

/// Compare analytic gradients against central differences.
///
/// `loss_fn` must be a pure function of the parameter set (fresh tape per
/// call). `grads` is the analytic gradient per parameter, in `ParamId` order,
/// `None` where no gradient flowed (checked against a zero difference
/// quotient). Failures are reported, never thrown.
pub fn grad_check(
    params: &mut ParamSet<f64>,
    loss_fn: &mut dyn FnMut(&ParamSet<f64>) -> Result<f64>,
    grads: &[Option<Tensor<f64>>],
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    assert_eq!(grads.len(), params.len());
    let mut report = GradCheckReport { per_param: Vec::new(), tol };

    for id in params.ids().collect::<Vec<_>>() {
        let numel = params.tensor(id).numel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.index() as u64).wrapping_mul(0x9e3779b9));
        let coords: Vec<usize> = if numel <= MAX_COORDS_PER_PARAM {
            (0..numel).collect()
        } else {
            // sample without replacement
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < MAX_COORDS_PER_PARAM {
                picked.insert(rng.gen_range(0..numel));
            }
            picked.into_iter().collect()
        };

        let mut max_rel = 0.0f64;
        for &ci in &coords {
            let theta = params.tensor(id).data()[ci];
            let hi = h * theta.abs().max(1.0);

            params.tensor_mut(id).data_mut()[ci] = theta + hi;
            let fp = loss_fn(params)?;
            params.tensor_mut(id).data_mut()[ci] = theta - hi;
            let fm = loss_fn(params)?;
            params.tensor_mut(id).data_mut()[ci] = theta;

            let numeric = (fp - fm) / (2.0 * hi);
            let analytic = grads[id.index()]
                .as_ref()
                .map(|g| g.data()[ci])
                .unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }

        report.per_param.push(ParamCheck {
            name: params.name(id).to_string(),
            coords_checked: coords.len(),
            max_rel_err: max_rel,
            pass: max_rel <= tol,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn quadratic_form_passes_tight_tolerance() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.register(
            "x",
            Tensor::new(vec![1, 3], vec![0.7, -1.2, 2.5]).unwrap(),
            false,
        );

        // f = 0.5·Σ x², analytic gradient = x
        let mut loss_fn = |p: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let xv = tape.param_var(p, x);
            let sq = tape.mul(xv, xv)?;
            let s = tape.sum_all(sq);
            let l = tape.scale(s, 0.5);
            Ok(tape.value(l).data()[0])
        };
        let grads = vec![Some(ps.tensor(x).clone())];
        let report = grad_check(&mut ps, &mut loss_fn, &grads, 1e-6, 1e-6, 7).unwrap();
        assert!(report.pass(), "{}", report.summary());
    }

    #[test]
    fn softmax_cross_entropy_matches_p_minus_onehot() {
        let mut ps = ParamSet::<f64>::new();
        let logits = ps.register(
            "logits",
            Tensor::new(vec![1, 4], vec![0.3, -0.8, 1.4, 0.1]).unwrap(),
            false,
        );
        let target = 2u32;

        let mut loss_fn = |p: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let lv = tape.param_var(p, logits);
            let ce = tape.cross_entropy_mean(lv, vec![0], vec![target])?;
            Ok(tape.value(ce).data()[0])
        };

        // analytic: p − onehot
        let row = ps.tensor(logits).data().to_vec();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let grad: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, v)| v.exp() / z - if i == target as usize { 1.0 } else { 0.0 })
            .collect();
        let grads = vec![Some(Tensor::new(vec![1, 4], grad).unwrap())];

        let report = grad_check(&mut ps, &mut loss_fn, &grads, 1e-6, 1e-5, 11).unwrap();
        assert!(report.pass(), "{}", report.summary());
    }
}
