//! Central finite-difference verification of tape gradients, run in f64.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor4;

/// Denominator floor for relative errors; gradients below this magnitude are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in the order given.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e <= self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of the scalar `f(params)` with central
/// differences. The step for coefficient `θ` is `eps · max(1, |θ|)`.
///
/// `f` receives a fresh tape and one trainable [`Var`] per entry of
/// `params`, and returns the loss node.
pub fn grad_check<F>(f: F, params: &[Tensor4<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor4<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor4<f64>> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut worst = 0.0f64;
        for j in 0..params[i].len() {
            let theta = params[i].data()[j];
            let h = eps * theta.abs().max(1.0);
            work[i].data_mut()[j] = theta + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = theta - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = theta;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport { max_rel_error, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Layout;

    #[test]
    fn quadratic_passes_tightly() {
        let w = Tensor4::from_vec([1, 1, 1, 4], vec![0.5, -1.5, 2.0, 3.0], Layout::Nhwc).unwrap();
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[w],
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wrong_backward_rule_fails() {
        let w = Tensor4::from_vec([1, 1, 1, 3], vec![0.5, -1.5, 2.0], Layout::Nhwc).unwrap();
        let report = grad_check(
            |t, v| {
                let sq = t.value(v[0]).map(|x| x * x);
                // claims d(x²)/dx = x
                let y = t.custom(
                    &[v[0]],
                    sq,
                    Box::new(|g, inputs| vec![g.zip_map(inputs[0], |gv, x| gv * x).unwrap()]),
                );
                Ok(t.sum(y))
            },
            &[w],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.worst() > 0.4);
    }
}
