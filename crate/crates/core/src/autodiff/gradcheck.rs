use crate::error::Result;

use super::params::ParamSet;
use super::tape::{Tape, Var};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its coordinates)
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(p+h) − f(p−h)) / 2h`, one coordinate at a time.
/// `f` receives a fresh tape and the bound parameter vars.
pub fn grad_check<F>(f: F, params: &ParamSet<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.bind(ps)?;
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars = tape.bind(params)?;
    let loss = f(&mut tape, &vars)?;
    let analytic = tape.backward(loss)?.for_params(&tape, &vars);

    let mut work = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..grad.len() {
            let orig = work.param(i).value.data()[j];
            work.param_mut(i).value.data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.param_mut(i).value.data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.param_mut(i).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
        per_param.push((params.param(i).name.clone(), worst));
    }
    Ok(GradCheckReport { per_param })
}
