//! Central finite-difference verification of analytic gradients.

use crate::autodiff::matrix::Matrix;
use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;

/// Gradient norms below this are compared in absolute terms.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub name: String,
    /// Entries perturbed.
    pub checked: usize,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, floor)` over the
    /// checked entries.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.rel_err))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Options for [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Maximum entries perturbed per parameter; `None` checks all of them.
    pub max_entries: Option<usize>,
    pub names: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_entries: None,
            names: Vec::new(),
        }
    }
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` receives a fresh tape and one trainable leaf per entry of `params`
/// and must return a `1 x 1` node. It is re-evaluated twice per perturbed
/// entry, so it has to be a pure function of the leaf values.
pub fn finite_difference_check<F>(mut f: F, params: &[Matrix], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = params
        .iter()
        .zip(&vars)
        .map(|(p, v)| tape.grad(*v).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
        .collect();
    drop(tape);

    let mut eval = |values: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|p| t.leaf(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut work: Vec<Matrix> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let picks: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        let mut max_abs: f64 = 0.0;
        for &e in &picks {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + opts.h;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - opts.h;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let a = analytic[pi].data()[e];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt()).max(GRAD_NORM_FLOOR);
        checks.push(ParamCheck {
            index: pi,
            name: opts.names.get(pi).cloned().unwrap_or_else(|| format!("param{pi}")),
            checked: picks.len(),
            rel_err: diff_sq.sqrt() / denom,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport {
        params: checks,
        tolerance: opts.tol,
    })
}
