//! Central finite-difference gradient checking.

use crate::tape::{Tape, Tensor, Var};

/// Worst-case discrepancy between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor, so entries whose true gradient is
/// numerically zero do not dominate the report.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, perturbing every element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64, floor: f64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut report = GradCheckReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.as_slice_memory_order().map(|s| s[j]).unwrap_or_else(|| {
                *input.iter().nth(j).unwrap()
            });
            set_flat(&mut work[i], j, orig + h);
            let plus = eval(&work);
            set_flat(&mut work[i], j, orig - h);
            let minus = eval(&work);
            set_flat(&mut work[i], j, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = flat(&analytic[i], j);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, floor));
            report.checked += 1;
        }
    }
    report
}

fn flat(t: &Tensor, j: usize) -> f64 {
    match t.as_slice() {
        Some(s) => s[j],
        None => *t.iter().nth(j).unwrap(),
    }
}

fn set_flat(t: &mut Tensor, j: usize, value: f64) {
    match t.as_slice_mut() {
        Some(s) => s[j] = value,
        None => *t.iter_mut().nth(j).unwrap() = value,
    }
}
