//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Denominator floor for the elementwise relative error.
pub const REL_DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares analytic gradients of `f` against central differences with step
/// `h` for every element of every input.
///
/// `f` builds a scalar from the inputs, which are registered as trainable
/// leaves in the order given.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_DENOM_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, ei);
            }
            report.max_abs_error = report.max_abs_error.max(abs);
            report.checked += 1;
        }
    }
    Ok(report)
}
