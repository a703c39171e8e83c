//! Central finite-difference gradient checking.

use super::{AutodiffError, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Builds the scalar function `f` on fresh tapes and compares its reverse-mode
/// gradient w.r.t. every input against central differences with step `h`.
pub fn check<F, E>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let eval = |ins: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for i in 0..input.len() {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
