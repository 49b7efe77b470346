use crate::error::Result;

use super::matrix::Matrix;
use super::tape::{Tape, Var};

/// Compares reverse-mode gradients of `program` at `point` with central
/// differences.
///
/// Returns the max over every leaf entry of
/// `|analytic − fd| / (|analytic| + step)`.
pub fn finite_diff_check<F>(program: F, point: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |pt: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pt.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = program(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Matrix> = point.to_vec();
    for (leaf, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..point[leaf].len() {
            let orig = point[leaf].data()[k];
            probe[leaf].data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe[leaf].data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe[leaf].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic.data()[k];
            worst = worst.max((a - fd).abs() / (a.abs() + step));
        }
    }
    Ok(worst)
}
