use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest relative error between the tape gradient of `f` at `point` and a
/// central finite difference with the given `step`.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`. Any failure
/// to evaluate `f`, or a non-finite value anywhere, yields `f64::INFINITY`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
}

/// [`grad_check`] over several inputs at once, every coordinate of every
/// input being checked.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return f64::INFINITY;
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p)).collect();
    let Ok(loss) = f(&mut tape, &vars) else {
        return f64::INFINITY;
    };
    let Ok(grads) = tape.backward(loss) else {
        return f64::INFINITY;
    };

    let eval = |pts: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.constant(p)).collect();
        match f(&mut t, &vs) {
            Ok(l) if t.value(l).len() == 1 => t.value(l)[0],
            _ => f64::NAN,
        }
    };

    let mut work = points.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let Some(analytic) = grads.get(*var) else {
            return f64::INFINITY;
        };
        for (c, &a) in analytic.iter().enumerate() {
            let orig = points[pi].data()[c];
            let (xp, xm) = (orig + step, orig - step);
            work[pi].data_mut()[c] = xp;
            let fp = eval(&work);
            work[pi].data_mut()[c] = xm;
            let fm = eval(&work);
            work[pi].data_mut()[c] = orig;

            let numeric = (fp - fm) / (xp - xm);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            if !err.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(err);
        }
    }
    worst
}
