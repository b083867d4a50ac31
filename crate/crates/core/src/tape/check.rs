use super::{Tape, TapeError, Tensor, Var};

/// Outcome of [`gradient_check`]: the worst entry found.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
}

/// Compares tape gradients of a scalar function against central finite
/// differences at every entry of every parameter.
///
/// The error at each entry is `|analytic - numeric| / max(1, |numeric|)`.
/// `f` receives a fresh tape and one differentiable leaf per parameter.
pub fn gradient_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradientCheck, TapeError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    assert!(h > 0.0, "step must be positive");
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var), TapeError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.shape() != (1, 1) {
            return Err(TapeError::NonScalarLoss(v.shape()));
        }
        if !v.item().is_finite() {
            return Err(TapeError::NonFinite(format!("objective = {}", v.item())));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let mut worst = GradientCheck {
        max_rel_error: 0.0,
        param: 0,
        index: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let (t_plus, _, o_plus) = eval(&work)?;
            let f_plus = t_plus.value(o_plus).item();
            work[p].data_mut()[i] = orig - h;
            let (t_minus, _, o_minus) = eval(&work)?;
            let f_minus = t_minus.value(o_minus).item();
            work[p].data_mut()[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let err = (analytic[p].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(TapeError::NonFinite(format!("gradient entry {i} of parameter {p}")));
            }
            if err > worst.max_rel_error {
                worst = GradientCheck {
                    max_rel_error: err,
                    param: p,
                    index: i,
                };
            }
        }
    }
    Ok(worst)
}
