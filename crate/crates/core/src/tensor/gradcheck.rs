use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// coordinate where the maximum occurred
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`.
///
/// `f` builds the function on a fresh tape from the input handle; it is
/// called once for the analytic pass and twice per coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&mut tape, xv)?;
    let l0 = tape.value(loss).item();
    if !l0.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            context: "function value at the base point".into(),
        });
    }
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !fd.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite {
                index: i,
                context: format!("analytic {} vs numeric {}", analytic[i], fd),
            });
        }
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
