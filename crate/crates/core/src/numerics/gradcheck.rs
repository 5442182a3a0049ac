use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Central differences `(f(p+h) − f(p−h)) / 2h` for every element of every
/// parameter.
pub fn numeric_gradients<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

fn check_pairs(params: &[Tensor], analytic: &[Tensor]) -> Result<()> {
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, g) in params.iter().zip(analytic) {
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "finite_diff_check",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Compares analytic gradients against central finite differences.
///
/// Returns `max |g − (f(p+h) − f(p−h)) / 2h| / max(|g|, 1e-8)` over every
/// element of every parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], analytic: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    check_pairs(params, analytic)?;
    let numeric = numeric_gradients(f, params, h)?;
    let mut worst: f64 = 0.0;
    for (g, n) in analytic.iter().zip(&numeric) {
        for (a, b) in g.data().iter().zip(n.data()) {
            worst = worst.max((a - b).abs() / a.abs().max(REL_FLOOR));
        }
    }
    Ok(worst)
}

/// Per-parameter relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-8)` between
/// analytic gradients `g` and central differences `ĝ`.
///
/// Unlike [`finite_diff_check`] this is not dominated by single elements
/// whose true gradient sits near the rounding floor of the differences.
pub fn tensor_relative_errors<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    check_pairs(params, analytic)?;
    let numeric = numeric_gradients(f, params, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(g, n)| {
            let diff: f64 = g
                .data()
                .iter()
                .zip(n.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            diff / g.norm().max(n.norm()).max(REL_FLOOR)
        })
        .collect())
}

/// Records `build` on a fresh tape and returns the loss value plus the
/// gradient w.r.t. each parameter.
pub fn value_and_grad<B>(build: &B, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    Ok((
        value,
        vars.iter().map(|&v| grads.get_or_zeros(v, &tape)).collect(),
    ))
}

/// Tape-driven gradient check of a scalar function of `params`.
pub fn check_gradients<B>(build: B, params: &[Tensor], h: f64) -> Result<f64>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = value_and_grad(&build, params)?;
    let eval = |ps: &[Tensor]| value_and_forward(&build, ps);
    finite_diff_check(eval, params, &analytic, h)
}

/// Tape-driven [`tensor_relative_errors`], one entry per parameter.
pub fn check_gradients_per_tensor<B>(build: B, params: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = value_and_grad(&build, params)?;
    let eval = |ps: &[Tensor]| value_and_forward(&build, ps);
    tensor_relative_errors(eval, params, &analytic, h)
}

fn value_and_forward<B>(build: &B, params: &[Tensor]) -> f64
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    match build(&mut tape, &vars) {
        Ok(loss) => tape.value(loss).data()[0],
        Err(_) => f64::NAN,
    }
}
