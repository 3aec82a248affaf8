use super::{invalid, Result, Tape, Tensor, TensorError, Var};

/// Per-coordinate comparison of tape adjoints against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    /// `max|analytic − numeric| / max|numeric|` over the whole tensor: the
    /// error relative to the gradient's scale, insensitive to coordinates
    /// whose true adjoint is at round-off level.
    pub fn tensor_rel_error(&self) -> f64 {
        let abs = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = self.numeric.iter().fold(0.0f64, |m, n| m.max(n.abs()));
        if abs == 0.0 {
            0.0
        } else {
            abs / scale.max(1e-12)
        }
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.constant(x)?;
    let y = f(&tape, xv)?.value();
    if y.len() != 1 {
        return Err(TensorError::NonScalarLoss(y.shape().to_vec()));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Max over coordinates of `|analytic − numeric| / (|numeric| + 1e-8)` with
/// central differences of step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_with(f, x, h).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    if !(h > 0.0) {
        return Err(invalid("grad_check", format!("step must be positive, got {h}")));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x)?;
        let y = f(&tape, xv)?;
        match tape.backward(y) {
            Ok(grads) => grads.wrt(xv).into_data(),
            Err(TensorError::DetachedLoss) => vec![0.0; x.len()],
            Err(e) => return Err(e),
        }
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
