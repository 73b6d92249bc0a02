use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{KwsError, Result};

/// Denominator floor for relative error, so that two near-zero gradients
/// compare by absolute difference instead of amplifying rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if let Some((node, op)) = tape.first_non_finite() {
        return Err(KwsError::NonFinite { op, node });
    }
    if tape.value(out).len() != 1 {
        return Err(KwsError::dim("grad_check", tape.value(out).shape(), &[1]));
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// `f` receives a fresh tape and one leaf var per entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(KwsError::Validation(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let (tape, vars, out) = evaluate(&f, params)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.take_or_zeros(*v, p.shape()))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for pi in 0..params.len() {
        let mut fd = vec![0.0; params[pi].len()];
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let (t_plus, _, o_plus) = evaluate(&f, &work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let (t_minus, _, o_minus) = evaluate(&f, &work)?;
            work[pi].data_mut()[ei] = orig;
            fd[ei] = (t_plus.value(o_plus).data()[0] - t_minus.value(o_minus).data()[0]) / (2.0 * eps);
            let err = relative_error(analytic[pi].data()[ei], fd[ei]);
            if err > max_rel_error || worst.is_none() {
                max_rel_error = err;
                worst = Some((pi, ei));
            }
            checked += 1;
        }
        numeric.push(Tensor::new(params[pi].shape().to_vec(), fd)?);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        checked,
        tol,
        passed: max_rel_error < tol,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let w = Tensor::vector(vec![1.0, 2.0]);
        let report = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                Ok(t.sum(sq))
            },
            &[w],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert_eq!(report.analytic[0].data(), &[2.0, 4.0]);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let w = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let report = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(3.5))),
            &[w],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.analytic[0].data().iter().all(|v| *v == 0.0));
        assert!(report.numeric[0].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_loss_names_the_op() {
        let w = Tensor::vector(vec![1e300, 1e300]);
        let err = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                Ok(t.sum(sq))
            },
            &[w],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        match err {
            KwsError::NonFinite { op, .. } => assert_eq!(op, "mul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let w = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, p| Ok(t.sum(p[0])), &[w], 1e-2, 1e-4).is_err());
    }
}
