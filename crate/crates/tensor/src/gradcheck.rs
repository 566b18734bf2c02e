use rand::seq::index::sample;
use rand::SeedableRng;

use crate::{Graph, Real, Result, Tensor, TensorError, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_err: Real,
    pub max_abs_err: Real,
    /// (tensor index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: Real,
    pub passed: bool,
}

const REL_FLOOR: Real = 1e-3;

/// Checks every entry of every tensor in `params`.
///
/// `f` builds a one-element loss from the bound parameters on a fresh graph.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    h: Real,
    tol: Real,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(f, params, h, tol, None)
}

/// Like [`finite_difference_check`] but probes at most `per_tensor` randomly
/// chosen entries of each tensor.
pub fn finite_difference_check_sampled<F>(
    f: F,
    params: &[Tensor],
    h: Real,
    tol: Real,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(f, params, h, tol, Some((per_tensor, seed)))
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<Real>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(TensorError::invalid("gradcheck", "f must return one value"));
    }
    if !value.item().is_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck" });
    }
    Ok(value.item())
}

fn check<F>(
    f: F,
    params: &[Tensor],
    h: Real,
    tol: Real,
    sampling: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::invalid("gradcheck", "step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck" });
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    drop(g);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sampling.map_or(0, |s| s.1));
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        tol,
        passed: true,
    };
    for ti in 0..params.len() {
        let n = params[ti].numel();
        let entries: Vec<usize> = match sampling {
            Some((k, _)) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for ei in entries {
            let orig = params[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((ti, ei));
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = f(&mut g, &[xv]).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[2.0, 4.0]);
        let r = finite_difference_check(f, &[x], 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new([3], vec![0.3, -1.0, 4.0]).unwrap();
        let f = |g: &mut Graph, _: &[Var]| Ok(g.constant(Tensor::scalar(2.5)));
        let r = finite_difference_check(f, &[x], 1e-5, 1e-9).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_abs_err, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly a kink with h larger than the distance: numeric 0.5, analytic 0.
        let x = Tensor::new([1], vec![0.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let r = g.relu(v[0])?;
            g.sum(r)
        };
        let r = finite_difference_check(f, &[x], 1e-4, 1e-5).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_loss_is_error() {
        let x = Tensor::new([1], vec![1.0]).unwrap();
        let f = |g: &mut Graph, _: &[Var]| Ok(g.constant(Tensor::scalar(Real::NAN)));
        assert!(finite_difference_check(f, &[x], 1e-5, 1e-5).is_err());
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Tensor::new([1], vec![1.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| g.sum(v[0]);
        assert!(finite_difference_check(f, &[x], 0.0, 1e-5).is_err());
    }
}
