//! Central-finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of checking one scalar function against finite differences.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Parameter entry where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn line(&self) -> String {
        let status = if self.pass { "pass" } else { "FAIL" };
        let worst = match &self.worst {
            Some((p, i)) => format!(" worst={p}[{i}]"),
            None => String::new(),
        };
        format!(
            "[{status}] {name}: max_rel_err={err:.3e} over {n} entries (tol {tol:.1e}){worst}",
            name = self.name,
            err = self.max_rel_err,
            n = self.entries,
            tol = self.tol
        )
    }
}

/// Compares analytic gradients against central differences for every entry
/// of every parameter.
///
/// `loss_fn` evaluates the scalar; `grad_fn` returns, for the unperturbed
/// parameters, the analytic gradient of each named parameter. Relative
/// error uses max(|analytic|, |fd|, 1) as the denominator so that
/// well-scaled losses give errors comparable to the tolerance.
pub fn check<L, G>(
    name: &str,
    params: &ParamSet,
    loss_fn: L,
    grad_fn: G,
    eps: f64,
    tol: f64,
) -> Result<CheckReport>
where
    L: Fn(&ParamSet) -> Result<f64>,
    G: Fn(&ParamSet) -> Result<Vec<(String, Vec<f64>)>>,
{
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck {name}: loss")));
    }
    let analytic = grad_fn(params)?;

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut entries = 0usize;
    for (pname, grads) in &analytic {
        let tensor = params.get(pname)?;
        if grads.len() != tensor.numel() {
            return Err(Error::ShapeMismatch {
                op: "gradcheck",
                detail: format!(
                    "analytic grad for {pname} has {} entries, parameter has {}",
                    grads.len(),
                    tensor.numel()
                ),
            });
        }
        for i in 0..grads.len() {
            let mut perturbed = params.clone();
            let base_val = perturbed.get(pname)?.data()[i];
            perturbed.get_mut(pname)?.data_mut()[i] = base_val + eps;
            let hi = loss_fn(&perturbed)?;
            perturbed.get_mut(pname)?.data_mut()[i] = base_val - eps;
            let lo = loss_fn(&perturbed)?;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(Error::NonFinite(format!("gradcheck {name}: perturbed loss")));
            }
            let fd = (hi - lo) / (2.0 * eps);
            let an = grads[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            entries += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((pname.clone(), i));
            }
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        entries,
        max_rel_err: max_rel,
        worst,
        tol,
        pass: max_rel <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::ops::Reduce;
    use crate::tensor::{ParamSet, Tensor};

    fn params_xy() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![0.4, -1.3, 2.2])).unwrap();
        p
    }

    fn build(p: &ParamSet) -> (Graph, crate::graph::NodeId, crate::graph::NodeId) {
        let mut g = Graph::new();
        let x = g.leaf(p.get("x").unwrap().clone(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.reduce(Reduce::Sum, sq, &[0]).unwrap();
        (g, x, loss)
    }

    #[test]
    fn sum_of_squares_passes() {
        // f = |x|^2, gradient 2x.
        let p = params_xy();
        let report = check(
            "sum_sq",
            &p,
            |p| {
                let (g, _, loss) = build(p);
                g.value(loss).item()
            },
            |p| {
                let (mut g, x, loss) = build(p);
                g.backward(loss)?;
                Ok(vec![("x".to_string(), g.grad(x).unwrap().data().to_vec())])
            },
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.pass, "{}", report.line());
        assert_eq!(report.entries, 3);
    }

    #[test]
    fn plain_sum_has_negligible_error() {
        let p = params_xy();
        let report = check(
            "sum",
            &p,
            |p| Ok(p.get("x")?.data().iter().sum()),
            |p| Ok(vec![("x".to_string(), vec![1.0; p.get("x")?.numel()])]),
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn sign_flipped_gradient_fails_and_names_the_culprit() {
        let p = params_xy();
        let report = check(
            "flipped",
            &p,
            |p| {
                let (g, _, loss) = build(p);
                g.value(loss).item()
            },
            |p| {
                let (mut g, x, loss) = build(p);
                g.backward(loss)?;
                let flipped: Vec<f64> = g.grad(x).unwrap().data().iter().map(|v| -v).collect();
                Ok(vec![("x".to_string(), flipped)])
            },
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(!report.pass);
        assert_eq!(report.worst.as_ref().unwrap().0, "x");
        assert!(report.line().contains("FAIL"));
    }
}
