//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::ParamStore;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter name, flat index) of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub passed: bool,
}

fn eval<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    if g.data(loss).len() != 1 {
        return Err(Error::Shape(format!(
            "gradcheck: loss must be scalar, got shape {:?}",
            g.shape(loss)
        )));
    }
    Ok(g.data(loss)[0])
}

/// Compares the tape gradient of `build`'s scalar output against central
/// finite differences (f(θ+ε) − f(θ−ε)) / 2ε for every parameter coordinate.
///
/// `build` must be deterministic; this is enforced by evaluating it twice and
/// requiring bit-equal values. The error per coordinate is
/// |analytic − numeric| / max(|analytic|, |numeric|, 1), i.e. relative for
/// large gradients and absolute near zero. Mutates the store's gradients and
/// restores parameter values on exit.
pub fn gradcheck<F>(build: F, store: &mut ParamStore, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("gradcheck: eps must be positive, got {eps}")));
    }
    let v0 = eval(&build, store)?;
    let v1 = eval(&build, store)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::Numeric(format!(
            "gradcheck: function is not deterministic ({v0} vs {v1})"
        )));
    }

    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss)?;
    g.harvest_into(store)?;

    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        passed: true,
    };

    for name in &names {
        let (len, analytic) = {
            let t = store.get(name)?;
            (t.data.len(), t.grad.clone().expect("parameters carry grads"))
        };
        for idx in 0..len {
            let orig = store.get(name)?.data[idx];
            store.get_mut(name)?.data[idx] = orig + eps;
            let plus = eval(&build, store)?;
            store.get_mut(name)?.data[idx] = orig - eps;
            let minus = eval(&build, store)?;
            store.get_mut(name)?.data[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
