//! Central finite-difference check of tape gradients.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nets::BoundMlp;
use crate::params::ParamSet;

/// A [`ParamSet`] placed on a graph, addressable by parameter name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    ids: Vec<(String, NodeId)>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ParamSet) -> Self {
        Self {
            ids: params
                .iter()
                .map(|(n, t)| (n.to_string(), g.leaf(t.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .ok_or_else(|| Error::InvalidArgument(format!("no bound parameter {name}")))
    }

    /// Reassembles `prefix.0.weight`, `prefix.0.bias`, ... into a bound MLP.
    pub fn mlp(&self, prefix: &str) -> Result<BoundMlp> {
        let mut layers = Vec::new();
        while let Ok(w) = self.get(&format!("{prefix}.{}.weight", layers.len())) {
            let b = self.get(&format!("{prefix}.{}.bias", layers.len()))?;
            layers.push((w, b));
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument(format!("no layers under {prefix}")));
        }
        Ok(BoundMlp::from_nodes(layers))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max |analytic - fd| / (|fd| + 1e-8)` over every scalar parameter.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum was reached.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of `loss_fn` with central differences of
/// half-width `step` for every scalar in `params`.
///
/// An empty parameter set reports an error of zero.
pub fn fd_check<F>(params: &ParamSet, step: f64, loss_fn: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |p: &ParamSet, name: &str| -> Result<f64> {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, p);
        let loss = loss_fn(&mut g, &bound)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("fd_check loss while perturbing {name}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let loss = loss_fn(&mut g, &bound)?;
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite("fd_check loss at the base point".into()));
    }
    let grads = g.backward(loss)?;

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let id = bound.get(name)?;
        let analytic = grads.get(id);
        for k in 0..tensor.len() {
            let base = tensor.values()[k];
            set_value(&mut probe, name, k, base + step);
            let up = eval(&probe, name)?;
            set_value(&mut probe, name, k, base - step);
            let down = eval(&probe, name)?;
            set_value(&mut probe, name, k, base);

            let fd = (up - down) / (2.0 * step);
            let a = analytic.map_or(0.0, |t| t.values()[k]);
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of {name}[{k}]")));
            }
            let rel = (a - fd).abs() / (fd.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), k));
            }
        }
    }
    Ok(report)
}

fn set_value(p: &mut ParamSet, name: &str, k: usize, v: f64) {
    let (_, t) = p.iter_mut().find(|(n, _)| *n == name).expect("known name");
    t.values_mut()[k] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_nearly_exact() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let r = fd_check(&p, 1e-5, |g, b| {
            let w = b.get("w")?;
            let sq = g.mul(w, w)?;
            g.sum(sq)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn empty_parameter_set_is_zero() {
        let r = fd_check(&ParamSet::new(), 1e-5, |g, _| Ok(g.leaf(Tensor::scalar(1.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 0);
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![700.0])).unwrap();
        let err = fd_check(&p, 1.0, |g, b| {
            let w = b.get("w")?;
            let e = g.exp(w)?;
            let e = g.exp(e)?;
            g.sum(e)
        })
        .unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu kink straddled by a huge step: the check must notice
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![0.1])).unwrap();
        let r = fd_check(&p, 1.0, |g, b| {
            let w = b.get("w")?;
            let r = g.relu(w)?;
            g.sum(r)
        })
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(fd_check(&ParamSet::new(), 0.0, |g, _| Ok(g.leaf(Tensor::scalar(0.0)))).is_err());
    }
}
