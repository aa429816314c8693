//! Training objectives, all exposed as quantities to minimize.
//!
//! * [`cross_entropy`]: mean negative log-likelihood of the labels.
//! * [`info_nce`]: contrastive loss between two views, negated estimator of
//!   the mutual information between features and inputs.
//! * [`info_nce_class_aware`]: the same, with same-class rows removed from
//!   the denominator and extra negatives from a bank of novel-class features.
//! * [`pretrain_loss`]: `ce + alpha(t) * ssl` with `alpha(t) = kappa * t / T`.
//! * [`discriminator_loss`] and [`generator_loss`]: the adversarial pair that
//!   trains the domain classifier and the mapping layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, LOG_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar loss node together with its value and owning graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub node: NodeId,
    pub value: f64,
    graph: u64,
}

impl LossValue {
    fn new(g: &Graph, node: NodeId) -> Result<Self> {
        let value = g.value(node).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(Self {
            node,
            value,
            graph: g.id(),
        })
    }

    pub fn graph_id(&self) -> u64 {
        self.graph
    }
}

fn check_owner(g: &Graph, losses: &[LossValue]) -> Result<()> {
    if losses.iter().any(|l| l.graph != g.id()) {
        return Err(Error::InvalidArgument("losses come from different graphs".into()));
    }
    Ok(())
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        t.values_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<LossValue> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &[&shape, &[labels.len()]]));
    }
    let mask = g.leaf(one_hot(labels, shape[1])?);
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    let loss = g.scalar_mul(total, -1.0 / labels.len() as f64)?;
    LossValue::new(g, loss)
}

fn check_views(g: &Graph, z1: NodeId, z2: NodeId, tau: f64, op: &'static str) -> Result<usize> {
    let (a, b) = (g.value(z1).shape(), g.value(z2).shape());
    if a != b || a.len() != 2 {
        return Err(Error::shape(op, &[a, b]));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(a[0])
}

/// `mean_i -[ s_ii - log sum_k exp(s_ik) ]`, `s = z1 z2^T / tau`.
pub fn info_nce(g: &mut Graph, z1: NodeId, z2: NodeId, tau: f64) -> Result<LossValue> {
    let n = check_views(g, z1, z2, tau, "info_nce")?;
    if n < 2 {
        return Err(Error::Insufficient("info_nce needs at least two rows".into()));
    }
    let z2t = g.transpose(z2)?;
    let dots = g.matmul(z1, z2t)?;
    let sim = g.scalar_mul(dots, 1.0 / tau)?;
    let logp = g.log_softmax(sim)?;
    let diag = g.leaf(Tensor::identity(n));
    let pos = g.mul(logp, diag)?;
    let total = g.sum(pos)?;
    let loss = g.scalar_mul(total, -1.0 / n as f64)?;
    LossValue::new(g, loss)
}

/// Inclusion mask for the class-aware denominator: row `i` keeps its own
/// positive, every second-view row of a different class, and all bank rows.
pub fn class_aware_mask(labels: &[usize], bank_rows: usize) -> Tensor {
    let n = labels.len();
    let cols = n + bank_rows;
    let mut m = Tensor::zeros(&[n, cols]);
    for i in 0..n {
        for k in 0..cols {
            let keep = k == i || k >= n || labels[k] != labels[i];
            if keep {
                m.values_mut()[i * cols + k] = 1.0;
            }
        }
    }
    m
}

/// Class-aware contrastive loss. The candidate set is the second view of the
/// batch followed by `novel_bank` rows; for anchor `i`, rows sharing its
/// label are dropped from the denominator except its own positive.
pub fn info_nce_class_aware(
    g: &mut Graph,
    z1: NodeId,
    z2: NodeId,
    labels: &[usize],
    novel_bank: Option<NodeId>,
    tau: f64,
) -> Result<LossValue> {
    let n = check_views(g, z1, z2, tau, "info_nce_class_aware")?;
    if labels.len() != n {
        return Err(Error::shape("info_nce_class_aware", &[&[n], &[labels.len()]]));
    }
    let candidates = match novel_bank {
        Some(bank) => g.concat_rows(&[z2, bank])?,
        None => z2,
    };
    let bank_rows = g.value(candidates).rows() - n;
    let mask = class_aware_mask(labels, bank_rows);
    let cols = n + bank_rows;
    for i in 0..n {
        let negatives = mask.row(i).iter().sum::<f64>() - 1.0;
        if negatives < 1.0 {
            return Err(Error::Insufficient(format!(
                "anchor {i} has no negatives after same-class exclusion"
            )));
        }
    }

    let ct = g.transpose(candidates)?;
    let dots = g.matmul(z1, ct)?;
    let sim = g.scalar_mul(dots, 1.0 / tau)?;

    // Shift each row by its largest kept logit (a constant) so that the
    // masked sum is at least one and exp cannot overflow.
    let sv = g.value(sim).clone();
    let mut shift = Tensor::zeros(&[n, cols]);
    for i in 0..n {
        let m = (0..cols)
            .filter(|&k| mask.get(i, k) > 0.0)
            .map(|k| sv.get(i, k))
            .fold(f64::NEG_INFINITY, f64::max);
        shift.values_mut()[i * cols..(i + 1) * cols].fill(m);
    }
    let shift = g.leaf(shift);
    let shifted = g.sub(sim, shift)?;
    let e = g.exp(shifted)?;
    let mask_node = g.leaf(mask);
    let kept = g.mul(e, mask_node)?;
    let denom = g.row_sum(kept)?;
    let log_denom = g.log(denom)?;
    let neg_part = g.sum(log_denom)?;

    let mut diag = Tensor::zeros(&[n, cols]);
    for i in 0..n {
        diag.values_mut()[i * cols + i] = 1.0;
    }
    let diag = g.leaf(diag);
    let pos = g.mul(shifted, diag)?;
    let pos_part = g.sum(pos)?;
    let diff = g.sub(neg_part, pos_part)?;
    let loss = g.scalar_mul(diff, 1.0 / n as f64)?;
    LossValue::new(g, loss)
}

/// Linear warm-up of the self-supervised weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kappa: f64,
    pub total: usize,
}

impl Schedule {
    pub fn new(kappa: f64, total: usize) -> Result<Self> {
        if total == 0 || !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 1 and kappa >= 0, got T={total}, kappa={kappa}"
            )));
        }
        Ok(Self { kappa, total })
    }
}

/// `alpha(t) = kappa * t / T` for `0 <= t <= T`.
pub fn alpha(t: f64, sched: &Schedule) -> Result<f64> {
    let total = sched.total as f64;
    if !(0.0..=total).contains(&t) {
        return Err(Error::InvalidArgument(format!("epoch {t} outside [0, {total}]")));
    }
    Ok(sched.kappa * (t / total))
}

/// `ce + weight * ssl` on one graph.
pub fn weighted_sum(g: &mut Graph, ce: LossValue, ssl: LossValue, weight: f64) -> Result<LossValue> {
    check_owner(g, &[ce, ssl])?;
    let scaled = g.scalar_mul(ssl.node, weight)?;
    let total = g.add(ce.node, scaled)?;
    LossValue::new(g, total)
}

/// Mixed-supervision pretraining objective `ce + alpha(t) * ssl`.
pub fn pretrain_loss(
    g: &mut Graph,
    ce: LossValue,
    ssl: LossValue,
    t: f64,
    sched: &Schedule,
) -> Result<LossValue> {
    weighted_sum(g, ce, ssl, alpha(t, sched)?)
}

fn check_domain_label(d_u: f64) -> Result<()> {
    if !(d_u > 0.0 && d_u <= 1.0) {
        return Err(Error::InvalidArgument(format!("domain label d_u={d_u} outside (0, 1]")));
    }
    Ok(())
}

/// `mean log(clamp(d_u - rho_u, eps, 1))`.
fn log_margin(g: &mut Graph, rho_u: NodeId, d_u: f64) -> Result<NodeId> {
    let label = g.leaf(Tensor::full(g.value(rho_u).shape(), d_u));
    let gap = g.sub(label, rho_u)?;
    let gap = g.clamp(gap, LOG_EPS, 1.0)?;
    let logs = g.log(gap)?;
    g.mean(logs)
}

/// `-[ mean log rho_v + mean log(clamp(d_u - rho_u, eps, 1)) ]`.
///
/// The domain classifier maximizes the bracket, so it descends this value.
pub fn discriminator_loss(g: &mut Graph, rho_v: NodeId, rho_u: NodeId, d_u: f64) -> Result<LossValue> {
    check_domain_label(d_u)?;
    let logs = g.log(rho_v)?;
    let visible = g.mean(logs)?;
    let unseen = log_margin(g, rho_u, d_u)?;
    let sum = g.add(visible, unseen)?;
    let loss = g.scalar_mul(sum, -1.0)?;
    LossValue::new(g, loss)
}

/// `mean log(clamp(d_u - rho_u, eps, 1))`, descended by the mapping layer.
pub fn generator_loss(g: &mut Graph, rho_u: NodeId, d_u: f64) -> Result<LossValue> {
    check_domain_label(d_u)?;
    let loss = log_margin(g, rho_u, d_u)?;
    LossValue::new(g, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check;
    use crate::params::ParamSet;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn normalized(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let mut v: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in v.chunks_mut(cols) {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= n);
        }
        Tensor::matrix(rows, cols, v)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    // Scalar oracle for the masked contrastive loss.
    fn class_aware_oracle(z1: &Tensor, z2: &Tensor, labels: &[usize], bank: &[Vec<f64>], tau: f64) -> f64 {
        let n = z1.rows();
        let mut total = 0.0;
        for i in 0..n {
            let pos = dot(z1.row(i), z2.row(i)) / tau;
            let mut denom = 0.0;
            for k in 0..n {
                if k == i || labels[k] != labels[i] {
                    denom += (dot(z1.row(i), z2.row(k)) / tau).exp();
                }
            }
            for b in bank {
                denom += (dot(z1.row(i), b) / tau).exp();
            }
            total += -(pos - denom.ln());
        }
        total / n as f64
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[3, 5]));
        let l = cross_entropy(&mut g, logits, &[0, 4, 2]).unwrap();
        assert!((l.value - 5f64.ln()).abs() < 1e-15);
        assert!((l.value - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::matrix(1, 3, vec![1000.0, 0.0, 0.0]));
        let l = cross_entropy(&mut g, logits, &[0]).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert!(l.value >= 0.0);
    }

    #[test]
    fn cross_entropy_matches_scalar_recomputation() {
        let mut rng = rng_from_seed(4);
        let (n, c) = (6, 4);
        let v: Vec<f64> = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::matrix(n, c, v.clone()));
        let l = cross_entropy(&mut g, logits, &labels).unwrap();
        let want = (0..n)
            .map(|i| {
                let row = &v[i * c..(i + 1) * c];
                let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                lse - row[labels[i]]
            })
            .sum::<f64>()
            / n as f64;
        assert!((l.value - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            cross_entropy(&mut g, logits, &[3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn info_nce_orthogonal_anchor_gives_log_two() {
        // anchor 1 is orthogonal to both second-view rows
        let z1 = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let z2 = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let mut g = Graph::new();
        let (a, b) = (g.leaf(z1), g.leaf(z2));
        let l = info_nce(&mut g, a, b, 1.0).unwrap();
        // anchor 0: -(1 - log(e + 1)); anchor 1: log 2
        let anchor0 = -(1.0 - (1f64.exp() + 1.0).ln());
        let anchor1 = 2f64.ln();
        assert!((anchor1 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l.value - (anchor0 + anchor1) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn info_nce_separable_limit() {
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
        let mut g = Graph::new();
        let (a, b) = (g.leaf(z.clone()), g.leaf(z));
        let l = info_nce(&mut g, a, b, 0.01).unwrap();
        assert!(l.value < 1e-80);
    }

    #[test]
    fn info_nce_needs_two_rows() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        assert!(info_nce(&mut g, a, a, 0.5).is_err());
    }

    #[test]
    fn info_nce_rotation_invariant() {
        let (z1, z2) = (normalized(5, 2, 1), normalized(5, 2, 2));
        let th = 0.7f64;
        let rot = Tensor::matrix(2, 2, vec![th.cos(), th.sin(), -th.sin(), th.cos()]);
        let mut g = Graph::new();
        let (a, b) = (g.leaf(z1.clone()), g.leaf(z2.clone()));
        let base = info_nce(&mut g, a, b, 0.5).unwrap().value;
        let (a, b) = (g.leaf(z1.matmul(&rot).unwrap()), g.leaf(z2.matmul(&rot).unwrap()));
        let turned = info_nce(&mut g, a, b, 0.5).unwrap().value;
        assert!((base - turned).abs() < 1e-12);
    }

    #[test]
    fn class_aware_reduces_to_plain_with_distinct_labels() {
        let (z1, z2) = (normalized(6, 4, 3), normalized(6, 4, 4));
        let mut g = Graph::new();
        let (a, b) = (g.leaf(z1), g.leaf(z2));
        let plain = info_nce(&mut g, a, b, 0.5).unwrap().value;
        let aware = info_nce_class_aware(&mut g, a, b, &[0, 1, 2, 3, 4, 5], None, 0.5)
            .unwrap()
            .value;
        assert!((plain - aware).abs() < 1e-12);
    }

    #[test]
    fn class_aware_single_label_uses_bank_only() {
        let (z1, z2, bank) = (normalized(3, 4, 5), normalized(3, 4, 6), normalized(2, 4, 7));
        let rows: Vec<Vec<f64>> = (0..2).map(|i| bank.row(i).to_vec()).collect();
        let want = class_aware_oracle(&z1, &z2, &[1, 1, 1], &rows, 0.5);
        let mut g = Graph::new();
        let (a, b, k) = (g.leaf(z1.clone()), g.leaf(z2.clone()), g.leaf(bank));
        let l = info_nce_class_aware(&mut g, a, b, &[1, 1, 1], Some(k), 0.5).unwrap();
        assert!((l.value - want).abs() < 1e-12);
        // without a bank every anchor is left with no negatives
        assert!(info_nce_class_aware(&mut g, a, b, &[1, 1, 1], None, 0.5).is_err());
    }

    #[test]
    fn class_aware_matches_mask_oracle() {
        let (z1, z2, bank) = (normalized(8, 5, 8), normalized(8, 5, 9), normalized(4, 5, 10));
        let labels = [0, 1, 0, 2, 1, 1, 3, 0];
        let rows: Vec<Vec<f64>> = (0..4).map(|i| bank.row(i).to_vec()).collect();
        let want = class_aware_oracle(&z1, &z2, &labels, &rows, 0.3);
        let mut g = Graph::new();
        let (a, b, k) = (g.leaf(z1), g.leaf(z2), g.leaf(bank));
        let l = info_nce_class_aware(&mut g, a, b, &labels, Some(k), 0.3).unwrap();
        assert!((l.value - want).abs() < 1e-12);
    }

    #[test]
    fn info_nce_monotone_in_positive_similarity() {
        let neg = [0.0, 1.0];
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let th = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 10.0);
            let z1 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
            let z2 = Tensor::matrix(2, 2, vec![th.cos(), th.sin(), neg[0], neg[1]]);
            let mut g = Graph::new();
            let (a, b) = (g.leaf(z1), g.leaf(z2));
            let v = info_nce(&mut g, a, b, 0.5).unwrap().value;
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn schedule_values() {
        let s = Schedule::new(0.1, 50).unwrap();
        assert_eq!(alpha(0.0, &s).unwrap(), 0.0);
        assert_eq!(alpha(50.0, &s).unwrap(), 0.1);
        assert_eq!(alpha(25.0, &s).unwrap(), 0.05);
        assert!(alpha(51.0, &s).is_err());
        assert!(alpha(-1.0, &s).is_err());
        assert!(Schedule::new(-0.1, 5).is_err());
        assert!(Schedule::new(0.1, 0).is_err());
    }

    #[test]
    fn pretrain_loss_at_start_is_ce() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::matrix(2, 3, vec![0.1, 0.4, -0.2, 1.0, 0.0, 0.3]));
        let ce = cross_entropy(&mut g, logits, &[1, 0]).unwrap();
        let (a, b) = (g.leaf(normalized(2, 3, 1)), g.leaf(normalized(2, 3, 2)));
        let ssl = info_nce(&mut g, a, b, 0.5).unwrap();
        let sched = Schedule::new(0.1, 10).unwrap();
        assert_eq!(pretrain_loss(&mut g, ce, ssl, 0.0, &sched).unwrap().value, ce.value);
        let flat = Schedule::new(0.0, 10).unwrap();
        for t in 0..=10 {
            assert_eq!(pretrain_loss(&mut g, ce, ssl, t as f64, &flat).unwrap().value, ce.value);
        }
        let mut other = Graph::new();
        assert!(pretrain_loss(&mut other, ce, ssl, 1.0, &sched).is_err());
    }

    #[test]
    fn pretrain_gradient_is_linear_combination() {
        let mut p = ParamSet::new();
        p.push("logits", Tensor::matrix(3, 4, vec![0.2, -0.1, 0.5, 0.3, 1.0, 0.0, -0.4, 0.2, 0.1, 0.1, 0.9, -1.0]))
            .unwrap();
        p.push("z1", normalized(3, 4, 11)).unwrap();
        p.push("z2", normalized(3, 4, 12)).unwrap();
        let sched = Schedule::new(0.1, 8).unwrap();
        let build = |g: &mut Graph, b: &crate::gradcheck::BoundParams, w: Option<f64>| {
            let ce = cross_entropy(g, b.get("logits")?, &[0, 3, 1])?;
            let ssl = info_nce(g, b.get("z1")?, b.get("z2")?, 0.5)?;
            match w {
                Some(w) => weighted_sum(g, ce, ssl, w),
                None => pretrain_loss(g, ce, ssl, 3.0, &sched),
            }
        };
        let r = fd_check(&p, 1e-5, |g, b| Ok(build(g, b, None)?.node)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        // d(ce + a ssl) == d(ce) + a d(ssl)
        let a = alpha(3.0, &sched).unwrap();
        let grads_of = |w: Option<f64>, part: &str| {
            let mut g = Graph::new();
            let b = crate::gradcheck::BoundParams::bind(&mut g, &p);
            let node = match part {
                "ce" => cross_entropy(&mut g, b.get("logits").unwrap(), &[0, 3, 1]).unwrap().node,
                "ssl" => info_nce(&mut g, b.get("z1").unwrap(), b.get("z2").unwrap(), 0.5).unwrap().node,
                _ => build(&mut g, &b, w).unwrap().node,
            };
            let gm = g.backward(node).unwrap();
            ["logits", "z1", "z2"]
                .iter()
                .map(|n| gm.get(b.get(n).unwrap()).cloned().unwrap_or_else(|| Tensor::zeros(p.get(n).unwrap().shape())))
                .collect::<Vec<_>>()
        };
        let (total, ce, ssl) = (grads_of(None, "all"), grads_of(None, "ce"), grads_of(None, "ssl"));
        for k in 0..3 {
            let mut sum = ce[k].clone();
            sum.add_assign_scaled(&ssl[k], a);
            assert!(total[k].max_abs_diff(&sum) < 1e-14);
        }
    }

    #[test]
    fn discriminator_values() {
        let mut g = Graph::new();
        let rv = g.leaf(Tensor::full(&[3, 1], 0.5));
        let ru = g.leaf(Tensor::full(&[3, 1], 0.2));
        let d_u: f64 = 1.0 - 0.3;
        assert!((d_u - 0.7).abs() < 1e-15);
        let l = discriminator_loss(&mut g, rv, ru, d_u).unwrap();
        assert!((l.value - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.value - 1.3863).abs() < 1e-4);

        let over = g.leaf(Tensor::full(&[2, 1], 0.9));
        let clamped = discriminator_loss(&mut g, rv, over, d_u).unwrap();
        assert!(clamped.value.is_finite());
        assert!((clamped.value - (-(0.5f64.ln() + LOG_EPS.ln()))).abs() < 1e-12);
        assert!(discriminator_loss(&mut g, rv, ru, 0.0).is_err());
        assert!(discriminator_loss(&mut g, rv, ru, 1.5).is_err());
    }

    #[test]
    fn discriminator_directional_consistency() {
        let value = |rv: f64, ru: f64| {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::full(&[2, 1], rv));
            let b = g.leaf(Tensor::full(&[2, 1], ru));
            discriminator_loss(&mut g, a, b, 0.7).unwrap().value
        };
        assert!(value(0.9, 0.3) < value(0.6, 0.3));
        assert!(value(0.6, 0.1) < value(0.6, 0.3));
    }

    #[test]
    fn generator_values() {
        let mut g = Graph::new();
        let ru = g.leaf(Tensor::full(&[4, 1], 0.2));
        let l = generator_loss(&mut g, ru, 0.7).unwrap();
        assert!((l.value - 0.5f64.ln()).abs() < 1e-12);
        assert!((l.value + std::f64::consts::LN_2).abs() < 1e-12);

        let near = g.leaf(Tensor::full(&[1, 1], 0.7 - LOG_EPS));
        let l = generator_loss(&mut g, near, 0.7).unwrap();
        assert!((l.value - LOG_EPS.ln()).abs() < 1e-3);
    }

    #[test]
    fn adversarial_losses_pass_fd_check() {
        let mut rng = rng_from_seed(77);
        let mut p = ParamSet::new();
        let mut draw = |n| Tensor::matrix(n, 1, (0..n).map(|_| rng.random_range(0.05..0.6)).collect());
        p.push("rv", draw(5)).unwrap();
        p.push("ru", draw(5)).unwrap();
        let r = fd_check(&p, 1e-5, |g, b| {
            Ok(discriminator_loss(g, b.get("rv")?, b.get("ru")?, 0.65)?.node)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = fd_check(&p, 1e-5, |g, b| Ok(generator_loss(g, b.get("ru")?, 0.65)?.node)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
