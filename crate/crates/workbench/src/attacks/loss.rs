//! Surrogate loss evaluation, both eagerly on logits and as graph nodes.

use super::SurrogateLoss;
use crate::autodiff::{GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keeps DLR denominators away from exact zero when the top logits tie.
const DLR_DENOM_EPS: f64 = 1e-12;

fn check_label(y: usize, k: usize) -> Result<()> {
    if y == 0 || y > k {
        return Err(Error::invalid(format!("label {y} outside 1..={k}")));
    }
    Ok(())
}

/// Evaluates a surrogate loss on raw logits for true (1-based) label `y`.
/// Larger values are more adversarial.
pub fn eval_loss(loss: &SurrogateLoss, logits: &Tensor, y: usize) -> Result<f64> {
    let k = logits.len();
    check_label(y, k)?;
    let z = logits.data();
    let zy = z[y - 1];
    let max_other = z
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y - 1)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(match loss {
        SurrogateLoss::CrossEntropy => {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - zy
        }
        SurrogateLoss::CwMargin => max_other - zy,
        SurrogateLoss::Dlr => {
            if k < 4 {
                return Err(Error::invalid("DLR loss requires at least 4 classes"));
            }
            let (z1, z3) = (kth(z, 1), kth(z, 3));
            (max_other - zy) / (z1 - z3 + DLR_DENOM_EPS)
        }
        SurrogateLoss::TargetedDlr(t) => {
            if k < 4 {
                return Err(Error::invalid("targeted DLR loss requires at least 4 classes"));
            }
            check_label(*t, k)?;
            let (z1, z3, z4) = (kth(z, 1), kth(z, 3), kth(z, 4));
            (z[t - 1] - zy) / (z1 - (z3 + z4) / 2.0 + DLR_DENOM_EPS)
        }
    })
}

fn kth(z: &[f64], k: usize) -> f64 {
    let mut sorted: Vec<f64> = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sorted[k - 1]
}

/// Appends the surrogate loss to a graph downstream of a logits node, so the
/// loss gradient flows through whatever produced the logits.
pub fn append_loss_graph(
    b: &mut GraphBuilder,
    logits: NodeId,
    loss: &SurrogateLoss,
    y: usize,
    k: usize,
) -> Result<NodeId> {
    check_label(y, k)?;
    Ok(match loss {
        SurrogateLoss::CrossEntropy => {
            let ls = b.log_softmax(logits);
            let picked = b.select(ls, y - 1);
            b.scale(picked, -1.0)
        }
        SurrogateLoss::CwMargin => {
            let other = b.max_excluding(logits, y - 1);
            let zy = b.select(logits, y - 1);
            b.sub(other, zy)
        }
        SurrogateLoss::Dlr => {
            if k < 4 {
                return Err(Error::invalid("DLR loss requires at least 4 classes"));
            }
            let other = b.max_excluding(logits, y - 1);
            let zy = b.select(logits, y - 1);
            let num = b.sub(other, zy);
            let z1 = b.kth_largest(logits, 1);
            let z3 = b.kth_largest(logits, 3);
            let gap = b.sub(z1, z3);
            let den = b.add_scalar(gap, DLR_DENOM_EPS);
            b.div(num, den)
        }
        SurrogateLoss::TargetedDlr(t) => {
            if k < 4 {
                return Err(Error::invalid("targeted DLR loss requires at least 4 classes"));
            }
            check_label(*t, k)?;
            let zt = b.select(logits, t - 1);
            let zy = b.select(logits, y - 1);
            let num = b.sub(zt, zy);
            let z1 = b.kth_largest(logits, 1);
            let z3 = b.kth_largest(logits, 3);
            let z4 = b.kth_largest(logits, 4);
            let z34 = b.add(z3, z4);
            let half = b.scale(z34, 0.5);
            let gap = b.sub(z1, half);
            let den = b.add_scalar(gap, DLR_DENOM_EPS);
            b.div(num, den)
        }
    })
}
