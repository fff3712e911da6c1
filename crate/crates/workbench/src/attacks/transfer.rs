//! Transfer attacks and worst-case ensembling across attack outcomes.

use super::{
    pgd, AttackBudget, AttackOutcome, AttackTarget, ExampleOutcome, SurrogateLoss, ThreatModel,
};
use crate::error::{Error, Result};
use crate::models::Dataset;
use crate::stream_seed;
use crate::tensor::Tensor;

/// What to do with the surrogate's perturbations when they reach the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferPolicy {
    /// Evaluate every restart's best perturbation on the target and keep the
    /// one with the highest target loss.
    LossMaximizing,
    /// Evaluate only the surrogate's overall best perturbation; when it fails
    /// to flip the target, report the failure with a zero perturbation rather
    /// than pretending a random feasible point is an attack.
    CleanOnFailure,
}

/// Crafts perturbations with PGD against `surrogate` and evaluates them on
/// `target`. Only target queries are charged to the outcome; the surrogate
/// work is the whole point of transfer and is deliberately off the books.
pub fn transfer_attack(
    surrogate: &dyn AttackTarget,
    target: &dyn AttackTarget,
    ds: &Dataset,
    threat: &ThreatModel,
    loss: &SurrogateLoss,
    budget: &AttackBudget,
    policy: TransferPolicy,
) -> Result<AttackOutcome> {
    if surrogate.input_dim() != target.input_dim()
        || surrogate.num_classes() != target.num_classes()
    {
        return Err(Error::invalid("surrogate and target shapes do not match"));
    }
    // One single-restart PGD run per requested restart, so each restart's own
    // best perturbation is available as a transfer candidate.
    let mut per_restart: Vec<AttackOutcome> = Vec::new();
    for r in 0..budget.restarts.max(1) {
        let sub = AttackBudget {
            restarts: 1,
            seed: stream_seed(budget.seed, r as u64),
            ..*budget
        };
        per_restart.push(pgd(surrogate, ds, threat, loss, &sub)?);
    }

    let mut examples = Vec::with_capacity(ds.len());
    for (id, (x, y)) in ds.iter().enumerate() {
        let ex_seed = stream_seed(budget.seed, 0xF00 + id as u64);
        let candidates: Vec<&ExampleOutcome> =
            per_restart.iter().map(|o| &o.examples[id]).collect();
        let chosen: Vec<&ExampleOutcome> = match policy {
            TransferPolicy::LossMaximizing => candidates,
            TransferPolicy::CleanOnFailure => {
                // Surrogate's single best candidate by its own loss.
                vec![candidates
                    .into_iter()
                    .max_by(|a, b| a.best_loss.partial_cmp(&b.best_loss).unwrap())
                    .unwrap()]
            }
        };
        let mut best: Option<(f64, Tensor, bool)> = None;
        let mut forwards = 0u64;
        for (i, cand) in chosen.iter().enumerate() {
            let record =
                target.eval(loss, &x.add(&cand.best_delta), y, stream_seed(ex_seed, i as u64))?;
            forwards += 1;
            let flips = record.predicted != y;
            let better = match &best {
                None => true,
                Some((loss0, _, success0)) => match (flips, success0) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => record.loss > *loss0,
                },
            };
            if better {
                best = Some((record.loss, cand.best_delta.clone(), flips));
            }
        }
        let (mut best_loss, mut best_delta, success) = best.unwrap();
        if policy == TransferPolicy::CleanOnFailure && !success {
            best_delta = Tensor::zeros(vec![x.len()]);
            best_loss = f64::NEG_INFINITY;
        }
        examples.push(ExampleOutcome {
            example_id: id,
            best_delta,
            best_loss,
            success,
            forwards,
            backwards: 0,
            queries: forwards,
        });
    }
    Ok(AttackOutcome { examples })
}

/// Per-example union of several attack outcomes against the same target:
/// an example counts as robust only if every attack failed on it. Counters
/// are summed, reflecting the full spend of the ensemble.
pub fn worst_case_ensemble(outcomes: &[AttackOutcome]) -> Result<AttackOutcome> {
    let first = outcomes.first().ok_or_else(|| Error::invalid("empty ensemble"))?;
    let n = first.examples.len();
    if outcomes.iter().any(|o| o.examples.len() != n) {
        return Err(Error::invalid("ensemble outcomes cover different example counts"));
    }
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let id = first.examples[i].example_id;
        let mut best: Option<&ExampleOutcome> = None;
        let (mut forwards, mut backwards, mut queries) = (0u64, 0u64, 0u64);
        for o in outcomes {
            let e = &o.examples[i];
            if e.example_id != id {
                return Err(Error::invalid("ensemble outcomes cover different examples"));
            }
            forwards += e.forwards;
            backwards += e.backwards;
            queries += e.queries;
            let better = match best {
                None => true,
                Some(b) => match (e.success, b.success) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => e.best_loss > b.best_loss,
                },
            };
            if better {
                best = Some(e);
            }
        }
        let b = best.unwrap();
        examples.push(ExampleOutcome {
            example_id: id,
            best_delta: b.best_delta.clone(),
            best_loss: b.best_loss,
            success: b.success,
            forwards,
            backwards,
            queries,
        });
    }
    Ok(AttackOutcome { examples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{data, init_classifier, train_standard, TrainConfig};

    fn trained_pair() -> (crate::models::Classifier, crate::models::Classifier, Dataset) {
        let ds = data::gaussians2d(80, 3);
        let cfg = TrainConfig { epochs: 20, ..TrainConfig::quick(3) };
        let a = train_standard(&init_classifier(&[2, 8], 2, 3).unwrap(), &ds, &cfg).unwrap();
        let b = train_standard(&init_classifier(&[2, 10], 2, 17).unwrap(), &ds, &cfg).unwrap();
        (a, b, ds)
    }

    #[test]
    fn self_transfer_matches_direct_attack_success() {
        // Crafting on the target itself transfers perfectly, so the transfer
        // attack can be no weaker than its own candidate generation.
        let (model, _, ds) = trained_pair();
        let ds = ds.subset(20);
        let threat = ThreatModel::linf(0.1);
        let budget = AttackBudget::new(15, 2, 7);
        let direct = pgd(&model, &ds, &threat, &SurrogateLoss::CrossEntropy, &budget).unwrap();
        let transferred = transfer_attack(
            &model,
            &model,
            &ds,
            &threat,
            &SurrogateLoss::CrossEntropy,
            &budget,
            TransferPolicy::LossMaximizing,
        )
        .unwrap();
        // Restart seeding differs, so allow slack but require the same
        // ballpark of success.
        assert!(
            (transferred.robust_accuracy() - direct.robust_accuracy()).abs() <= 0.2,
            "self-transfer {} vs direct {}",
            transferred.robust_accuracy(),
            direct.robust_accuracy()
        );
        // Target-side cost is one forward per candidate per example.
        for e in &transferred.examples {
            assert!(e.forwards <= budget.restarts as u64);
            assert_eq!(e.backwards, 0);
        }
    }

    #[test]
    fn clean_on_failure_reports_zero_delta() {
        let (a, b, ds) = trained_pair();
        let ds = ds.subset(20);
        // A tiny radius that rarely flips anything on the cross model.
        let threat = ThreatModel::linf(1e-4);
        let out = transfer_attack(
            &a,
            &b,
            &ds,
            &threat,
            &SurrogateLoss::CrossEntropy,
            &AttackBudget::new(5, 1, 7),
            TransferPolicy::CleanOnFailure,
        )
        .unwrap();
        for e in &out.examples {
            if !e.success {
                assert_eq!(e.best_delta.l2_norm(), 0.0);
            }
        }
    }

    #[test]
    fn ensemble_is_pointwise_union() {
        let (a, _, ds) = trained_pair();
        let ds = ds.subset(20);
        let threat = ThreatModel::linf(0.08);
        let o1 = pgd(&a, &ds, &threat, &SurrogateLoss::CrossEntropy, &AttackBudget::new(5, 1, 1))
            .unwrap();
        let o2 = pgd(&a, &ds, &threat, &SurrogateLoss::CwMargin, &AttackBudget::new(5, 1, 2))
            .unwrap();
        let union = worst_case_ensemble(&[o1.clone(), o2.clone()]).unwrap();
        assert!(union.robust_accuracy() <= o1.robust_accuracy() + 1e-12);
        assert!(union.robust_accuracy() <= o2.robust_accuracy() + 1e-12);
        for ((e1, e2), eu) in o1.examples.iter().zip(&o2.examples).zip(&union.examples) {
            assert_eq!(eu.success, e1.success || e2.success);
            assert_eq!(eu.forwards, e1.forwards + e2.forwards);
        }
    }

    #[test]
    fn ensemble_rejects_mismatched_outcomes() {
        let (a, _, ds) = trained_pair();
        let threat = ThreatModel::linf(0.05);
        let o1 = pgd(&a, &ds.subset(5), &threat, &SurrogateLoss::CrossEntropy, &AttackBudget::new(2, 1, 1)).unwrap();
        let o2 = pgd(&a, &ds.subset(6), &threat, &SurrogateLoss::CrossEntropy, &AttackBudget::new(2, 1, 1)).unwrap();
        assert!(worst_case_ensemble(&[o1, o2]).is_err());
        assert!(worst_case_ensemble(&[]).is_err());
    }
}
