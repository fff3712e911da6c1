//! Red-flag diagnostics: deterministic rules that fire when an evaluation
//! shows a documented symptom of overestimated robustness, plus two
//! deliberately broken wrappers used to validate that the rules fire.

use super::{StageAttack, StageResult};
use crate::attacks::{
    append_loss_graph, worst_case_ensemble, AttackOutcome, AttackTarget, EvalRecord, SurrogateLoss,
};
use crate::autodiff::GraphBuilder;
use crate::error::Result;
use crate::models::Classifier;
use crate::tensor::Tensor;

/// Minimum accuracy-point gap before a comparison rule fires, to keep the
/// detectors quiet under sampling noise.
pub const RED_FLAG_TOLERANCE: f64 = 0.01;

fn union_of<'a>(
    stages: &'a [StageResult],
    pick: impl Fn(&StageResult, &StageAttack) -> bool,
) -> Option<AttackOutcome> {
    let outcomes: Vec<AttackOutcome> = stages
        .iter()
        .flat_map(|s| s.attacks.iter().filter(|a| pick(s, a)).map(|a| a.outcome.clone()))
        .collect();
    if outcomes.is_empty() {
        None
    } else {
        worst_case_ensemble(&outcomes).ok()
    }
}

fn find<'a>(stages: &'a [StageResult], stage: &str, name: &str) -> Option<&'a AttackOutcome> {
    stages
        .iter()
        .find(|s| s.stage == stage)
        .and_then(|s| s.attacks.iter().find(|a| a.name == name))
        .map(|a| &a.outcome)
}

/// Applies every red-flag rule to a set of stage results. Each rule compares
/// success rates and fires only past [`RED_FLAG_TOLERANCE`]:
/// - FGSM stronger than PGD (gradient masking);
/// - black-box attacks stronger than the white-box/BPDA union (obfuscated
///   gradients);
/// - transfer from the static core stronger than direct attacks on the
///   defense;
/// - the defended model less robust than its static core under the
///   decision-based attack (the defense has no effect, or worse).
pub fn detect_red_flags(stages: &[StageResult]) -> Vec<String> {
    let mut flags = Vec::new();

    if let (Some(fgsm), Some(pgd)) =
        (find(stages, "white-box", "fgsm-ce"), find(stages, "white-box", "pgd-ce"))
    {
        if fgsm.success_rate() > pgd.success_rate() + RED_FLAG_TOLERANCE {
            flags.push(format!(
                "fgsm ({:.3}) outperforms pgd ({:.3}): gradient masking suspected",
                fgsm.success_rate(),
                pgd.success_rate()
            ));
        }
    }

    let gradient_union = union_of(stages, |s, a| {
        (s.stage == "white-box" || s.stage == "bpda") && a.on_defended
    });
    let blackbox_union = union_of(stages, |s, a| s.stage == "black-box" && a.on_defended);
    if let (Some(bb), Some(wb)) = (&blackbox_union, &gradient_union) {
        if bb.success_rate() > wb.success_rate() + RED_FLAG_TOLERANCE {
            flags.push(format!(
                "black-box attacks ({:.3}) outperform white-box attacks ({:.3}): obfuscated gradients suspected",
                bb.success_rate(),
                wb.success_rate()
            ));
        }
    }

    let transfer_union = union_of(stages, |s, a| s.stage == "transfer" && a.on_defended);
    if let (Some(tr), Some(wb)) = (&transfer_union, &gradient_union) {
        if tr.success_rate() > wb.success_rate() + RED_FLAG_TOLERANCE {
            flags.push(format!(
                "transfer from the static model ({:.3}) outperforms direct attacks ({:.3}): the defense obstructs its own evaluation",
                tr.success_rate(),
                wb.success_rate()
            ));
        }
    }

    if let (Some(def), Some(st)) = (
        find(stages, "black-box", "ray-search-defended"),
        find(stages, "black-box", "ray-search-static"),
    ) {
        if def.robust_accuracy() + RED_FLAG_TOLERANCE < st.robust_accuracy() {
            flags.push(format!(
                "decision-based attack: defended ({:.3}) is less robust than the static core ({:.3})",
                def.robust_accuracy(),
                st.robust_accuracy()
            ));
        }
    }

    flags
}

/// Diagnostic fixture: truthful gradients only at registered clean points,
/// negated gradients everywhere else. Single-query attacks from the clean
/// point (FGSM) work; iterative attacks are actively misled — the classic
/// gradient-masking signature.
pub struct GradientMasked<'a> {
    pub inner: &'a Classifier,
    clean_points: Vec<Tensor>,
}

impl<'a> GradientMasked<'a> {
    pub fn new(inner: &'a Classifier, clean_points: Vec<Tensor>) -> Self {
        GradientMasked { inner, clean_points }
    }
}

impl AttackTarget for GradientMasked<'_> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn eval(&self, loss: &SurrogateLoss, x: &Tensor, y: usize, seed: u64) -> Result<EvalRecord> {
        self.inner.eval(loss, x, y, seed)
    }

    fn eval_grad(
        &self,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        seed: u64,
    ) -> Result<(EvalRecord, Tensor)> {
        let (record, grad) = self.inner.eval_grad(loss, x, y, seed)?;
        if self.clean_points.contains(x) {
            Ok((record, grad))
        } else {
            Ok((record, grad.scale(-1.0)))
        }
    }
}

/// Diagnostic fixture: logits multiplied by a huge constant. Predictions are
/// unchanged, but the cross-entropy surface saturates and its gradient
/// vanishes numerically — decision-based black-box attacks keep working while
/// gradient attacks stall.
pub struct ConfidenceFlattened<'a> {
    pub inner: &'a Classifier,
    pub scale: f64,
}

impl AttackTarget for ConfidenceFlattened<'_> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn eval(&self, loss: &SurrogateLoss, x: &Tensor, y: usize, _seed: u64) -> Result<EvalRecord> {
        let logits = self.inner.forward(x).scale(self.scale);
        Ok(EvalRecord {
            loss: crate::attacks::eval_loss(loss, &logits, y)?,
            predicted: logits.argmax() + 1,
        })
    }

    fn eval_grad(
        &self,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        _seed: u64,
    ) -> Result<(EvalRecord, Tensor)> {
        let mut b = GraphBuilder::new();
        let xin = b.input(vec![self.inner.input_dim()]);
        let logits = self.inner.graph_logits(&mut b, xin);
        let scaled = b.scale(logits, self.scale);
        let loss_node = append_loss_graph(&mut b, scaled, loss, y, self.inner.num_classes)?;
        let mut g = b.finish(loss_node)?;
        let value = g.forward_eval(std::slice::from_ref(x))?.scalar_value();
        let predicted = g.node_value(scaled).unwrap().argmax() + 1;
        let grad = g.backward_grad(0)?;
        Ok((EvalRecord { loss: value, predicted }, grad))
    }
}
