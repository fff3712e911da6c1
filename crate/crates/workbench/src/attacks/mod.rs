//! The attacker's toolbox: threat models, surrogate losses, white-box and
//! black-box attacks, transfer attacks, and worst-case ensembling.

mod blackbox;
mod loss;
mod transfer;
mod whitebox;

pub use blackbox::{ray_search_attack, score_random_search};
pub use loss::{append_loss_graph, eval_loss};
pub use transfer::{transfer_attack, worst_case_ensemble, TransferPolicy};
pub use whitebox::{apgd, apgd_traced, eot_gradient, fgsm, pgd, run_whitebox, WhiteboxMethod};

use serde::{Deserialize, Serialize};

use crate::autodiff::GraphBuilder;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::Tensor;

/// Slack on norm feasibility checks.
pub const NORM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormP {
    L2,
    Linf,
}

/// lp threat model: `||delta||_p <= eps` and `x + delta` in the unit box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThreatModel {
    pub p: NormP,
    pub eps: f64,
}

impl ThreatModel {
    pub fn linf(eps: f64) -> Self {
        ThreatModel { p: NormP::Linf, eps }
    }

    pub fn l2(eps: f64) -> Self {
        ThreatModel { p: NormP::L2, eps }
    }

    pub fn norm(&self, delta: &Tensor) -> f64 {
        match self.p {
            NormP::L2 => delta.l2_norm(),
            NormP::Linf => delta.linf_norm(),
        }
    }

    /// Projects `delta` onto the feasible set around `x`: first onto the
    /// eps-ball, then onto the box, twice over for the l2 case where the
    /// composition order is not exact.
    pub fn project(&self, x: &Tensor, delta: &Tensor) -> Tensor {
        let mut d = delta.clone();
        let rounds = match self.p {
            NormP::Linf => 1,
            NormP::L2 => 2,
        };
        for _ in 0..rounds {
            d = match self.p {
                NormP::Linf => d.map(|v| v.clamp(-self.eps, self.eps)),
                NormP::L2 => {
                    let n = d.l2_norm();
                    if n > self.eps && n > 0.0 {
                        d.scale(self.eps / n)
                    } else {
                        d
                    }
                }
            };
            // Box clamp, expressed on delta.
            d = x.add(&d).clamp01().sub(x);
        }
        d
    }

    pub fn is_feasible(&self, x: &Tensor, delta: &Tensor) -> bool {
        if self.norm(delta) > self.eps + NORM_SLACK {
            return false;
        }
        x.add(delta)
            .data()
            .iter()
            .all(|&v| (-NORM_SLACK..=1.0 + NORM_SLACK).contains(&v))
    }
}

/// Per-attack budget. The seed pins every random choice the attack makes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackBudget {
    pub iterations: usize,
    pub restarts: usize,
    pub n_eot: usize,
    pub seed: u64,
    pub query_cap: u64,
}

impl AttackBudget {
    pub fn new(iterations: usize, restarts: usize, seed: u64) -> Self {
        AttackBudget { iterations, restarts, n_eot: 1, seed, query_cap: 10_000 }
    }

    pub fn with_eot(mut self, n: usize) -> Self {
        self.n_eot = n;
        self
    }
}

/// Surrogate losses of the attack toolbox; higher values are more adversarial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateLoss {
    CrossEntropy,
    CwMargin,
    Dlr,
    /// Target is a 1-based class label.
    TargetedDlr(usize),
}

impl SurrogateLoss {
    /// DLR needs the 1st and 3rd order statistics of the logits, so K >= 4.
    pub fn dlr(num_classes: usize) -> Result<Self> {
        if num_classes < 4 {
            return Err(Error::invalid("DLR loss requires at least 4 classes"));
        }
        Ok(SurrogateLoss::Dlr)
    }

    pub fn targeted_dlr(target: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 4 {
            return Err(Error::invalid("targeted DLR loss requires at least 4 classes"));
        }
        if target == 0 || target > num_classes {
            return Err(Error::invalid("target class out of range"));
        }
        Ok(SurrogateLoss::TargetedDlr(target))
    }

    /// DLR when the class count allows it, otherwise CW margin.
    pub fn dlr_or_margin(num_classes: usize) -> Self {
        if num_classes >= 4 {
            SurrogateLoss::Dlr
        } else {
            SurrogateLoss::CwMargin
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SurrogateLoss::CrossEntropy => "cross-entropy",
            SurrogateLoss::CwMargin => "cw-margin",
            SurrogateLoss::Dlr => "dlr",
            SurrogateLoss::TargetedDlr(_) => "targeted-dlr",
        }
    }
}

/// Result of one loss/label query against a target.
#[derive(Debug, Clone, Copy)]
pub struct EvalRecord {
    pub loss: f64,
    pub predicted: usize,
}

/// Anything an attack can aim at: a bare classifier, a defended model, or a
/// deliberately broken wrapper used by the red-flag tests.
pub trait AttackTarget {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn is_randomized(&self) -> bool {
        false
    }
    /// Loss value and predicted label at `x`; one forward unit.
    fn eval(&self, loss: &SurrogateLoss, x: &Tensor, y: usize, seed: u64) -> Result<EvalRecord>;
    /// Loss, predicted label, and input gradient at `x`; one forward and one
    /// backward unit.
    fn eval_grad(
        &self,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        seed: u64,
    ) -> Result<(EvalRecord, Tensor)>;
    /// Decision oracle.
    fn predict_label(&self, x: &Tensor, seed: u64) -> Result<usize> {
        Ok(self
            .eval(&SurrogateLoss::CrossEntropy, x, 1, seed)?
            .predicted)
    }
}

impl AttackTarget for Classifier {
    fn input_dim(&self) -> usize {
        self.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn eval(&self, loss: &SurrogateLoss, x: &Tensor, y: usize, _seed: u64) -> Result<EvalRecord> {
        let logits = self.forward(x);
        Ok(EvalRecord { loss: eval_loss(loss, &logits, y)?, predicted: logits.argmax() + 1 })
    }

    fn eval_grad(
        &self,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        _seed: u64,
    ) -> Result<(EvalRecord, Tensor)> {
        let mut b = GraphBuilder::new();
        let xin = b.input(vec![self.input_dim()]);
        let logits = self.graph_logits(&mut b, xin);
        let loss_node = append_loss_graph(&mut b, logits, loss, y, self.num_classes)?;
        let mut g = b.finish(loss_node)?;
        let value = g.forward_eval(std::slice::from_ref(x))?.scalar_value();
        let predicted = g.node_value(logits).unwrap().argmax() + 1;
        let grad = g.backward_grad(0)?;
        Ok((EvalRecord { loss: value, predicted }, grad))
    }
}

/// Per-example attack result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub example_id: usize,
    pub best_delta: Tensor,
    pub best_loss: f64,
    pub success: bool,
    pub forwards: u64,
    pub backwards: u64,
    pub queries: u64,
}

/// Dataset-level attack result: one entry per attacked example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub examples: Vec<ExampleOutcome>,
}

impl AttackOutcome {
    /// Fraction of examples still classified correctly under the attack.
    pub fn robust_accuracy(&self) -> f64 {
        if self.examples.is_empty() {
            return 1.0;
        }
        let ok = self.examples.iter().filter(|e| !e.success).count();
        ok as f64 / self.examples.len() as f64
    }

    pub fn success_rate(&self) -> f64 {
        1.0 - self.robust_accuracy()
    }

    pub fn total_forwards(&self) -> u64 {
        self.examples.iter().map(|e| e.forwards).sum()
    }

    pub fn total_backwards(&self) -> u64 {
        self.examples.iter().map(|e| e.backwards).sum()
    }

    /// One JSON object per line, one line per example.
    pub fn to_json_lines(&self, threat: &ThreatModel) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let record = serde_json::json!({
                "example_id": e.example_id,
                "best_loss": e.best_loss,
                "success": e.success,
                "delta_norm": threat.norm(&e.best_delta),
                "forwards": e.forwards,
                "backwards": e.backwards,
                "queries": e.queries,
            });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        out
    }
}
