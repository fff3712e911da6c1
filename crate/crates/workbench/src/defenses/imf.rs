//! Input-manipulation-first repair: one signed gradient step that lowers the
//! ATLD discriminator's softmax probability of the "adversarial" output, then
//! classification with the static model. The single signed step makes the
//! whole pipeline piecewise constant in its repair offset, so the defense
//! stays end-to-end differentiable almost everywhere.

use super::{CostRecord, Defense, DefenseRun, GradientMode};
use crate::attacks::{append_loss_graph, EvalRecord, SurrogateLoss, ThreatModel};
use crate::autodiff::{Graph, GraphBuilder};
use crate::error::{Error, Result};
use crate::models::{Classifier, Discriminator, DiscriminatorMode};
use crate::tensor::Tensor;

pub struct ImfDefense {
    pub disc: Discriminator,
    pub radius: f64,
}

impl ImfDefense {
    pub fn new(disc: Discriminator, radius: f64) -> Result<Self> {
        if disc.mode != DiscriminatorMode::Atld {
            return Err(Error::invalid("imf needs a discriminator in atld mode"));
        }
        if radius < 0.0 {
            return Err(Error::invalid("imf radius must be non-negative"));
        }
        Ok(ImfDefense { disc, radius })
    }

    /// Objective: log softmax probability of the adversarial output (index 0).
    fn objective_graph(&self) -> Result<Graph> {
        let mut b = GraphBuilder::new();
        let z = b.input(vec![self.disc.net.input_dim()]);
        let logits = self.disc.net.graph_logits(&mut b, z);
        let ls = b.log_softmax(logits);
        let loss = b.select(ls, 0);
        b.finish(loss)
    }

    /// The repair offset: one full-radius signed descent step on the
    /// objective, costing one discriminator forward/backward pair.
    fn repair_delta(&self, x: &Tensor, cost: &mut CostRecord) -> Result<(Tensor, f64)> {
        let mut g = self.objective_graph()?;
        let value = g.forward_eval(std::slice::from_ref(x))?.scalar_value();
        let grad = g.backward_grad(0)?;
        cost.disc_forwards += 1;
        cost.disc_backwards += 1;
        Ok((grad.map(|v| -self.radius * v.signum()), value))
    }
}

impl Defense for ImfDefense {
    fn name(&self) -> &'static str {
        "imf"
    }

    fn is_randomized(&self) -> bool {
        false
    }

    fn supported_modes(&self) -> &'static [GradientMode] {
        &[GradientMode::Unrolled, GradientMode::BpdaIdentity]
    }

    /// Exactly one discriminator forward/backward pair for the repair step
    /// plus the final classification forward.
    fn defend(&self, model: &Classifier, x: &Tensor, _seed: u64) -> Result<DefenseRun> {
        let threat = ThreatModel::linf(self.radius);
        let mut cost = CostRecord::default();
        let (delta, value) = self.repair_delta(x, &mut cost)?;
        let purified = x.add(&threat.project(x, &delta));
        let logits = model.forward(&purified);
        cost.static_forwards += 1;
        Ok(DefenseRun { logits, purified, iterates: Vec::new(), trace: vec![value], cost })
    }

    /// The signed step has zero derivative almost everywhere, so the unrolled
    /// gradient is the static-model gradient through `clamp01(x + delta)` with
    /// the repair offset held fixed — which is the exact derivative of the
    /// defense wherever the discriminator's gradient signs are locally stable.
    fn unrolled_loss_grad(
        &self,
        model: &Classifier,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        _seed: u64,
    ) -> Result<(EvalRecord, Tensor, CostRecord)> {
        let mut cost = CostRecord::default();
        let (delta, _) = self.repair_delta(x, &mut cost)?;
        let mut b = GraphBuilder::new();
        let xin = b.input(vec![model.input_dim()]);
        let dc = b.constant(delta);
        let shifted = b.add(xin, dc);
        let purify = b.clamp(shifted, 0.0, 1.0);
        let logits = model.graph_logits(&mut b, purify);
        let loss_node = append_loss_graph(&mut b, logits, loss, y, model.num_classes)?;
        let mut g = b.finish(loss_node)?;
        let value = g.forward_eval(std::slice::from_ref(x))?.scalar_value();
        let grad = g.backward_grad(0)?;
        cost.static_forwards += 1;
        cost.static_backwards += 1;
        let predicted = g.node_value(logits).unwrap().argmax() + 1;
        Ok((EvalRecord { loss: value, predicted }, grad, cost))
    }
}
