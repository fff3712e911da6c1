//! Hedge defense: pre-classification ascent on the cross-entropy loss summed
//! over all classes, pushing inputs away from every decision boundary at once.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{CostRecord, Defense, DefenseRun, GradientMode};
use crate::attacks::ThreatModel;
use crate::autodiff::GraphBuilder;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::Tensor;

pub struct HedgeDefense {
    pub steps: usize,
    pub radius: f64,
    pub step_size: f64,
}

impl HedgeDefense {
    pub fn new(steps: usize, radius: f64, step_size: f64) -> Result<Self> {
        if radius < 0.0 || step_size < 0.0 {
            return Err(Error::invalid("hedge radius and step must be non-negative"));
        }
        Ok(HedgeDefense { steps, radius, step_size })
    }
}

impl Defense for HedgeDefense {
    fn name(&self) -> &'static str {
        "hedge"
    }

    fn is_randomized(&self) -> bool {
        true // random ascent start
    }

    fn supported_modes(&self) -> &'static [GradientMode] {
        &[GradientMode::BpdaIdentity, GradientMode::BpdaTrajectory]
    }

    /// N ascent steps on `-sum_k log p_k(x + delta)` inside the linf ball,
    /// then one classification at the final iterate: exactly `N + 1` static
    /// forwards and `N` static backwards.
    fn defend(&self, model: &Classifier, x: &Tensor, seed: u64) -> Result<DefenseRun> {
        let threat = ThreatModel::linf(self.radius);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Summed-CE objective: -sum_k log softmax(f(z))_k.
        let mut b = GraphBuilder::new();
        let xin = b.input(vec![model.input_dim()]);
        let logits = model.graph_logits(&mut b, xin);
        let ls = b.log_softmax(logits);
        let s = b.sum(ls);
        let loss = b.scale(s, -1.0);
        let mut g = b.finish(loss)?;

        let mut delta = if self.radius > 0.0 {
            let start = Tensor::vector(
                (0..x.len()).map(|_| rng.gen_range(-self.radius..self.radius)).collect(),
            );
            threat.project(x, &start)
        } else {
            Tensor::zeros(vec![x.len()])
        };
        let mut cost = CostRecord::default();
        let mut trace = Vec::with_capacity(self.steps);
        let mut iterates = Vec::with_capacity(self.steps + 1);
        iterates.push(x.add(&delta));
        for _ in 0..self.steps {
            let value = g.forward_eval(&[x.add(&delta)])?.scalar_value();
            let grad = g.backward_grad(0)?;
            cost.static_forwards += 1;
            cost.static_backwards += 1;
            trace.push(value);
            let step = grad.map(|v| self.step_size * v.signum());
            delta = threat.project(x, &delta.add(&step));
            iterates.push(x.add(&delta));
        }
        let purified = x.add(&delta);
        let logits = model.forward(&purified);
        cost.static_forwards += 1;
        Ok(DefenseRun { logits, purified, iterates, trace, cost })
    }
}
