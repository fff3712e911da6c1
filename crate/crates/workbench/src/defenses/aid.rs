//! AID purification: descend the discriminator's "adversarialness" logit so
//! inputs look clean to a network trained to spot perturbations, then classify
//! with the untouched static model.

use super::{CostRecord, Defense, DefenseRun, GradientMode};
use crate::attacks::ThreatModel;
use crate::autodiff::{Graph, GraphBuilder};
use crate::error::{Error, Result};
use crate::models::{Classifier, Discriminator, DiscriminatorMode};
use crate::tensor::Tensor;

pub struct AidDefense {
    pub disc: Discriminator,
    pub steps: usize,
    pub step_size: f64,
    pub radius: f64,
}

impl AidDefense {
    pub fn new(disc: Discriminator, steps: usize, step_size: f64, radius: f64) -> Result<Self> {
        if disc.mode != DiscriminatorMode::Aid {
            return Err(Error::invalid("aid defense needs a discriminator in aid mode"));
        }
        if steps == 0 {
            return Err(Error::invalid("aid needs at least one step"));
        }
        if step_size < 0.0 || radius < 0.0 {
            return Err(Error::invalid("aid step and radius must be non-negative"));
        }
        Ok(AidDefense { disc, steps, step_size, radius })
    }

    /// Scalar objective: the discriminator's adversarialness logit.
    fn objective_graph(&self) -> Result<Graph> {
        let mut b = GraphBuilder::new();
        let z = b.input(vec![self.disc.net.input_dim()]);
        let logits = self.disc.net.graph_logits(&mut b, z);
        let loss = b.select(logits, 0);
        b.finish(loss)
    }
}

impl Defense for AidDefense {
    fn name(&self) -> &'static str {
        "aid"
    }

    fn is_randomized(&self) -> bool {
        false
    }

    fn supported_modes(&self) -> &'static [GradientMode] {
        &[GradientMode::BpdaIdentity, GradientMode::BpdaTrajectory]
    }

    /// N signed descent steps on the discriminator logit from a zero start;
    /// the purified point is the best evaluated iterate (the clean input
    /// itself is the first candidate, so purification can never raise the
    /// discriminator score). Cost: N discriminator forward/backward pairs plus
    /// the one classification forward.
    fn defend(&self, model: &Classifier, x: &Tensor, _seed: u64) -> Result<DefenseRun> {
        let threat = ThreatModel::linf(self.radius);
        let mut g = self.objective_graph()?;
        let mut cost = CostRecord::default();
        let mut delta = Tensor::zeros(vec![x.len()]);
        let mut evaluated = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let probe = x.add(&delta);
            let value = g.forward_eval(std::slice::from_ref(&probe))?.scalar_value();
            let grad = g.backward_grad(0)?;
            cost.disc_forwards += 1;
            cost.disc_backwards += 1;
            evaluated.push((probe, value));
            let step = grad.map(|v| self.step_size * v.signum());
            delta = threat.project(x, &delta.sub(&step));
        }
        let purified = evaluated
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(p, _)| p.clone())
            .unwrap();
        let logits = model.forward(&purified);
        cost.static_forwards += 1;

        let mut trace = Vec::with_capacity(evaluated.len());
        let mut running = f64::INFINITY;
        for (_, v) in &evaluated {
            running = running.min(*v);
            trace.push(running);
        }
        let iterates: Vec<Tensor> = evaluated.into_iter().map(|(p, _)| p).collect();
        Ok(DefenseRun { logits, purified, iterates, trace, cost })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    use crate::models::{
        data, init_classifier, train_discriminator, train_standard, TrainConfig,
    };

    fn setup() -> (Classifier, Discriminator) {
        let ds = data::gaussians2d(120, 3);
        let model =
            train_standard(&init_classifier(&[2, 8], 2, 3).unwrap(), &ds, &TrainConfig::quick(3))
                .unwrap();
        let threat = ThreatModel::linf(0.1);
        let trained = train_discriminator(
            &model,
            &ds,
            &threat,
            DiscriminatorMode::Aid,
            &[8],
            &TrainConfig::quick(7),
        )
        .unwrap();
        (model, trained.disc)
    }

    #[test]
    fn cost_contract_is_n_discriminator_pairs_plus_one_static_forward() {
        let (model, disc) = setup();
        let defense = AidDefense::new(disc, 4, 0.025, 0.1).unwrap();
        let run = defense.defend(&model, &Tensor::vector(vec![0.4, 0.5]), 0).unwrap();
        assert_eq!(run.cost.disc_forwards, 4);
        assert_eq!(run.cost.disc_backwards, 4);
        assert_eq!(run.cost.static_forwards, 1);
        assert_eq!(run.cost.static_backwards, 0);
    }

    #[test]
    fn zero_radius_is_the_identity() {
        let (model, disc) = setup();
        let defense = AidDefense::new(disc, 4, 0.0, 0.0).unwrap();
        let x = Tensor::vector(vec![0.3, 0.6]);
        let run = defense.defend(&model, &x, 0).unwrap();
        assert_eq!(run.purified, x);
        assert!(run.logits.max_abs_diff(&model.forward(&x)) < 1e-12);
    }

    #[test]
    fn purification_never_raises_the_discriminator_score() {
        // On PGD-style perturbed points the mean adversarial probability after
        // purification must be at most the mean before.
        let (model, disc) = setup();
        let defense = AidDefense::new(disc.clone(), 4, 0.025, 0.1).unwrap();
        let ds = data::gaussians2d(40, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut before = 0.0;
        let mut after = 0.0;
        for (x, _) in ds.iter() {
            // A crude perturbation suffices: random corner of the 0.1 ball.
            let perturbed = Tensor::vector(
                x.data().iter().map(|&v| v + if rng.gen_bool(0.5) { 0.1 } else { -0.1 }).collect(),
            )
            .clamp01();
            before += disc.adversarial_probability(&perturbed);
            let run = defense.defend(&model, &perturbed, 0).unwrap();
            after += disc.adversarial_probability(&run.purified);
            for w in run.trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
        assert!(after <= before + 1e-9, "after {after} > before {before}");
    }

    #[test]
    fn rejects_wrong_discriminator_mode_and_zero_steps() {
        let (_, disc) = setup();
        let atld = Discriminator { net: disc.net.clone(), mode: DiscriminatorMode::Atld };
        assert!(AidDefense::new(atld, 4, 0.025, 0.1).is_err());
        assert!(AidDefense::new(disc, 0, 0.025, 0.1).is_err());
    }
}
