//! SOAP purification: descend a label-consistency auxiliary loss (distance
//! between the logits of two augmented views) over a grid of eleven
//! purification radii and keep the candidate with the lowest auxiliary loss.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{CostRecord, Defense, DefenseRun, GradientMode};
use crate::attacks::ThreatModel;
use crate::autodiff::{Graph, GraphBuilder};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::Tensor;

/// Amplitude of the additive-noise augmentation (first view).
const NOISE_AMPLITUDE: f64 = 0.05;
/// Coordinate dropout rate of the second view.
const DROPOUT_RATE: f64 = 0.1;

pub struct SoapDefense {
    pub steps_per_radius: usize,
    /// Eleven purification radii, always including zero.
    pub grid: Vec<f64>,
}

impl SoapDefense {
    pub fn new(steps_per_radius: usize, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != 11 {
            return Err(Error::invalid(format!(
                "soap radius grid must have exactly eleven values, got {}",
                grid.len()
            )));
        }
        if !grid.contains(&0.0) {
            return Err(Error::invalid("soap radius grid must include zero"));
        }
        if grid.iter().any(|&r| r < 0.0) {
            return Err(Error::invalid("soap radii must be non-negative"));
        }
        Ok(SoapDefense { steps_per_radius, grid })
    }

    /// Default grid: eleven radii linearly spaced on `[0, 2 eps]`.
    pub fn with_default_grid(eps: f64) -> Result<Self> {
        let grid = (0..11).map(|i| i as f64 * eps / 5.0).collect();
        SoapDefense::new(5, grid)
    }

    /// Auxiliary-loss graph `|| f(z + n) - f(z * m) ||_2` with the two
    /// augmentation draws baked in as constants. One evaluation of this graph
    /// is two static forwards; one backward is two static backwards.
    fn aux_graph(&self, model: &Classifier, noise: &Tensor, mask: &Tensor) -> Result<Graph> {
        let mut b = GraphBuilder::new();
        let z = b.input(vec![model.input_dim()]);
        let nc = b.constant(noise.clone());
        let mc = b.constant(mask.clone());
        let v1 = b.add(z, nc);
        let v2 = b.mul(z, mc);
        let l1 = model.graph_logits(&mut b, v1);
        let l2 = model.graph_logits(&mut b, v2);
        let diff = b.sub(l1, l2);
        let loss = b.l2_norm(diff);
        b.finish(loss)
    }
}

impl Defense for SoapDefense {
    fn name(&self) -> &'static str {
        "soap"
    }

    fn is_randomized(&self) -> bool {
        true // augmentation draws
    }

    fn supported_modes(&self) -> &'static [GradientMode] {
        &[GradientMode::BpdaIdentity, GradientMode::BpdaTrajectory]
    }

    /// Per radius: five descent steps without random start, each evaluating
    /// the two-view auxiliary loss (2 forwards + 2 backwards). The candidate
    /// of a radius is its best evaluated iterate; the winner is the lowest
    /// auxiliary loss, ties to the smaller radius. Total cost with defaults:
    /// `5 * 11 * 2` forwards and backwards, plus one classification forward.
    fn defend(&self, model: &Classifier, x: &Tensor, seed: u64) -> Result<DefenseRun> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::vector(
            (0..x.len()).map(|_| rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).collect(),
        );
        let mask = Tensor::vector(
            (0..x.len()).map(|_| if rng.gen_bool(DROPOUT_RATE) { 0.0 } else { 1.0 }).collect(),
        );
        let mut g = self.aux_graph(model, &noise, &mask)?;
        let mut cost = CostRecord::default();

        struct Branch {
            loss: f64,
            candidate: Tensor,
            evaluated: Vec<(Tensor, f64)>,
        }
        let mut best: Option<(f64, Branch)> = None; // (radius, branch)
        for &radius in &self.grid {
            let threat = ThreatModel::linf(radius);
            let step_size = radius / 4.0;
            let mut delta = Tensor::zeros(vec![x.len()]);
            let mut evaluated = Vec::with_capacity(self.steps_per_radius);
            for _ in 0..self.steps_per_radius {
                let probe = x.add(&delta);
                let value = g.forward_eval(std::slice::from_ref(&probe))?.scalar_value();
                let grad = g.backward_grad(0)?;
                cost.static_forwards += 2;
                cost.static_backwards += 2;
                evaluated.push((probe, value));
                let step = grad.map(|v| step_size * v.signum());
                delta = threat.project(x, &delta.sub(&step));
            }
            let (candidate, loss) = evaluated
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .map(|(p, v)| (p.clone(), *v))
                .unwrap();
            let branch = Branch { loss, candidate, evaluated };
            let better = match &best {
                None => true,
                // Strictly lower loss wins; ties keep the earlier (smaller)
                // radius since the grid is scanned in order.
                Some((_, b)) => branch.loss < b.loss,
            };
            if better {
                best = Some((radius, branch));
            }
        }
        let (_, winner) = best.unwrap();
        let purified = winner.candidate.clone();
        let logits = model.forward(&purified);
        cost.static_forwards += 1;

        // Non-increasing trace: prefix minima of the winning branch.
        let mut trace = Vec::with_capacity(winner.evaluated.len());
        let mut running = f64::INFINITY;
        for (_, v) in &winner.evaluated {
            running = running.min(*v);
            trace.push(running);
        }
        let iterates: Vec<Tensor> = winner.evaluated.into_iter().map(|(p, _)| p).collect();
        Ok(DefenseRun { logits, purified, iterates, trace, cost })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{data, init_classifier, train_standard, TrainConfig};

    fn trained() -> Classifier {
        let ds = data::gaussians2d(100, 3);
        train_standard(&init_classifier(&[2, 8], 2, 3).unwrap(), &ds, &TrainConfig::quick(3))
            .unwrap()
    }

    #[test]
    fn cost_contract_is_110_aux_passes_plus_one() {
        let model = trained();
        let defense = SoapDefense::with_default_grid(0.05).unwrap();
        let run = defense.defend(&model, &Tensor::vector(vec![0.4, 0.6]), 1).unwrap();
        assert_eq!(run.cost.static_forwards, 5 * 11 * 2 + 1);
        assert_eq!(run.cost.static_backwards, 5 * 11 * 2);
    }

    #[test]
    fn selected_candidate_minimizes_the_grid_by_brute_force() {
        // Re-run every branch by hand and confirm no branch can beat the
        // winner's auxiliary loss.
        let model = trained();
        let defense = SoapDefense::with_default_grid(0.08).unwrap();
        let x = Tensor::vector(vec![0.52, 0.47]);
        let seed = 9;
        let run = defense.defend(&model, &x, seed).unwrap();
        let winner_loss = *run.trace.last().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::vector(
            (0..2).map(|_| rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).collect(),
        );
        let mask = Tensor::vector(
            (0..2).map(|_| if rng.gen_bool(DROPOUT_RATE) { 0.0 } else { 1.0 }).collect(),
        );
        let mut g = defense.aux_graph(&model, &noise, &mask).unwrap();
        for &radius in &defense.grid {
            let threat = ThreatModel::linf(radius);
            let mut delta = Tensor::zeros(vec![2]);
            let mut branch_best = f64::INFINITY;
            for _ in 0..5 {
                let probe = x.add(&delta);
                let v = g.forward_eval(std::slice::from_ref(&probe)).unwrap().scalar_value();
                let grad = g.backward_grad(0).unwrap();
                branch_best = branch_best.min(v);
                let step = grad.map(|v| (radius / 4.0) * v.signum());
                delta = threat.project(&x, &delta.sub(&step));
            }
            assert!(winner_loss <= branch_best + 1e-12, "branch {radius} beats the winner");
        }
    }

    #[test]
    fn trace_is_non_increasing_and_point_feasible() {
        let model = trained();
        let defense = SoapDefense::with_default_grid(0.08).unwrap();
        let x = Tensor::vector(vec![0.31, 0.33]);
        let run = defense.defend(&model, &x, 4).unwrap();
        for w in run.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let max_radius = defense.grid.iter().cloned().fold(0.0, f64::max);
        assert!(ThreatModel::linf(max_radius).is_feasible(&x, &run.purified.sub(&x)));
        assert_eq!(run.iterates.len(), 5);
    }

    #[test]
    fn grid_validation() {
        assert!(SoapDefense::new(5, vec![0.0; 10]).is_err());
        assert!(SoapDefense::new(5, vec![0.01; 11]).is_err()); // missing zero
        let mut grid: Vec<f64> = (0..11).map(|i| i as f64 * 0.01).collect();
        assert!(SoapDefense::new(5, grid.clone()).is_ok());
        grid[3] = -0.1;
        assert!(SoapDefense::new(5, grid).is_err());
    }

    #[test]
    fn identity_augmentations_make_zero_radius_win() {
        // With both augmentation draws degenerate (zero noise, no dropout)
        // the auxiliary loss is identically zero, so the zero-radius branch
        // ties everything and wins by the smaller-radius rule.
        let model = trained();
        let defense = SoapDefense::with_default_grid(0.08).unwrap();
        let x = Tensor::vector(vec![0.61, 0.42]);
        // Degenerate draws: noise amplitude 0 means noise is all zeros only
        // if the rng range is empty, so emulate by passing constants directly.
        let mut g = defense
            .aux_graph(&model, &Tensor::zeros(vec![2]), &Tensor::vector(vec![1.0, 1.0]))
            .unwrap();
        let v = g.forward_eval(std::slice::from_ref(&x)).unwrap().scalar_value();
        assert!(v.abs() < 1e-12);
        let grad = g.backward_grad(0).unwrap();
        // Zero loss everywhere on the identity views: descent never moves.
        assert!(grad.linf_norm() < 1e-9);
    }
}
