//! ADP purification: an ensemble of S score-guided denoising runs. Each run
//! starts from a fresh noisy copy of the input, follows the score field for T
//! adaptive steps, and the defense outputs the log of the averaged softmax.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{CostRecord, Defense, DefenseRun, GradientMode};
use crate::error::{Error, Result};
use crate::models::{data::gauss, Classifier, ScoreNetwork};
use crate::tensor::Tensor;

pub struct AdpDefense {
    pub score: ScoreNetwork,
    /// Purification steps per run.
    pub steps: usize,
    /// Ensemble size.
    pub runs: usize,
}

impl AdpDefense {
    pub fn new(score: ScoreNetwork, steps: usize, runs: usize) -> Result<Self> {
        if steps == 0 || runs == 0 {
            return Err(Error::invalid("adp needs at least one step and one run"));
        }
        if score.sigma <= 0.0 {
            return Err(Error::invalid("adp noise scale must be positive"));
        }
        Ok(AdpDefense { score, steps, runs })
    }

    fn checked_score(&self, x: &Tensor, cost: &mut CostRecord) -> Result<Tensor> {
        let s = self.score.score(x);
        cost.score_forwards += 1;
        if !s.is_finite() {
            return Err(Error::invalid("adp score network produced a non-finite output"));
        }
        Ok(s)
    }
}

impl Defense for AdpDefense {
    fn name(&self) -> &'static str {
        "adp"
    }

    fn is_randomized(&self) -> bool {
        true // noisy starts and per-step reference noise
    }

    fn supported_modes(&self) -> &'static [GradientMode] {
        &[GradientMode::BpdaIdentity, GradientMode::BpdaTrajectory]
    }

    /// Per step the score network is called twice on the same point: once for
    /// the adaptive step size `alpha_i = sigma^2 ||xi|| / ||s(x_i)||` (fresh
    /// reference draw `xi`) and once for the update itself, giving `2 T S`
    /// score forwards; each run ends in one classifier forward, `S` in total.
    fn defend(&self, model: &Classifier, x: &Tensor, seed: u64) -> Result<DefenseRun> {
        let sigma = self.score.sigma;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cost = CostRecord::default();
        let mut mean_probs = Tensor::zeros(vec![model.num_classes]);
        let mut finals = Vec::with_capacity(self.runs);
        for _ in 0..self.runs {
            let mut z = Tensor::vector(
                x.data().iter().map(|&v| v + sigma * gauss(&mut rng)).collect(),
            )
            .clamp01();
            for _ in 0..self.steps {
                let s_for_alpha = self.checked_score(&z, &mut cost)?;
                let reference = Tensor::vector((0..x.len()).map(|_| gauss(&mut rng)).collect());
                let alpha = sigma * sigma * reference.l2_norm() / s_for_alpha.l2_norm().max(1e-12);
                let s = self.checked_score(&z, &mut cost)?;
                z = z.add(&s.scale(alpha)).clamp01();
            }
            let logits = model.forward(&z);
            cost.static_forwards += 1;
            let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.data().iter().map(|v| (v - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            mean_probs =
                mean_probs.add(&Tensor::vector(exps).scale(1.0 / (total * self.runs as f64)));
            finals.push(z);
        }
        // Log probabilities as logits: softmax recovers the averaged ensemble
        // distribution exactly, so every surrogate loss applies unchanged.
        let logits = mean_probs.map(|p| p.max(1e-300).ln());
        // Representative purified point: mean of the runs' final iterates.
        let mut purified = Tensor::zeros(vec![x.len()]);
        for f in &finals {
            purified = purified.add(&f.scale(1.0 / self.runs as f64));
        }
        Ok(DefenseRun { logits, purified, iterates: finals, trace: Vec::new(), cost })
    }
}
