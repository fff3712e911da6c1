//! Adaptive test-time defenses behind one wrapper type.
//!
//! Every defense is a strategy object implementing [`Defense`]; a
//! [`DefendedModel`] pairs one with a static classifier, a randomness policy,
//! and a declared attack-gradient mode. The wrapper records exact per-call
//! inference costs split by network, and the gradient mode changes only how
//! attacks differentiate through the defense — never its forward predictions.

mod adp;
mod aid;
mod anti;
mod clc;
mod contrastive;
mod hedge;
mod imf;
mod soap;

pub use adp::AdpDefense;
pub use aid::AidDefense;
pub use anti::AntiAdversary;
pub use clc::ClcDefense;
pub use contrastive::{contrastive_defend, ContrastiveDefense, NegativeBank, Provenance};
pub use hedge::HedgeDefense;
pub use imf::ImfDefense;
pub use soap::SoapDefense;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    append_loss_graph, eval_loss, AttackTarget, EvalRecord, SurrogateLoss, ThreatModel,
};
use crate::autodiff::{BackwardOverride, GraphBuilder};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::Tensor;

/// Exact per-call inference cost, split by which network was exercised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRecord {
    pub static_forwards: u64,
    pub static_backwards: u64,
    pub disc_forwards: u64,
    pub disc_backwards: u64,
    pub score_forwards: u64,
    pub score_backwards: u64,
    pub encoder_forwards: u64,
    pub encoder_backwards: u64,
}

impl CostRecord {
    /// One plain static forward — the baseline unit of the overhead ratio.
    pub fn one_static_forward() -> Self {
        CostRecord { static_forwards: 1, ..Default::default() }
    }

    pub fn add(&mut self, other: &CostRecord) {
        self.static_forwards += other.static_forwards;
        self.static_backwards += other.static_backwards;
        self.disc_forwards += other.disc_forwards;
        self.disc_backwards += other.disc_backwards;
        self.score_forwards += other.score_forwards;
        self.score_backwards += other.score_backwards;
        self.encoder_forwards += other.encoder_forwards;
        self.encoder_backwards += other.encoder_backwards;
    }

    /// Total call units: every forward or backward pass of any network counts
    /// as one unit, matching the "inference time" ratios of the write-ups.
    pub fn call_units(&self) -> u64 {
        self.static_forwards
            + self.static_backwards
            + self.disc_forwards
            + self.disc_backwards
            + self.score_forwards
            + self.score_backwards
            + self.encoder_forwards
            + self.encoder_backwards
    }

    /// Overhead versus the bare static model (one forward per prediction).
    pub fn overhead_ratio(&self) -> f64 {
        self.call_units() as f64
    }
}

/// How attacks are allowed to differentiate through the defense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    /// Differentiate through the defense computation itself.
    Unrolled,
    /// Treat the purifier as the identity: gradient of the static model at
    /// the purified point.
    BpdaIdentity,
    /// Average static-model gradients over the recorded purification
    /// trajectory.
    BpdaTrajectory,
}

impl GradientMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unrolled" => Ok(GradientMode::Unrolled),
            "bpda-identity" => Ok(GradientMode::BpdaIdentity),
            "bpda-trajectory" => Ok(GradientMode::BpdaTrajectory),
            other => Err(Error::invalid(format!("unknown gradient mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GradientMode::Unrolled => "unrolled",
            GradientMode::BpdaIdentity => "bpda-identity",
            GradientMode::BpdaTrajectory => "bpda-trajectory",
        }
    }
}

/// Where a randomized defense gets its entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RandomnessPolicy {
    /// The defense draws no randomness at all.
    Deterministic,
    /// Every call reuses this fixed seed; predictions are deterministic.
    Seeded(u64),
    /// Every call uses the caller-supplied seed; attacks (EOT) vary it.
    Free,
}

/// Result of one defended inference.
#[derive(Debug, Clone)]
pub struct DefenseRun {
    /// Post-defense logits (log-probabilities for ensembling defenses).
    pub logits: Tensor,
    /// Representative purified input; equals the input for defenses that do
    /// not move it.
    pub purified: Tensor,
    /// Recorded purification trajectory, for trajectory-BPDA gradients.
    /// Empty when the defense does not iterate over inputs.
    pub iterates: Vec<Tensor>,
    /// Monitored objective values, one per defense iteration. Defenses with a
    /// descent contract record a non-increasing trace.
    pub trace: Vec<f64>,
    pub cost: CostRecord,
}

/// An adaptive test-time defense. Implementations are immutable; all per-call
/// state lives in the returned [`DefenseRun`].
pub trait Defense {
    fn name(&self) -> &'static str;
    /// Whether the defense consumes randomness (and is therefore sensitive
    /// to the randomness policy).
    fn is_randomized(&self) -> bool;
    fn supported_modes(&self) -> &'static [GradientMode];
    /// Runs the defense and classifies; the cost record is exact.
    fn defend(&self, model: &Classifier, x: &Tensor, seed: u64) -> Result<DefenseRun>;

    /// Loss and input gradient differentiating through the defense itself.
    /// Only defenses listing [`GradientMode::Unrolled`] implement this.
    fn unrolled_loss_grad(
        &self,
        _model: &Classifier,
        _loss: &SurrogateLoss,
        _x: &Tensor,
        _y: usize,
        _seed: u64,
    ) -> Result<(EvalRecord, Tensor, CostRecord)> {
        Err(Error::UnsupportedGradientMode(
            self.name().to_string(),
            GradientMode::Unrolled.name().to_string(),
        ))
    }

    /// Identity-BPDA gradient: by default the static-model gradient at the
    /// purified point. Defenses whose output is not a purified input (e.g.
    /// activation-offset defenses) override this.
    fn bpda_identity_grad(
        &self,
        model: &Classifier,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        seed: u64,
    ) -> Result<(EvalRecord, Tensor, CostRecord)> {
        let run = self.defend(model, x, seed)?;
        let record = EvalRecord { loss: eval_loss(loss, &run.logits, y)?, predicted: run.logits.argmax() + 1 };
        let (_, grad) = AttackTarget::eval_grad(model, loss, &run.purified, y, seed)?;
        let mut cost = run.cost;
        cost.add(&CostRecord { static_forwards: 1, static_backwards: 1, ..Default::default() });
        Ok((record, grad, cost))
    }
}

/// The trivial "defense": classify directly. Baseline for overhead ratios and
/// red-flag comparisons.
pub struct NoDefense;

impl Defense for NoDefense {
    fn name(&self) -> &'static str {
        "none"
    }

    fn is_randomized(&self) -> bool {
        false
    }

    fn supported_modes(&self) -> &'static [GradientMode] {
        &[GradientMode::Unrolled, GradientMode::BpdaIdentity]
    }

    fn defend(&self, model: &Classifier, x: &Tensor, _seed: u64) -> Result<DefenseRun> {
        Ok(DefenseRun {
            logits: model.forward(x),
            purified: x.clone(),
            iterates: Vec::new(),
            trace: Vec::new(),
            cost: CostRecord::one_static_forward(),
        })
    }

    fn unrolled_loss_grad(
        &self,
        model: &Classifier,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        seed: u64,
    ) -> Result<(EvalRecord, Tensor, CostRecord)> {
        let (record, grad) = AttackTarget::eval_grad(model, loss, x, y, seed)?;
        Ok((
            record,
            grad,
            CostRecord { static_forwards: 1, static_backwards: 1, ..Default::default() },
        ))
    }
}

/// A static classifier wrapped with one adaptive test-time defense.
pub struct DefendedModel {
    pub model: Classifier,
    pub defense: Box<dyn Defense>,
    pub randomness: RandomnessPolicy,
    pub gradient_mode: GradientMode,
}

/// Label, logits, and cost of one defended prediction.
#[derive(Debug, Clone)]
pub struct DefendedPrediction {
    pub label: usize,
    pub logits: Tensor,
    pub cost: CostRecord,
}

impl DefendedModel {
    pub fn new(
        model: Classifier,
        defense: Box<dyn Defense>,
        randomness: RandomnessPolicy,
        gradient_mode: GradientMode,
    ) -> Result<Self> {
        if !defense.supported_modes().contains(&gradient_mode) {
            return Err(Error::UnsupportedGradientMode(
                defense.name().to_string(),
                gradient_mode.name().to_string(),
            ));
        }
        if defense.is_randomized() && randomness == RandomnessPolicy::Deterministic {
            return Err(Error::invalid(format!(
                "defense '{}' draws randomness; use a seeded or free policy",
                defense.name()
            )));
        }
        Ok(DefendedModel { model, defense, randomness, gradient_mode })
    }

    fn effective_seed(&self, caller_seed: u64) -> u64 {
        match self.randomness {
            RandomnessPolicy::Deterministic => 0,
            RandomnessPolicy::Seeded(s) => s,
            RandomnessPolicy::Free => caller_seed,
        }
    }

    /// Runs the defense end to end. The gradient mode plays no part here.
    pub fn run(&self, x: &Tensor, seed: u64) -> Result<DefenseRun> {
        self.defense.defend(&self.model, x, self.effective_seed(seed))
    }

    pub fn defended_predict(&self, x: &Tensor, seed: u64) -> Result<DefendedPrediction> {
        let run = self.run(x, seed)?;
        Ok(DefendedPrediction {
            label: run.logits.argmax() + 1,
            logits: run.logits,
            cost: run.cost,
        })
    }

    /// Trajectory-BPDA gradient: the purifier node carries a trajectory
    /// override over the recorded iterates, so the returned gradient is the
    /// mean static-model gradient along the purification path.
    fn trajectory_grad(
        &self,
        loss: &SurrogateLoss,
        run: &DefenseRun,
        y: usize,
    ) -> Result<(Tensor, CostRecord)> {
        if run.iterates.is_empty() {
            return Err(Error::UnsupportedGradientMode(
                self.defense.name().to_string(),
                GradientMode::BpdaTrajectory.name().to_string(),
            ));
        }
        let mut b = GraphBuilder::new();
        let xin = b.input(vec![self.model.input_dim()]);
        let purify = b.clamp(xin, 0.0, 1.0); // stand-in node for the purifier
        let logits = self.model.graph_logits(&mut b, purify);
        let loss_node = append_loss_graph(&mut b, logits, loss, y, self.model.num_classes)?;
        let mut g = b.finish(loss_node)?;
        g.attach_override(purify, BackwardOverride::TrajectoryAverage(run.iterates.clone()))?;
        g.forward_eval(std::slice::from_ref(&run.purified))?;
        let grad = g.backward_grad(0)?;
        let n = run.iterates.len() as u64;
        Ok((
            grad,
            CostRecord { static_forwards: n, static_backwards: n, ..Default::default() },
        ))
    }

    /// Like [`AttackTarget::eval_grad`] but also returning the exact cost.
    pub fn eval_grad_costed(
        &self,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        seed: u64,
    ) -> Result<(EvalRecord, Tensor, CostRecord)> {
        let seed = self.effective_seed(seed);
        match self.gradient_mode {
            GradientMode::Unrolled => {
                self.defense.unrolled_loss_grad(&self.model, loss, x, y, seed)
            }
            GradientMode::BpdaIdentity => {
                self.defense.bpda_identity_grad(&self.model, loss, x, y, seed)
            }
            GradientMode::BpdaTrajectory => {
                let run = self.defense.defend(&self.model, x, seed)?;
                let record = EvalRecord {
                    loss: eval_loss(loss, &run.logits, y)?,
                    predicted: run.logits.argmax() + 1,
                };
                let (grad, grad_cost) = self.trajectory_grad(loss, &run, y)?;
                let mut cost = run.cost;
                cost.add(&grad_cost);
                Ok((record, grad, cost))
            }
        }
    }
}

impl AttackTarget for DefendedModel {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes
    }

    fn is_randomized(&self) -> bool {
        self.defense.is_randomized() && self.randomness == RandomnessPolicy::Free
    }

    fn eval(&self, loss: &SurrogateLoss, x: &Tensor, y: usize, seed: u64) -> Result<EvalRecord> {
        let run = self.run(x, seed)?;
        Ok(EvalRecord { loss: eval_loss(loss, &run.logits, y)?, predicted: run.logits.argmax() + 1 })
    }

    fn eval_grad(
        &self,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        seed: u64,
    ) -> Result<(EvalRecord, Tensor)> {
        let (record, grad, _) = self.eval_grad_costed(loss, x, y, seed)?;
        Ok((record, grad))
    }
}

/// Everything the registry may need to assemble a defense by name.
#[derive(Default)]
pub struct DefenseResources {
    pub aid_discriminator: Option<crate::models::Discriminator>,
    pub atld_discriminator: Option<crate::models::Discriminator>,
    pub score: Option<crate::models::ScoreNetwork>,
    pub embeddings: Option<Vec<crate::models::LinearEmbedding>>,
    pub encoder: Option<Classifier>,
    pub bank: Option<NegativeBank>,
}

pub fn defense_names() -> &'static [&'static str] {
    &["none", "hedge", "anti-adversary", "soap", "aid", "adp", "imf", "clc", "contrastive"]
}

/// Builds a defense by name with its documented defaults, deriving every
/// threat-dependent radius from `threat`.
pub fn build_defense(
    name: &str,
    threat: &ThreatModel,
    resources: &DefenseResources,
) -> Result<Box<dyn Defense>> {
    build_defense_with(name, threat, resources, &BTreeMap::new())
}

/// Per-defense numeric keys accepted in an override map. Training-time keys
/// (`sigma`, `rank`, `bank_size`) are listed so configs carrying them still
/// build; they are consumed when the resources are trained, not here.
fn allowed_override_keys(name: &str) -> &'static [&'static str] {
    match name {
        "none" => &[],
        "hedge" => &["steps", "radius", "step_size"],
        "anti-adversary" => &["steps", "step_size", "radius"],
        "soap" => &["steps_per_radius", "grid_step"],
        "aid" => &["steps", "step_size", "radius"],
        "adp" => &["steps", "runs", "sigma"],
        "imf" => &["radius"],
        "clc" => &["iterations", "learning_rate", "rank"],
        "contrastive" => &["steps", "radius", "bank_size"],
        _ => &[],
    }
}

/// [`build_defense`] with individual numeric defaults replaced by key.
/// Unknown keys are rejected so a typo in a config fails loudly.
pub fn build_defense_with(
    name: &str,
    threat: &ThreatModel,
    resources: &DefenseResources,
    overrides: &BTreeMap<String, f64>,
) -> Result<Box<dyn Defense>> {
    let allowed = allowed_override_keys(name);
    for key in overrides.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::invalid(format!(
                "defense '{name}' has no override key '{key}'"
            )));
        }
    }
    let num = |key: &str, default: f64| overrides.get(key).copied().unwrap_or(default);
    let count = |key: &str, default: usize| {
        overrides.get(key).map(|v| v.round() as usize).unwrap_or(default)
    };
    let need = |what: &str| Error::invalid(format!("defense '{name}' needs {what}"));
    Ok(match name {
        "none" => Box::new(NoDefense),
        "hedge" => Box::new(HedgeDefense::new(
            count("steps", 20),
            num("radius", threat.eps),
            num("step_size", threat.eps / 4.0),
        )?),
        "anti-adversary" => Box::new(AntiAdversary::new(
            count("steps", 2),
            num("step_size", threat.eps / 2.0),
            num("radius", threat.eps),
        )?),
        "soap" => {
            let step = num("grid_step", threat.eps / 5.0);
            let grid = (0..11).map(|i| i as f64 * step).collect();
            Box::new(SoapDefense::new(count("steps_per_radius", 5), grid)?)
        }
        "aid" => Box::new(AidDefense::new(
            resources.aid_discriminator.clone().ok_or_else(|| need("an aid discriminator"))?,
            count("steps", 4),
            num("step_size", threat.eps / 4.0),
            num("radius", threat.eps),
        )?),
        "adp" => Box::new(AdpDefense::new(
            resources.score.clone().ok_or_else(|| need("a score network"))?,
            count("steps", 10),
            count("runs", 10),
        )?),
        "imf" => Box::new(ImfDefense::new(
            resources.atld_discriminator.clone().ok_or_else(|| need("an atld discriminator"))?,
            num("radius", 2.0 * threat.eps),
        )?),
        "clc" => Box::new(ClcDefense::new(
            resources.embeddings.clone().ok_or_else(|| need("fitted layer embeddings"))?,
            count("iterations", 5),
            num("learning_rate", 5e-3),
        )?),
        "contrastive" => Box::new(ContrastiveDefense::new(
            resources.encoder.clone().ok_or_else(|| need("an encoder"))?,
            resources.bank.clone().ok_or_else(|| need("a negative bank"))?,
            count("steps", 40),
            num("radius", 2.0 * threat.eps),
        )?),
        other => return Err(Error::invalid(format!("unknown defense '{other}'"))),
    })
}
