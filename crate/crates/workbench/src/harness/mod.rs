//! The evaluation pipeline: a six-stage checklist run against a defended
//! model — transfer attacks, black-box sanity checks, white-box attacks
//! through the defense, BPDA fallbacks, randomness handling, and a custom
//! adaptive-attack hook — compiled into a reproducible report.

pub mod redflags;
pub mod report;

pub use redflags::{detect_red_flags, ConfidenceFlattened, GradientMasked, RED_FLAG_TOLERANCE};
pub use report::{compile_report, render_markdown, EvaluationReport};

use crate::attacks::{
    pgd, ray_search_attack, run_whitebox, score_random_search, transfer_attack,
    worst_case_ensemble, AttackBudget, AttackOutcome, AttackTarget, EvalRecord, SurrogateLoss,
    ThreatModel, TransferPolicy, WhiteboxMethod,
};
use std::collections::BTreeMap;

use crate::defenses::{
    build_defense_with, DefendedModel, DefenseResources, GradientMode, HedgeDefense,
    RandomnessPolicy,
};
use crate::error::{Error, Result};
use crate::models::{Classifier, Dataset};
use crate::stream_seed;
use crate::tensor::Tensor;

/// A user-supplied adaptive attack (stage six).
pub type CustomAttack = Box<dyn Fn(&DefendedModel, &Dataset, &ThreatModel) -> Result<AttackOutcome>>;

/// Which stages to run and with what budget. The per-stage seeds are derived
/// from the budget's base seed, so one plan is one reproducible experiment.
pub struct EvaluationPlan {
    pub enable_transfer: bool,
    pub enable_blackbox: bool,
    pub enable_whitebox: bool,
    pub enable_bpda: bool,
    pub enable_randomness: bool,
    pub budget: AttackBudget,
    /// EOT draws for the randomness stage; clamped to at least 2 so the stage
    /// always runs either EOT or fixed-seed mode, never neither.
    pub n_eot: usize,
    pub custom: Option<CustomAttack>,
}

impl EvaluationPlan {
    pub fn standard(seed: u64) -> Self {
        EvaluationPlan {
            enable_transfer: true,
            enable_blackbox: true,
            enable_whitebox: true,
            enable_bpda: true,
            enable_randomness: true,
            budget: AttackBudget::new(20, 2, seed),
            n_eot: 4,
            custom: None,
        }
    }
}

/// Everything needed to (re)build the defended model for each stage: stages
/// differ in gradient mode and randomness policy, so the wrapper is
/// reassembled from the registry per stage.
pub struct EvaluationContext<'a> {
    pub model: &'a Classifier,
    pub defense_name: &'a str,
    pub resources: &'a DefenseResources,
    pub threat: ThreatModel,
    /// Seed pinned by the seeded randomness policy during stages 1-4.
    pub defense_seed: u64,
    /// Numeric overrides for the defense's documented defaults, by key.
    pub overrides: BTreeMap<String, f64>,
}

impl EvaluationContext<'_> {
    fn build(&self) -> Result<Box<dyn crate::defenses::Defense>> {
        build_defense_with(self.defense_name, &self.threat, self.resources, &self.overrides)
    }

    pub fn wrapped(
        &self,
        mode: GradientMode,
        randomness: RandomnessPolicy,
    ) -> Result<DefendedModel> {
        let defense = self.build()?;
        let randomness =
            if defense.is_randomized() { randomness } else { RandomnessPolicy::Deterministic };
        DefendedModel::new(self.model.clone(), defense, randomness, mode)
    }

    /// The default evaluation wrapper: gradient mode is irrelevant to forward
    /// predictions, randomness pinned so results repeat.
    pub fn eval_wrapper(&self) -> Result<DefendedModel> {
        self.wrapped(GradientMode::BpdaIdentity, self.eval_policy())
    }

    fn eval_policy(&self) -> RandomnessPolicy {
        RandomnessPolicy::Seeded(self.defense_seed)
    }

    fn supports(&self, mode: GradientMode) -> Result<bool> {
        Ok(self.build()?.supported_modes().contains(&mode))
    }

    fn is_randomized(&self) -> Result<bool> {
        Ok(self.build()?.is_randomized())
    }
}

/// One named attack run within a stage. Only runs against the defended model
/// count toward the worst case; comparison runs against the static core are
/// kept for diagnostics.
pub struct StageAttack {
    pub name: String,
    pub on_defended: bool,
    pub outcome: AttackOutcome,
}

pub struct StageResult {
    pub stage: &'static str,
    pub skipped: bool,
    pub notes: Vec<String>,
    pub attacks: Vec<StageAttack>,
}

impl StageResult {
    fn skipped(stage: &'static str, note: String) -> Self {
        StageResult { stage, skipped: true, notes: vec![note], attacks: Vec::new() }
    }

    /// Per-example union of the stage's attacks on the defended model.
    pub fn defended_union(&self) -> Option<AttackOutcome> {
        let outcomes: Vec<AttackOutcome> = self
            .attacks
            .iter()
            .filter(|a| a.on_defended)
            .map(|a| a.outcome.clone())
            .collect();
        if outcomes.is_empty() {
            None
        } else {
            worst_case_ensemble(&outcomes).ok()
        }
    }

    pub fn robust_accuracy(&self) -> Option<f64> {
        self.defended_union().map(|o| o.robust_accuracy())
    }
}

/// Everything `run_plan` produces; feed it to [`compile_report`].
pub struct EvaluationRun {
    pub clean_static: f64,
    pub clean_defended: f64,
    pub stages: Vec<StageResult>,
    /// Mean defended inference cost in call units (static forward = 1).
    pub overhead_call_units: f64,
}

/// Seeded clean accuracy of any attack target.
pub fn evaluate_clean(target: &dyn AttackTarget, ds: &Dataset, seed: u64) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate clean accuracy on an empty dataset"));
    }
    let mut ok = 0usize;
    for (id, (x, y)) in ds.iter().enumerate() {
        if target.predict_label(x, stream_seed(seed, id as u64))? == y {
            ok += 1;
        }
    }
    Ok(ok as f64 / ds.len() as f64)
}

/// Stage one: craft on the static core, evaluate on the defended model, under
/// both transfer policies so the gap between them is visible.
pub fn run_stage_transfer(
    ctx: &EvaluationContext,
    ds: &Dataset,
    budget: &AttackBudget,
) -> Result<StageResult> {
    let defended = ctx.eval_wrapper()?;
    let budget = AttackBudget { seed: stream_seed(budget.seed, 0x7A), ..*budget };
    let mut losses = vec![SurrogateLoss::CrossEntropy, SurrogateLoss::CwMargin];
    if ctx.model.num_classes >= 4 {
        losses.push(SurrogateLoss::Dlr);
    }
    let mut attacks = Vec::new();
    for loss in &losses {
        for (policy, tag) in [
            (TransferPolicy::LossMaximizing, "loss-maximizing"),
            (TransferPolicy::CleanOnFailure, "clean-on-failure"),
        ] {
            let outcome =
                transfer_attack(ctx.model, &defended, ds, &ctx.threat, loss, &budget, policy)?;
            attacks.push(StageAttack {
                name: format!("transfer-{}-{tag}", loss.name()),
                on_defended: true,
                outcome,
            });
        }
    }
    Ok(StageResult { stage: "transfer", skipped: false, notes: Vec::new(), attacks })
}

/// Stage two: decision-based and score-based black-box attacks on both the
/// defended model and its static core, under identical budgets and seeds.
pub fn run_stage_blackbox(
    ctx: &EvaluationContext,
    ds: &Dataset,
    budget: &AttackBudget,
) -> Result<StageResult> {
    let defended = ctx.eval_wrapper()?;
    let budget = AttackBudget { seed: stream_seed(budget.seed, 0xB1), ..*budget };
    let loss = SurrogateLoss::CwMargin;
    let mut attacks = Vec::new();
    for (name, target, on_defended) in [
        ("ray-search-defended", &defended as &dyn AttackTarget, true),
        ("ray-search-static", ctx.model as &dyn AttackTarget, false),
    ] {
        attacks.push(StageAttack {
            name: name.to_string(),
            on_defended,
            outcome: ray_search_attack(target, ds, &ctx.threat, &budget)?,
        });
    }
    for (name, target, on_defended) in [
        ("random-search-defended", &defended as &dyn AttackTarget, true),
        ("random-search-static", ctx.model as &dyn AttackTarget, false),
    ] {
        attacks.push(StageAttack {
            name: name.to_string(),
            on_defended,
            outcome: score_random_search(target, ds, &ctx.threat, &loss, &budget)?,
        });
    }
    let mut notes = Vec::new();
    let dec_def = attacks[0].outcome.robust_accuracy();
    let dec_static = attacks[1].outcome.robust_accuracy();
    if dec_def + RED_FLAG_TOLERANCE < dec_static {
        notes.push(format!(
            "decision-based attack: defended ({dec_def:.3}) is less robust than static ({dec_static:.3})"
        ));
    }
    Ok(StageResult { stage: "black-box", skipped: false, notes, attacks })
}

/// Short tag for attack names: "ce", "cw", "dlr", "targeted-dlr-3".
fn loss_tag(loss: &SurrogateLoss) -> String {
    match loss {
        SurrogateLoss::CrossEntropy => "ce".to_string(),
        SurrogateLoss::CwMargin => "cw".to_string(),
        SurrogateLoss::Dlr => "dlr".to_string(),
        SurrogateLoss::TargetedDlr(t) => format!("targeted-dlr-{t}"),
    }
}

fn secondary_losses(num_classes: usize) -> Vec<SurrogateLoss> {
    if num_classes >= 4 {
        // Targeted-DLR sweep over the first three classes, the desk-scale
        // stand-in for AutoAttack's nine targets.
        (1..=3.min(num_classes))
            .map(|t| SurrogateLoss::TargetedDlr(t))
            .collect()
    } else {
        vec![SurrogateLoss::CwMargin]
    }
}

/// Stage three: gradient attacks straight through the defense. Runs only for
/// defenses exposing an unrolled gradient; others defer to the BPDA stage.
pub fn run_stage_whitebox(
    ctx: &EvaluationContext,
    ds: &Dataset,
    budget: &AttackBudget,
) -> Result<StageResult> {
    if !ctx.supports(GradientMode::Unrolled)? {
        return Ok(StageResult::skipped(
            "white-box",
            "defense exposes no unrolled gradient; deferred to the BPDA stage".to_string(),
        ));
    }
    let defended = ctx.wrapped(GradientMode::Unrolled, ctx.eval_policy())?;
    let budget = AttackBudget { seed: stream_seed(budget.seed, 0x3B), ..*budget };
    let mut attacks = Vec::new();
    let mut notes = Vec::new();
    let mut runs: Vec<(String, WhiteboxMethod, SurrogateLoss)> = vec![
        ("fgsm-ce".into(), WhiteboxMethod::Fgsm, SurrogateLoss::CrossEntropy),
        ("pgd-ce".into(), WhiteboxMethod::Pgd, SurrogateLoss::CrossEntropy),
        ("apgd-ce".into(), WhiteboxMethod::Apgd, SurrogateLoss::CrossEntropy),
    ];
    for loss in secondary_losses(ctx.model.num_classes) {
        runs.push((format!("apgd-{}", loss_tag(&loss)), WhiteboxMethod::Apgd, loss));
    }
    for (name, method, loss) in runs {
        match run_whitebox(method, &defended, ds, &ctx.threat, &loss, &budget) {
            Ok(outcome) => attacks.push(StageAttack { name, on_defended: true, outcome }),
            Err(Error::NonFinite { .. }) => {
                notes.push(format!("{name}: non-finite gradient; deferred to the BPDA stage"));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(StageResult { stage: "white-box", skipped: false, notes, attacks })
}

/// Evaluation through one wrapper, gradients through another (e.g. a
/// shortened purification for the backward pass).
struct SplitGradient<'a> {
    eval_target: &'a DefendedModel,
    grad_target: &'a DefendedModel,
}

impl AttackTarget for SplitGradient<'_> {
    fn input_dim(&self) -> usize {
        self.eval_target.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.eval_target.num_classes()
    }

    fn is_randomized(&self) -> bool {
        self.eval_target.is_randomized()
    }

    fn eval(&self, loss: &SurrogateLoss, x: &Tensor, y: usize, seed: u64) -> Result<EvalRecord> {
        self.eval_target.eval(loss, x, y, seed)
    }

    fn eval_grad(
        &self,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        seed: u64,
    ) -> Result<(EvalRecord, Tensor)> {
        let (_, grad) = self.grad_target.eval_grad(loss, x, y, seed)?;
        let record = self.eval_target.eval(loss, x, y, seed)?;
        Ok((record, grad))
    }
}

/// Stage four: APGD with BPDA backward overrides — identity always, the
/// trajectory average when the defense records iterates, and for the hedge
/// defense the shortened 5-step purification for gradients with the full
/// 20-step purification for evaluation.
pub fn run_stage_bpda(
    ctx: &EvaluationContext,
    ds: &Dataset,
    budget: &AttackBudget,
) -> Result<StageResult> {
    let budget = AttackBudget { seed: stream_seed(budget.seed, 0xBD), ..*budget };
    let mut attacks = Vec::new();
    let mut notes = Vec::new();

    let identity = ctx.wrapped(GradientMode::BpdaIdentity, ctx.eval_policy())?;
    for loss in std::iter::once(SurrogateLoss::CrossEntropy)
        .chain(secondary_losses(ctx.model.num_classes))
    {
        let outcome = run_whitebox(WhiteboxMethod::Apgd, &identity, ds, &ctx.threat, &loss, &budget)?;
        attacks.push(StageAttack {
            name: format!("apgd-{}-bpda-identity", loss_tag(&loss)),
            on_defended: true,
            outcome,
        });
    }

    if ctx.supports(GradientMode::BpdaTrajectory)? {
        let trajectory = ctx.wrapped(GradientMode::BpdaTrajectory, ctx.eval_policy())?;
        let outcome = run_whitebox(
            WhiteboxMethod::Apgd,
            &trajectory,
            ds,
            &ctx.threat,
            &SurrogateLoss::CrossEntropy,
            &budget,
        )?;
        attacks.push(StageAttack {
            name: "apgd-ce-bpda-trajectory".to_string(),
            on_defended: true,
            outcome,
        });
    } else {
        notes.push("defense records no purification trajectory; trajectory BPDA skipped".into());
    }

    if ctx.defense_name == "hedge" {
        // Gradients through a 5-step hedge, evaluation through the full one.
        let eps = ctx.threat.eps;
        let short = DefendedModel::new(
            ctx.model.clone(),
            Box::new(HedgeDefense::new(5, eps, eps / 4.0)?),
            RandomnessPolicy::Seeded(ctx.defense_seed),
            GradientMode::BpdaIdentity,
        )?;
        let full = ctx.wrapped(GradientMode::BpdaIdentity, ctx.eval_policy())?;
        let split = SplitGradient { eval_target: &full, grad_target: &short };
        let outcome = run_whitebox(
            WhiteboxMethod::Apgd,
            &split,
            ds,
            &ctx.threat,
            &SurrogateLoss::CrossEntropy,
            &budget,
        )?;
        attacks.push(StageAttack {
            name: "apgd-ce-bpda-short-hedge".to_string(),
            on_defended: true,
            outcome,
        });
    }

    Ok(StageResult { stage: "bpda", skipped: false, notes, attacks })
}

/// Stage five: randomized defenses are attacked both with EOT gradients and
/// with the seed frozen; the gap between the two quantifies how much apparent
/// robustness is randomness. Deterministic defenses skip the stage.
pub fn run_stage_randomness(
    ctx: &EvaluationContext,
    ds: &Dataset,
    budget: &AttackBudget,
    n_eot: usize,
) -> Result<StageResult> {
    if !ctx.is_randomized()? {
        return Ok(StageResult::skipped(
            "randomness",
            "deterministic defense; randomness stage skipped".to_string(),
        ));
    }
    let budget = AttackBudget { seed: stream_seed(budget.seed, 0x5E), ..*budget };
    let n = n_eot.max(2);
    let mut attacks = Vec::new();

    let free = ctx.wrapped(GradientMode::BpdaIdentity, RandomnessPolicy::Free)?;
    let outcome =
        pgd(&free, ds, &ctx.threat, &SurrogateLoss::CrossEntropy, &budget.with_eot(n))?;
    attacks.push(StageAttack { name: format!("pgd-ce-eot{n}"), on_defended: true, outcome });

    let seeded = ctx.eval_wrapper()?;
    let outcome = pgd(&seeded, ds, &ctx.threat, &SurrogateLoss::CrossEntropy, &budget)?;
    attacks.push(StageAttack { name: "pgd-ce-fixed-seed".to_string(), on_defended: true, outcome });

    Ok(StageResult { stage: "randomness", skipped: false, notes: Vec::new(), attacks })
}

/// Mean defended inference cost in call units over up to 30 points.
pub fn measure_call_overhead(defended: &DefendedModel, ds: &Dataset, seed: u64) -> Result<f64> {
    let n = ds.len().min(30).max(1);
    let mut total = 0u64;
    for (id, (x, _)) in ds.iter().take(n).enumerate() {
        total += defended.defended_predict(x, stream_seed(seed, id as u64))?.cost.call_units();
    }
    Ok(total as f64 / n as f64)
}

/// Median wall-clock ratio of defended to static prediction over at least 30
/// timed runs. Informational only — the call-unit ratio is the portable
/// number — so it belongs in run metadata, not the report.
pub fn measure_wall_overhead(
    model: &Classifier,
    defended: &DefendedModel,
    ds: &Dataset,
    seed: u64,
) -> Result<f64> {
    let mut ratios = Vec::new();
    let mut id = 0u64;
    while ratios.len() < 30 {
        for (i, (x, _)) in ds.iter().enumerate() {
            let t0 = std::time::Instant::now();
            defended.defended_predict(x, stream_seed(seed, id + i as u64))?;
            let defended_time = t0.elapsed().as_secs_f64();
            let t0 = std::time::Instant::now();
            let _ = model.predict(x);
            let static_time = t0.elapsed().as_secs_f64().max(1e-9);
            ratios.push(defended_time / static_time);
            if ratios.len() >= 30 {
                break;
            }
        }
        id += ds.len() as u64;
        if ds.is_empty() {
            return Err(Error::invalid("cannot time predictions on an empty dataset"));
        }
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(ratios[ratios.len() / 2])
}

/// Runs every enabled stage in order and collects the raw results.
pub fn run_plan(
    ctx: &EvaluationContext,
    ds: &Dataset,
    plan: &EvaluationPlan,
) -> Result<EvaluationRun> {
    let clean_seed = stream_seed(plan.budget.seed, 0xC1);
    let clean_static = evaluate_clean(ctx.model, ds, clean_seed)?;
    let defended = ctx.eval_wrapper()?;
    let clean_defended = evaluate_clean(&defended, ds, clean_seed)?;
    let overhead_call_units = measure_call_overhead(&defended, ds, clean_seed)?;

    let mut stages = Vec::new();
    if plan.enable_transfer {
        stages.push(run_stage_transfer(ctx, ds, &plan.budget)?);
    }
    if plan.enable_blackbox {
        stages.push(run_stage_blackbox(ctx, ds, &plan.budget)?);
    }
    if plan.enable_whitebox {
        stages.push(run_stage_whitebox(ctx, ds, &plan.budget)?);
    }
    if plan.enable_bpda {
        stages.push(run_stage_bpda(ctx, ds, &plan.budget)?);
    }
    if plan.enable_randomness {
        stages.push(run_stage_randomness(ctx, ds, &plan.budget, plan.n_eot)?);
    }
    if let Some(custom) = &plan.custom {
        let outcome = custom(&defended, ds, &ctx.threat)?;
        stages.push(StageResult {
            stage: "custom",
            skipped: false,
            notes: Vec::new(),
            attacks: vec![StageAttack {
                name: "custom-adaptive".to_string(),
                on_defended: true,
                outcome,
            }],
        });
    }
    if stages.is_empty() {
        return Err(Error::invalid("evaluation plan has no enabled stages"));
    }
    Ok(EvaluationRun { clean_static, clean_defended, stages, overhead_call_units })
}
