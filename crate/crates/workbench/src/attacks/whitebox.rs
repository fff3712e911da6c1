//! Gradient-based attacks: FGSM, PGD, APGD, and EOT gradient averaging.
//!
//! Cost conventions: every loss-and-gradient query is one forward and one
//! backward unit; every loss-only query is one forward unit. The clean-point
//! correctness check at the start of each attack is bookkeeping and is not
//! charged to the attack, and the attack itself never evaluates the clean
//! point as a candidate.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{
    AttackBudget, AttackOutcome, AttackTarget, EvalRecord, ExampleOutcome, NormP, SurrogateLoss,
    ThreatModel,
};
use crate::error::Result;
use crate::models::Dataset;
use crate::stream_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhiteboxMethod {
    Fgsm,
    Pgd,
    Apgd,
}

/// Per-example bookkeeping: call counters plus best-candidate tracking.
/// Successful candidates always dominate unsuccessful ones; ties break by
/// loss.
struct Tracker {
    y: usize,
    best_loss: f64,
    best_delta: Tensor,
    success: bool,
    forwards: u64,
    backwards: u64,
    queries: u64,
    /// Best loss after each considered candidate; non-decreasing while no
    /// candidate has flipped the label yet.
    trace: Vec<f64>,
}

impl Tracker {
    fn new(y: usize, dim: usize) -> Self {
        Tracker {
            y,
            best_loss: f64::NEG_INFINITY,
            best_delta: Tensor::zeros(vec![dim]),
            success: false,
            forwards: 0,
            backwards: 0,
            queries: 0,
            trace: Vec::new(),
        }
    }

    fn consider(&mut self, delta: &Tensor, record: &EvalRecord) {
        let flips = record.predicted != self.y;
        let better = match (flips, self.success) {
            (true, false) => true,
            (false, true) => false,
            _ => record.loss > self.best_loss,
        };
        if better {
            self.best_loss = record.loss;
            self.best_delta = delta.clone();
            self.success = flips;
        }
        self.trace.push(self.best_loss);
    }

    fn into_outcome(self, example_id: usize) -> ExampleOutcome {
        ExampleOutcome {
            example_id,
            best_delta: self.best_delta,
            best_loss: self.best_loss,
            success: self.success,
            forwards: self.forwards,
            backwards: self.backwards,
            queries: self.queries,
        }
    }
}

fn random_start(x: &Tensor, threat: &ThreatModel, rng: &mut ChaCha8Rng) -> Tensor {
    let raw = Tensor::vector(
        (0..x.len()).map(|_| rng.gen_range(-threat.eps..threat.eps)).collect(),
    );
    threat.project(x, &raw)
}

fn ascent_step(grad: &Tensor, threat: &ThreatModel, step_size: f64) -> Tensor {
    match threat.p {
        NormP::Linf => grad.map(|v| step_size * v.signum()),
        NormP::L2 => {
            let n = grad.l2_norm();
            if n > 0.0 {
                grad.scale(step_size / n)
            } else {
                Tensor::zeros_like(grad)
            }
        }
    }
}

/// Averaged loss and gradient over `n` independent randomness draws.
/// Charges `n` forward and `n` backward units to the caller's tally.
pub fn eot_gradient(
    target: &dyn AttackTarget,
    loss: &SurrogateLoss,
    x: &Tensor,
    y: usize,
    n: usize,
    base_seed: u64,
) -> Result<(EvalRecord, Tensor)> {
    let n = n.max(1);
    let mut total = Tensor::zeros(vec![x.len()]);
    let mut loss_sum = 0.0;
    let mut first_pred = 0;
    for i in 0..n {
        let (record, grad) = target.eval_grad(loss, x, y, stream_seed(base_seed, i as u64))?;
        loss_sum += record.loss;
        total = total.add(&grad);
        if i == 0 {
            first_pred = record.predicted;
        }
    }
    Ok((
        EvalRecord { loss: loss_sum / n as f64, predicted: first_pred },
        total.scale(1.0 / n as f64),
    ))
}

/// Clean-point bookkeeping: records an immediate zero-cost success when the
/// target is already wrong at `x`. Returns `None` when the attack must run.
fn clean_shortcut(
    target: &dyn AttackTarget,
    loss: &SurrogateLoss,
    x: &Tensor,
    y: usize,
    seed: u64,
    example_id: usize,
) -> Result<Option<ExampleOutcome>> {
    let clean = target.eval(loss, x, y, seed)?;
    if clean.predicted != y {
        return Ok(Some(ExampleOutcome {
            example_id,
            best_delta: Tensor::zeros(vec![x.len()]),
            best_loss: clean.loss,
            success: true,
            forwards: 0,
            backwards: 0,
            queries: 0,
        }));
    }
    Ok(None)
}

/// Single-step sign attack: exactly one forward and one backward per attacked
/// example, plus one uncharged verification query.
pub fn fgsm(
    target: &dyn AttackTarget,
    ds: &Dataset,
    threat: &ThreatModel,
    loss: &SurrogateLoss,
    seed: u64,
) -> Result<AttackOutcome> {
    let mut examples = Vec::with_capacity(ds.len());
    for (id, (x, y)) in ds.iter().enumerate() {
        let ex_seed = stream_seed(seed, id as u64);
        if let Some(done) = clean_shortcut(target, loss, x, y, ex_seed, id)? {
            examples.push(done);
            continue;
        }
        let mut t = Tracker::new(y, x.len());
        let (_, grad) = target.eval_grad(loss, x, y, ex_seed)?;
        t.forwards += 1;
        t.backwards += 1;
        t.queries += 1;
        let delta = threat.project(x, &ascent_step(&grad, threat, threat.eps));
        let record = target.eval(loss, &x.add(&delta), y, stream_seed(ex_seed, 1))?;
        t.queries += 1;
        t.consider(&delta, &record);
        examples.push(t.into_outcome(id));
    }
    Ok(AttackOutcome { examples })
}

/// Randomly restarted PGD with step size eps/4 and best-loss iterate
/// tracking. Per restart of `N` iterations the attack charges `N + 1`
/// forwards and `N` backwards (times the EOT factor on gradient queries).
pub fn pgd(
    target: &dyn AttackTarget,
    ds: &Dataset,
    threat: &ThreatModel,
    loss: &SurrogateLoss,
    budget: &AttackBudget,
) -> Result<AttackOutcome> {
    let step_size = threat.eps / 4.0;
    let n_eot = budget.n_eot.max(1) as u64;
    let mut examples = Vec::with_capacity(ds.len());
    for (id, (x, y)) in ds.iter().enumerate() {
        let ex_seed = stream_seed(budget.seed, id as u64);
        if let Some(done) = clean_shortcut(target, loss, x, y, ex_seed, id)? {
            examples.push(done);
            continue;
        }
        let mut t = Tracker::new(y, x.len());
        let mut call = 0u64;
        for restart in 0..budget.restarts.max(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(ex_seed, restart as u64));
            let mut delta = random_start(x, threat, &mut rng);
            for _ in 0..budget.iterations {
                let (record, grad) =
                    eot_gradient(target, loss, &x.add(&delta), y, budget.n_eot, stream_seed(ex_seed, 1000 + call))?;
                call += 1;
                t.forwards += n_eot;
                t.backwards += n_eot;
                t.queries += n_eot;
                t.consider(&delta, &record);
                delta = threat.project(x, &delta.add(&ascent_step(&grad, threat, step_size)));
            }
            let record = target.eval(loss, &x.add(&delta), y, stream_seed(ex_seed, 1000 + call))?;
            call += 1;
            t.forwards += 1;
            t.queries += 1;
            t.consider(&delta, &record);
        }
        examples.push(t.into_outcome(id));
    }
    Ok(AttackOutcome { examples })
}

/// Checkpoint iteration indices for the APGD step-size schedule.
fn apgd_checkpoints(n: usize) -> Vec<usize> {
    let mut ps = vec![0.0f64, 0.22];
    while *ps.last().unwrap() < 1.0 {
        let last = ps[ps.len() - 1];
        let prev = ps[ps.len() - 2];
        ps.push(last + (last - prev - 0.03).max(0.06));
    }
    ps.iter().skip(1).map(|p| ((p * n as f64).ceil() as usize).min(n)).collect()
}

/// Auto-PGD: momentum 0.75, initial step `2 * eps`, and step halving at
/// fixed checkpoints when progress stalls; on halving the search restarts
/// from the best point found so far.
pub fn apgd(
    target: &dyn AttackTarget,
    ds: &Dataset,
    threat: &ThreatModel,
    loss: &SurrogateLoss,
    budget: &AttackBudget,
) -> Result<AttackOutcome> {
    Ok(apgd_traced(target, ds, threat, loss, budget)?.0)
}

/// [`apgd`] plus, per example, the best-loss-so-far sequence over every
/// considered candidate, for auditing that the tracked best never regresses.
pub fn apgd_traced(
    target: &dyn AttackTarget,
    ds: &Dataset,
    threat: &ThreatModel,
    loss: &SurrogateLoss,
    budget: &AttackBudget,
) -> Result<(AttackOutcome, Vec<Vec<f64>>)> {
    const MOMENTUM: f64 = 0.75;
    const RHO: f64 = 0.75;
    let n = budget.iterations.max(1);
    let checkpoints = apgd_checkpoints(n);
    let mut examples = Vec::with_capacity(ds.len());
    let mut traces = Vec::with_capacity(ds.len());
    for (id, (x, y)) in ds.iter().enumerate() {
        let ex_seed = stream_seed(budget.seed, id as u64);
        if let Some(done) = clean_shortcut(target, loss, x, y, ex_seed, id)? {
            traces.push(vec![done.best_loss]);
            examples.push(done);
            continue;
        }
        let mut t = Tracker::new(y, x.len());
        let mut call = 0u64;
        for restart in 0..budget.restarts.max(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(ex_seed, restart as u64));
            // First run starts at the clean point (never evaluated there);
            // later restarts start at a random feasible perturbation.
            let mut delta = if restart == 0 {
                Tensor::zeros(vec![x.len()])
            } else {
                random_start(x, threat, &mut rng)
            };
            let mut step_size = 2.0 * threat.eps;
            let mut prev_delta = delta.clone();
            let mut best_ckpt_loss = f64::NEG_INFINITY;
            let mut improved_since_ckpt = 0usize;
            let mut last_interval_start = 0usize;
            let mut halved_at_ckpt = false;
            let mut prev_loss = f64::NEG_INFINITY;
            let mut ckpt_iter = checkpoints.iter().copied().peekable();
            for k in 0..n {
                let probe = x.add(&delta);
                let (record, grad) = eot_gradient(
                    target,
                    loss,
                    &probe,
                    y,
                    budget.n_eot,
                    stream_seed(ex_seed, 5000 + call),
                )?;
                call += 1;
                let n_eot = budget.n_eot.max(1) as u64;
                t.forwards += n_eot;
                t.backwards += n_eot;
                t.queries += n_eot;
                // Skip the k=0 candidate when it is the clean point itself.
                if !(restart == 0 && k == 0) {
                    t.consider(&delta, &record);
                }
                if record.loss > prev_loss {
                    improved_since_ckpt += 1;
                }
                prev_loss = record.loss;

                let z = threat.project(x, &delta.add(&ascent_step(&grad, threat, step_size)));
                let momentum_term = z.sub(&delta).scale(MOMENTUM).add(&delta.sub(&prev_delta).scale(1.0 - MOMENTUM));
                prev_delta = delta.clone();
                delta = threat.project(x, &delta.add(&momentum_term));

                if ckpt_iter.peek() == Some(&(k + 1)) {
                    ckpt_iter.next();
                    let interval = (k + 1 - last_interval_start).max(1);
                    let cond1 = (improved_since_ckpt as f64) < RHO * interval as f64;
                    let cond2 = !halved_at_ckpt && t.best_loss <= best_ckpt_loss;
                    halved_at_ckpt = false;
                    if cond1 || cond2 {
                        step_size /= 2.0;
                        halved_at_ckpt = true;
                        delta = t.best_delta.clone();
                        prev_delta = delta.clone();
                    }
                    best_ckpt_loss = t.best_loss;
                    improved_since_ckpt = 0;
                    last_interval_start = k + 1;
                }
            }
            let record = target.eval(loss, &x.add(&delta), y, stream_seed(ex_seed, 5000 + call))?;
            call += 1;
            t.forwards += 1;
            t.queries += 1;
            t.consider(&delta, &record);
        }
        traces.push(t.trace.clone());
        examples.push(t.into_outcome(id));
    }
    Ok((AttackOutcome { examples }, traces))
}

/// Dispatch over the gradient-based attacks.
pub fn run_whitebox(
    method: WhiteboxMethod,
    target: &dyn AttackTarget,
    ds: &Dataset,
    threat: &ThreatModel,
    loss: &SurrogateLoss,
    budget: &AttackBudget,
) -> Result<AttackOutcome> {
    match method {
        WhiteboxMethod::Fgsm => fgsm(target, ds, threat, loss, budget.seed),
        WhiteboxMethod::Pgd => pgd(target, ds, threat, loss, budget),
        WhiteboxMethod::Apgd => apgd(target, ds, threat, loss, budget),
    }
}
