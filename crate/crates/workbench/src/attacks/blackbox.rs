//! Gradient-free attacks: a decision-based ray search over sign directions
//! and a score-based random search. Both respect a hard query cap and never
//! touch gradients, which is what makes them useful cross-checks against
//! gradient masking.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{
    AttackBudget, AttackOutcome, AttackTarget, ExampleOutcome, NormP, SurrogateLoss, ThreatModel,
    NORM_SLACK,
};
use crate::error::{Error, Result};
use crate::models::Dataset;
use crate::stream_seed;
use crate::tensor::Tensor;

/// Binary-search refinements per accepted direction in the ray search.
const RAY_BISECTIONS: usize = 10;

struct QueryMeter<'a> {
    target: &'a dyn AttackTarget,
    used: u64,
    cap: u64,
    seed: u64,
}

impl<'a> QueryMeter<'a> {
    fn exhausted(&self) -> bool {
        self.used >= self.cap
    }

    fn decision(&mut self, x: &Tensor, y: usize) -> Result<Option<bool>> {
        if self.exhausted() {
            return Ok(None);
        }
        let label = self.target.predict_label(x, stream_seed(self.seed, self.used))?;
        self.used += 1;
        Ok(Some(label != y))
    }

    fn score(&mut self, loss: &SurrogateLoss, x: &Tensor, y: usize) -> Result<Option<super::EvalRecord>> {
        if self.exhausted() {
            return Ok(None);
        }
        let record = self.target.eval(loss, x, y, stream_seed(self.seed, self.used))?;
        self.used += 1;
        Ok(Some(record))
    }
}

fn linf_only(threat: &ThreatModel, what: &str) -> Result<()> {
    if threat.p != NormP::Linf {
        return Err(Error::invalid(format!("{what} supports only the linf threat model")));
    }
    Ok(())
}

/// Point reached by walking radius `r` along sign direction `d`, box-clamped.
fn ray_point(x: &Tensor, d: &[f64], r: f64) -> Tensor {
    let delta = Tensor::vector(d.iter().map(|&s| r * s).collect());
    x.add(&delta).clamp01()
}

/// Decision-based ray search over sign directions (linf): maintains the best
/// known flipping radius along a {-1, +1}^d direction, hierarchically flips
/// sign blocks, and tightens the radius by bisection whenever a flipped
/// direction still changes the label at the current radius.
///
/// The target is queried only through its decision oracle. `best_loss` in the
/// outcome is the negated flipping radius (larger is better, matching the
/// loss convention); `success` means a radius of at most eps was found.
pub fn ray_search_attack(
    target: &dyn AttackTarget,
    ds: &Dataset,
    threat: &ThreatModel,
    budget: &AttackBudget,
) -> Result<AttackOutcome> {
    linf_only(threat, "ray search")?;
    let dim = target.input_dim();
    let mut examples = Vec::with_capacity(ds.len());
    for (id, (x, y)) in ds.iter().enumerate() {
        let ex_seed = stream_seed(budget.seed, id as u64);
        // Clean bookkeeping query, off the books.
        if target.predict_label(x, ex_seed)? != y {
            examples.push(ExampleOutcome {
                example_id: id,
                best_delta: Tensor::zeros(vec![dim]),
                best_loss: 0.0,
                success: true,
                forwards: 0,
                backwards: 0,
                queries: 0,
            });
            continue;
        }
        let mut meter = QueryMeter { target, used: 0, cap: budget.query_cap, seed: ex_seed };
        let mut d = vec![1.0f64; dim];
        let mut best_r = f64::INFINITY;

        // A candidate direction is accepted if it flips the label at the
        // current best radius (or at radius 1, the worst case in the unit
        // box); acceptance is followed by bisection to tighten the radius.
        let try_direction = |cand: &[f64], best_r: &mut f64, meter: &mut QueryMeter| -> Result<bool> {
            let probe_r = if best_r.is_finite() { *best_r } else { 1.0 };
            match meter.decision(&ray_point(x, cand, probe_r), y)? {
                Some(true) => {}
                _ => return Ok(false),
            }
            let (mut lo, mut hi) = (0.0f64, probe_r);
            for _ in 0..RAY_BISECTIONS {
                if meter.exhausted() {
                    break;
                }
                let mid = (lo + hi) / 2.0;
                match meter.decision(&ray_point(x, cand, mid), y)? {
                    Some(true) => hi = mid,
                    Some(false) => lo = mid,
                    None => break,
                }
            }
            *best_r = hi;
            Ok(true)
        };

        if try_direction(&d.clone(), &mut best_r, &mut meter)? {
            // Keep the all-ones direction.
        }
        // Hierarchical sign flips: halve the block size each stage.
        let mut num_blocks = 1usize;
        while !meter.exhausted() && num_blocks <= dim {
            let block = dim.div_ceil(num_blocks);
            for b in 0..num_blocks {
                if meter.exhausted() {
                    break;
                }
                let (lo, hi) = (b * block, ((b + 1) * block).min(dim));
                if lo >= hi {
                    continue;
                }
                let mut cand = d.clone();
                for v in &mut cand[lo..hi] {
                    *v = -*v;
                }
                if try_direction(&cand, &mut best_r, &mut meter)? {
                    d = cand;
                }
            }
            num_blocks *= 2;
        }

        let success = best_r <= threat.eps + NORM_SLACK;
        // The reported delta always stays inside the threat model: when the
        // flipping radius exceeds eps the walk is cut off at the ball surface
        // (a feasible but failed candidate); the radius itself survives in
        // `best_loss`.
        let best_delta = if best_r.is_finite() {
            ray_point(x, &d, best_r.min(threat.eps)).sub(x)
        } else {
            Tensor::zeros(vec![dim])
        };
        examples.push(ExampleOutcome {
            example_id: id,
            best_delta,
            best_loss: if best_r.is_finite() { -best_r } else { f64::NEG_INFINITY },
            success,
            forwards: meter.used,
            backwards: 0,
            queries: meter.used,
        });
    }
    Ok(AttackOutcome { examples })
}

/// Score-based random search (linf): start from a full-magnitude random sign
/// perturbation and greedily accept coordinate-subset re-randomizations that
/// increase the surrogate loss. Loss queries only; no gradients.
pub fn score_random_search(
    target: &dyn AttackTarget,
    ds: &Dataset,
    threat: &ThreatModel,
    loss: &SurrogateLoss,
    budget: &AttackBudget,
) -> Result<AttackOutcome> {
    linf_only(threat, "score random search")?;
    let dim = target.input_dim();
    let mut examples = Vec::with_capacity(ds.len());
    for (id, (x, y)) in ds.iter().enumerate() {
        let ex_seed = stream_seed(budget.seed, id as u64);
        let clean = target.eval(loss, x, y, ex_seed)?; // bookkeeping
        if clean.predicted != y {
            examples.push(ExampleOutcome {
                example_id: id,
                best_delta: Tensor::zeros(vec![dim]),
                best_loss: clean.loss,
                success: true,
                forwards: 0,
                backwards: 0,
                queries: 0,
            });
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ex_seed);
        let mut meter = QueryMeter { target, used: 0, cap: budget.query_cap, seed: ex_seed };
        let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut delta = threat.project(
            x,
            &Tensor::vector((0..dim).map(|_| threat.eps * sign(&mut rng)).collect()),
        );
        let Some(mut current) = meter.score(loss, &x.add(&delta), y)? else {
            return Err(Error::invalid("query cap too small for a single evaluation"));
        };
        let mut best_delta = delta.clone();
        let mut best = current;
        let n = budget.iterations.max(1);
        for t in 0..n {
            if meter.exhausted() || (best.predicted != y) {
                break;
            }
            // Re-randomize a shrinking random subset of coordinates.
            let frac = (0.5f64).powi(1 + (8 * t / n) as i32).max(1.0 / dim as f64);
            let m = ((frac * dim as f64).round() as usize).clamp(1, dim);
            let mut coords: Vec<usize> = (0..dim).collect();
            coords.shuffle(&mut rng);
            let mut proposal = delta.clone();
            for &c in &coords[..m] {
                proposal.data_mut()[c] = threat.eps * sign(&mut rng);
            }
            let proposal = threat.project(x, &proposal);
            let Some(record) = meter.score(loss, &x.add(&proposal), y)? else { break };
            if record.loss > current.loss {
                current = record;
                delta = proposal.clone();
            }
            let flips = record.predicted != y;
            if (flips && best.predicted == y) || (flips == (best.predicted != y) && record.loss > best.loss) {
                best = record;
                best_delta = proposal;
            }
        }
        examples.push(ExampleOutcome {
            example_id: id,
            best_delta,
            best_loss: best.loss,
            success: best.predicted != y,
            forwards: meter.used,
            backwards: 0,
            queries: meter.used,
        });
    }
    Ok(AttackOutcome { examples })
}
