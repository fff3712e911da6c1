//! Contrastive purification: descend an InfoNCE loss whose positive pair is
//! two transformed views of the candidate point and whose negatives come from
//! a separate bank of examples (or from the other members of the batch).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{CostRecord, Defense, DefenseRun, GradientMode};
use crate::attacks::ThreatModel;
use crate::autodiff::{Graph, GraphBuilder};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::stream_seed;
use crate::tensor::Tensor;

/// Amplitude of the additive-noise view.
const NOISE_AMPLITUDE: f64 = 0.05;
/// Coordinate dropout rate of the second view.
const DROPOUT_RATE: f64 = 0.1;
/// Softmax temperature of the InfoNCE loss.
const TEMPERATURE: f64 = 0.1;

/// Where the negative pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// A fixed external set, disjoint from the evaluated inputs.
    FixedSet,
    /// The other members of the evaluated batch.
    BatchDerived,
}

#[derive(Debug, Clone)]
pub struct NegativeBank {
    pub provenance: Provenance,
    /// Non-empty for fixed-set provenance; unused otherwise.
    pub examples: Vec<Tensor>,
}

impl NegativeBank {
    pub fn fixed(examples: Vec<Tensor>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("a fixed-set negative bank must be non-empty"));
        }
        Ok(NegativeBank { provenance: Provenance::FixedSet, examples })
    }

    pub fn batch_derived() -> Self {
        NegativeBank { provenance: Provenance::BatchDerived, examples: Vec::new() }
    }
}

pub struct ContrastiveDefense {
    pub encoder: Classifier,
    pub bank: NegativeBank,
    pub steps: usize,
    pub radius: f64,
}

impl ContrastiveDefense {
    pub fn new(encoder: Classifier, bank: NegativeBank, steps: usize, radius: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("contrastive purification needs at least one step"));
        }
        if radius < 0.0 {
            return Err(Error::invalid("contrastive radius must be non-negative"));
        }
        Ok(ContrastiveDefense { encoder, bank, steps, radius })
    }
}

/// Appends `sum(a * b) / (|a| |b| + eps)` — cosine similarity — to the graph.
fn cosine(b: &mut GraphBuilder, x: crate::autodiff::NodeId, y: crate::autodiff::NodeId) -> crate::autodiff::NodeId {
    let prod = b.mul(x, y);
    let dot = b.sum(prod);
    let nx = b.l2_norm(x);
    let ny = b.l2_norm(y);
    let norms = b.mul(nx, ny);
    let denom = b.add_scalar(norms, 1e-12);
    b.div(dot, denom)
}

/// InfoNCE graph for one example: input is the candidate point, the two view
/// transforms are baked-in draws, and the negatives enter as fixed encoder
/// embeddings. Evaluating it costs two encoder forwards; a backward sweep
/// costs two encoder backwards.
fn info_nce_graph(
    encoder: &Classifier,
    noise: &Tensor,
    mask: &Tensor,
    negative_embeddings: &[Tensor],
) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let z = b.input(vec![encoder.input_dim()]);
    let nc = b.constant(noise.clone());
    let mc = b.constant(mask.clone());
    let v1 = b.add(z, nc);
    let v2 = b.mul(z, mc);
    let e1 = encoder.graph_logits(&mut b, v1);
    let e2 = encoder.graph_logits(&mut b, v2);
    // Similarity row: the positive pair first, then anchor-vs-negatives.
    let mut sims = vec![cosine(&mut b, e1, e2)];
    for neg in negative_embeddings {
        let en = b.constant(neg.clone());
        sims.push(cosine(&mut b, e1, en));
    }
    let row = b.concat(sims);
    let scaled = b.scale(row, 1.0 / TEMPERATURE);
    let ls = b.log_softmax(scaled);
    let picked = b.select(ls, 0);
    let loss = b.scale(picked, -1.0);
    b.finish(loss)
}

/// Purifies a whole batch: 40 signed descent steps (default) on the InfoNCE
/// loss per example, negatives drawn from the bank (fixed-set) or from the
/// other batch members (batch-derived). Each example's record charges its own
/// optimization cost; the shared fixed-set bank embeddings are charged once,
/// to the first record.
pub fn contrastive_defend(
    model: &Classifier,
    defense: &ContrastiveDefense,
    batch: &[Tensor],
    seed: u64,
) -> Result<Vec<DefenseRun>> {
    if batch.is_empty() {
        return Err(Error::invalid("contrastive purification needs a non-empty batch"));
    }
    let encoder = &defense.encoder;
    let threat = ThreatModel::linf(defense.radius);

    let mut bank_cost = CostRecord::default();
    let bank_embeddings: Vec<Tensor> = match defense.bank.provenance {
        Provenance::FixedSet => {
            if defense.bank.examples.is_empty() {
                return Err(Error::invalid("fixed-set negative bank is empty"));
            }
            if batch.iter().any(|x| defense.bank.examples.contains(x)) {
                return Err(Error::invalid(
                    "fixed-set negative bank must be disjoint from the evaluated batch",
                ));
            }
            defense
                .bank
                .examples
                .iter()
                .map(|n| {
                    bank_cost.encoder_forwards += 1;
                    encoder.forward(n)
                })
                .collect()
        }
        Provenance::BatchDerived => {
            if batch.len() < 2 {
                return Err(Error::invalid(
                    "batch-derived negatives need at least two batch members",
                ));
            }
            batch
                .iter()
                .map(|n| {
                    bank_cost.encoder_forwards += 1;
                    encoder.forward(n)
                })
                .collect()
        }
    };

    let mut runs = Vec::with_capacity(batch.len());
    for (idx, x) in batch.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, idx as u64));
        let noise = Tensor::vector(
            (0..x.len()).map(|_| rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).collect(),
        );
        let mask = Tensor::vector(
            (0..x.len()).map(|_| if rng.gen_bool(DROPOUT_RATE) { 0.0 } else { 1.0 }).collect(),
        );
        let negatives: Vec<Tensor> = match defense.bank.provenance {
            Provenance::FixedSet => bank_embeddings.clone(),
            Provenance::BatchDerived => bank_embeddings
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != idx)
                .map(|(_, e)| e.clone())
                .collect(),
        };
        let mut g = info_nce_graph(encoder, &noise, &mask, &negatives)?;

        let mut cost = if idx == 0 { bank_cost } else { CostRecord::default() };
        let mut delta = Tensor::zeros(vec![x.len()]);
        let mut evaluated = Vec::with_capacity(defense.steps);
        for _ in 0..defense.steps {
            let probe = x.add(&delta);
            let value = g.forward_eval(std::slice::from_ref(&probe))?.scalar_value();
            let grad = g.backward_grad(0)?;
            cost.encoder_forwards += 2;
            cost.encoder_backwards += 2;
            evaluated.push((probe, value));
            let step = grad.map(|v| (defense.radius / 4.0) * v.signum());
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
        runs.push(DefenseRun { logits, purified, iterates, trace, cost });
    }
    Ok(runs)
}

impl Defense for ContrastiveDefense {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn is_randomized(&self) -> bool {
        true // view transform draws
    }

    fn supported_modes(&self) -> &'static [GradientMode] {
        &[GradientMode::BpdaIdentity, GradientMode::BpdaTrajectory]
    }

    /// Single-example entry point: a batch of one, which requires a fixed-set
    /// bank (batch-derived negatives have nothing to draw from).
    fn defend(&self, model: &Classifier, x: &Tensor, seed: u64) -> Result<DefenseRun> {
        let mut runs = contrastive_defend(model, self, std::slice::from_ref(x), seed)?;
        Ok(runs.remove(0))
    }
}
