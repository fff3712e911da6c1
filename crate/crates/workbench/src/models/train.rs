//! Minibatch SGD training for every network in the workbench.
//!
//! All loops are driven by a single cross-entropy graph whose parameters are
//! graph inputs, so one reverse sweep yields both the parameter gradients and
//! the input gradient used by the inner attack of adversarial training.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::data::gauss;
use super::{
    init_network, Activation, Classifier, Dataset, Discriminator, DiscriminatorMode, ScoreNetwork,
    TrainConfig,
};
use crate::attacks::{NormP, ThreatModel};
use crate::autodiff::{Graph, GraphBuilder};
use crate::error::{Error, Result};
use crate::stream_seed;
use crate::tensor::Tensor;

const MOMENTUM: f64 = 0.9;

/// Fraction of accuracy over a labeled set; labels are 1-based.
pub fn clean_accuracy(model: &Classifier, ds: &Dataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let ok = ds.iter().filter(|(x, y)| model.predict(x) == *y).count();
    ok as f64 / ds.len() as f64
}

fn onehot(k: usize, y: usize) -> Tensor {
    let mut v = vec![0.0; k];
    v[y - 1] = 1.0;
    Tensor::vector(v)
}

/// Cross-entropy training graph: slot 0 is the input, slot 1 the one-hot
/// target, slots 2.. the parameters in `param_tensors` order.
fn ce_training_graph(model: &Classifier, target_dim: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let x = b.input(vec![model.input_dim()]);
    let oh = b.input(vec![target_dim]);
    let (logits, _) = model.graph_logits_param_inputs(&mut b, x);
    let ls = b.log_softmax(logits);
    let picked = b.mul(oh, ls);
    let summed = b.sum(picked);
    let loss = b.scale(summed, -1.0);
    b.finish(loss)
}

/// One PGD sign/normalized-gradient ascent run on an already-bound graph.
/// `inputs[0]` is overwritten; gradients are taken with respect to slot 0.
fn inner_pgd(
    g: &mut Graph,
    inputs: &mut [Tensor],
    x: &Tensor,
    threat: &ThreatModel,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if threat.eps == 0.0 || steps == 0 {
        return Ok(x.clone());
    }
    let start = Tensor::vector(
        (0..x.len()).map(|_| rng.gen_range(-threat.eps..threat.eps)).collect(),
    );
    let mut delta = threat.project(x, &start);
    let step_size = threat.eps / 4.0;
    for _ in 0..steps {
        inputs[0] = x.add(&delta);
        g.forward_eval(inputs)?;
        let gx = g.backward_grad(0)?;
        let step = match threat.p {
            NormP::Linf => gx.map(|v| step_size * v.signum()),
            NormP::L2 => {
                let n = gx.l2_norm();
                if n > 0.0 {
                    gx.scale(step_size / n)
                } else {
                    Tensor::zeros_like(&gx)
                }
            }
        };
        delta = threat.project(x, &delta.add(&step));
    }
    Ok(x.add(&delta))
}

/// Minibatch SGD with momentum over a CE graph. When `threat` is present each
/// example is replaced by an inner PGD iterate against the current parameters.
fn run_sgd(
    model: &Classifier,
    ds: &Dataset,
    cfg: &TrainConfig,
    threat: Option<&ThreatModel>,
) -> Result<Classifier> {
    train_loop(model, cfg, ds.len(), ce_training_graph(model, model.num_classes)?, |g, inputs, idx, rng| {
        let (x, y) = (&ds.inputs[idx], ds.labels[idx]);
        inputs[1] = onehot(ds.num_classes, y);
        inputs[0] = match threat {
            Some(t) => inner_pgd(g, inputs, x, t, cfg.inner_attack_steps, rng)?,
            None => x.clone(),
        };
        Ok(())
    })
}

/// Shared SGD skeleton: `bind` fills slots 0 and 1 for the given example index
/// (and may use the graph for inner attacks); parameters live in slots 2...
fn train_loop(
    model: &Classifier,
    cfg: &TrainConfig,
    num_examples: usize,
    mut g: Graph,
    mut bind: impl FnMut(&mut Graph, &mut [Tensor], usize, &mut ChaCha8Rng) -> Result<()>,
) -> Result<Classifier> {
    cfg.validate()?;
    if num_examples == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut params = model.param_tensors();
    let mut velocity: Vec<Tensor> = params.iter().map(Tensor::zeros_like).collect();
    let mut inputs = vec![Tensor::zeros(vec![model.input_dim()]), Tensor::scalar(0.0)];
    inputs.extend(params.iter().cloned());

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..num_examples).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_sum: Vec<Tensor> = params.iter().map(Tensor::zeros_like).collect();
            for &idx in batch {
                inputs[2..].clone_from_slice(&params);
                bind(&mut g, &mut inputs, idx, &mut rng)?;
                g.forward_eval(&inputs)?;
                let grads = g.backward_inputs()?;
                for (acc, grad) in grad_sum.iter_mut().zip(&grads[2..]) {
                    *acc = acc.add(grad);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for ((p, v), gsum) in params.iter_mut().zip(&mut velocity).zip(&grad_sum) {
                *v = v.scale(MOMENTUM).add(&gsum.scale(inv));
                *p = p.sub(&v.scale(cfg.learning_rate));
                if !p.is_finite() {
                    return Err(Error::invalid(format!(
                        "training diverged at epoch {epoch}: non-finite parameters"
                    )));
                }
            }
        }
    }
    let mut trained = model.clone();
    trained.set_params(&params);
    Ok(trained)
}

/// Standard (clean) cross-entropy training.
pub fn train_standard(model: &Classifier, ds: &Dataset, cfg: &TrainConfig) -> Result<Classifier> {
    if model.input_dim() != ds.dim || model.num_classes != ds.num_classes {
        return Err(Error::invalid("model shape does not match dataset"));
    }
    run_sgd(model, ds, cfg, None)
}

/// PGD adversarial training: every minibatch example is replaced by an inner
/// PGD iterate (steps of size eps/4) against the current parameters. An eps of
/// zero degrades to standard training.
pub fn train_adversarial(
    model: &Classifier,
    ds: &Dataset,
    threat: &ThreatModel,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    if model.input_dim() != ds.dim || model.num_classes != ds.num_classes {
        return Err(Error::invalid("model shape does not match dataset"));
    }
    if threat.eps < 0.0 {
        return Err(Error::invalid("threat radius must be non-negative"));
    }
    run_sgd(model, ds, cfg, Some(threat))
}

#[derive(Debug, Clone)]
pub struct TrainedDiscriminator {
    pub disc: Discriminator,
    /// Accuracy separating clean from PGD-perturbed held-out inputs.
    pub heldout_accuracy: f64,
}

/// Cross-entropy graph against a frozen classifier (parameters as constants);
/// slot 0 is the input, slot 1 the one-hot label.
fn frozen_ce_graph(model: &Classifier) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let x = b.input(vec![model.input_dim()]);
    let oh = b.input(vec![model.num_classes]);
    let logits = model.graph_logits(&mut b, x);
    let ls = b.log_softmax(logits);
    let picked = b.mul(oh, ls);
    let summed = b.sum(picked);
    let loss = b.scale(summed, -1.0);
    b.finish(loss)
}

fn pgd_against_frozen(
    g: &mut Graph,
    x: &Tensor,
    y: usize,
    k: usize,
    threat: &ThreatModel,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut inputs = vec![x.clone(), onehot(k, y)];
    inner_pgd(g, &mut inputs, x, threat, steps, rng)
}

/// Trains a clean/adversarial discriminator. Adversarial positives are PGD
/// perturbations of the training inputs against the frozen static model,
/// regenerated every epoch. AID nets have a single BCE-trained logit; ATLD
/// nets have K+1 outputs trained with cross entropy, index 0 flagging
/// adversarial inputs.
pub fn train_discriminator(
    static_model: &Classifier,
    ds: &Dataset,
    threat: &ThreatModel,
    mode: DiscriminatorMode,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainedDiscriminator> {
    if static_model.input_dim() != ds.dim {
        return Err(Error::invalid("static model shape does not match dataset"));
    }
    let (train, heldout) = ds.split(0.8);
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::invalid("dataset too small to split for discriminator training"));
    }
    let out_dim = match mode {
        DiscriminatorMode::Aid => 1,
        DiscriminatorMode::Atld => ds.num_classes + 1,
    };
    let mut widths = vec![ds.dim];
    widths.extend_from_slice(hidden);
    let net = init_network(&widths, out_dim, cfg.seed, Activation::Relu)?;
    let mut attack_graph = frozen_ce_graph(static_model)?;

    // Each "index" addresses one (example, clean-or-adversarial) pair; the
    // adversarial versions are regenerated lazily per epoch inside `bind`.
    let mut adv_cache: Vec<Option<Tensor>> = vec![None; train.len()];
    let mut cache_epoch = usize::MAX;
    let mut epoch_counter = 0usize;
    let k = ds.num_classes;
    let disc_graph = match mode {
        DiscriminatorMode::Aid => {
            // BCE as softplus(z) - t*z, with the target in slot 1.
            let mut b = GraphBuilder::new();
            let x = b.input(vec![ds.dim]);
            let t = b.input(vec![1]);
            let (z, _) = net.graph_logits_param_inputs(&mut b, x);
            let sp = b.softplus(z);
            let tz = b.mul(t, z);
            let diff = b.sub(sp, tz);
            let loss = b.sum(diff);
            b.finish(loss)?
        }
        DiscriminatorMode::Atld => ce_training_graph(&net, out_dim)?,
    };

    let steps = cfg.inner_attack_steps;
    let trained_net = train_loop(&net, cfg, 2 * train.len(), disc_graph, |_, inputs, idx, rng| {
        let (example, adversarial) = (idx / 2, idx % 2 == 1);
        // The shuffled order visits each index once per epoch, so counting
        // bind calls recovers the epoch; a new epoch drops the cached
        // perturbations so they track the (frozen) attack but fresh noise.
        let cycle = epoch_counter / (2 * train.len());
        epoch_counter += 1;
        if cache_epoch != cycle {
            adv_cache.iter_mut().for_each(|c| *c = None);
            cache_epoch = cycle;
        }
        let (x, y) = (&train.inputs[example], train.labels[example]);
        let xin = if adversarial {
            if adv_cache[example].is_none() {
                adv_cache[example] = Some(pgd_against_frozen(
                    &mut attack_graph,
                    x,
                    y,
                    k,
                    threat,
                    steps,
                    rng,
                )?);
            }
            adv_cache[example].clone().unwrap()
        } else {
            x.clone()
        };
        inputs[0] = xin;
        inputs[1] = match mode {
            DiscriminatorMode::Aid => Tensor::vector(vec![if adversarial { 1.0 } else { 0.0 }]),
            DiscriminatorMode::Atld => onehot(out_dim, if adversarial { 1 } else { y + 1 }),
        };
        Ok(())
    })?;

    let disc = Discriminator { net: trained_net, mode };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0xD15C));
    let mut correct = 0usize;
    for (x, y) in heldout.iter() {
        if disc.adversarial_probability(x) < 0.5 {
            correct += 1;
        }
        let adv = pgd_against_frozen(&mut attack_graph, x, y, k, threat, steps, &mut rng)?;
        if disc.adversarial_probability(&adv) > 0.5 {
            correct += 1;
        }
    }
    let heldout_accuracy = correct as f64 / (2 * heldout.len()) as f64;
    Ok(TrainedDiscriminator { disc, heldout_accuracy })
}

#[derive(Debug, Clone)]
pub struct TrainedScore {
    pub score: ScoreNetwork,
    /// Held-out denoising MSE before and after training.
    pub initial_heldout: f64,
    pub final_heldout: f64,
}

fn noisy_pair(x: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let noisy =
        Tensor::vector(x.data().iter().map(|&v| v + sigma * gauss(rng)).collect()).clamp01();
    let target = x.sub(&noisy).scale(1.0 / (sigma * sigma));
    (noisy, target)
}

fn score_heldout_mse(net: &Classifier, heldout: &Dataset, sigma: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (x, _) in heldout.iter() {
        let (noisy, target) = noisy_pair(x, sigma, &mut rng);
        let diff = net.forward(&noisy).sub(&target);
        total += diff.dot(&diff) / diff.len() as f64;
    }
    total / heldout.len() as f64
}

/// Trains a denoising score network `s(x) ~ (x_clean - x_noisy) / sigma^2` at
/// a fixed noise scale, with fresh Gaussian noise every epoch.
pub fn train_score_network(
    ds: &Dataset,
    sigma: f64,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainedScore> {
    if sigma <= 0.0 {
        return Err(Error::invalid("noise scale sigma must be positive"));
    }
    let (train, heldout) = ds.split(0.8);
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::invalid("dataset too small to split for score training"));
    }
    let mut widths = vec![ds.dim];
    widths.extend_from_slice(hidden);
    let net = init_network(&widths, ds.dim, cfg.seed, Activation::Tanh)?;

    // MSE graph: slot 0 noisy input, slot 1 regression target.
    let mut b = GraphBuilder::new();
    let x = b.input(vec![ds.dim]);
    let t = b.input(vec![ds.dim]);
    let (out, _) = net.graph_logits_param_inputs(&mut b, x);
    let diff = b.sub(out, t);
    let sq = b.mul(diff, diff);
    let loss = b.mean(sq);
    let g = b.finish(loss)?;

    let eval_seed = stream_seed(cfg.seed, 0x5C0);
    let initial_heldout = score_heldout_mse(&net, &heldout, sigma, eval_seed);
    let trained = train_loop(&net, cfg, train.len(), g, |_, inputs, idx, rng| {
        let (noisy, target) = noisy_pair(&train.inputs[idx], sigma, rng);
        inputs[0] = noisy;
        inputs[1] = target;
        Ok(())
    })?;
    let final_heldout = score_heldout_mse(&trained, &heldout, sigma, eval_seed);
    Ok(TrainedScore {
        score: ScoreNetwork { net: trained, sigma },
        initial_heldout,
        final_heldout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{pgd, AttackBudget, SurrogateLoss};
    use crate::models::data;

    fn blobs() -> Dataset {
        data::gaussians2d(120, 7)
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let ds = blobs();
        let model = init_network(&[2, 8], 2, 1, Activation::Relu).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::quick(1) };
        let trained = train_standard(&model, &ds, &cfg).unwrap();
        for (a, b) in model.param_tensors().iter().zip(trained.param_tensors()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let ds = blobs();
        let model = init_network(&[2, 8], 2, 1, Activation::Relu).unwrap();
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::quick(1) };
        let a = train_standard(&model, &ds, &cfg).unwrap();
        let b = train_standard(&model, &ds, &cfg).unwrap();
        for (ta, tb) in a.param_tensors().iter().zip(b.param_tensors()) {
            assert_eq!(ta, &tb);
        }
        let other = train_standard(&model, &ds, &TrainConfig { seed: 2, ..cfg }).unwrap();
        let moved = a
            .param_tensors()
            .iter()
            .zip(other.param_tensors())
            .any(|(x, y)| x.max_abs_diff(&y) > 1e-12);
        assert!(moved, "different shuffle seeds should give different weights");
    }

    #[test]
    fn standard_training_separates_the_blobs() {
        let ds = blobs();
        let model = init_network(&[2, 8], 2, 3, Activation::Relu).unwrap();
        let trained = train_standard(&model, &ds, &TrainConfig::quick(3)).unwrap();
        assert!(clean_accuracy(&trained, &ds) >= 0.99);
    }

    #[test]
    fn adversarial_training_improves_robustness() {
        let ds = blobs();
        let threat = ThreatModel::linf(0.2);
        let model = init_network(&[2, 12], 2, 5, Activation::Relu).unwrap();
        let cfg = TrainConfig::quick(5);
        let std_model = train_standard(&model, &ds, &cfg).unwrap();
        let adv_model = train_adversarial(&model, &ds, &threat, &cfg).unwrap();
        let eval_set = ds.subset(40);
        let budget = AttackBudget::new(15, 1, 11);
        let attack_std =
            pgd(&std_model, &eval_set, &threat, &SurrogateLoss::CrossEntropy, &budget).unwrap();
        let attack_adv =
            pgd(&adv_model, &eval_set, &threat, &SurrogateLoss::CrossEntropy, &budget).unwrap();
        assert!(
            attack_adv.robust_accuracy() > attack_std.robust_accuracy(),
            "adversarial training: robust acc {} should beat standard {}",
            attack_adv.robust_accuracy(),
            attack_std.robust_accuracy()
        );
        // Robust training can trade away some clean accuracy, but not all.
        assert!(clean_accuracy(&adv_model, &ds) >= 0.9);
    }

    #[test]
    fn eps_zero_adversarial_training_is_standard_training() {
        let ds = blobs();
        let model = init_network(&[2, 8], 2, 1, Activation::Relu).unwrap();
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::quick(1) };
        let a = train_standard(&model, &ds, &cfg).unwrap();
        let b = train_adversarial(&model, &ds, &ThreatModel::linf(0.0), &cfg).unwrap();
        for (ta, tb) in a.param_tensors().iter().zip(b.param_tensors()) {
            assert_eq!(ta, &tb);
        }
    }

    #[test]
    fn discriminators_separate_clean_from_adversarial() {
        let ds = blobs();
        let threat = ThreatModel::linf(0.15);
        let static_model = train_standard(
            &init_network(&[2, 8], 2, 3, Activation::Relu).unwrap(),
            &ds,
            &TrainConfig::quick(3),
        )
        .unwrap();
        for mode in [DiscriminatorMode::Aid, DiscriminatorMode::Atld] {
            let out = train_discriminator(
                &static_model,
                &ds,
                &threat,
                mode,
                &[16],
                &TrainConfig::quick(13),
            )
            .unwrap();
            assert!(
                out.heldout_accuracy > 0.5,
                "{mode:?} held-out separation {} should beat chance",
                out.heldout_accuracy
            );
        }
    }

    #[test]
    fn score_network_denoises_and_points_home() {
        let ds = blobs();
        let sigma = 0.25;
        let cfg = TrainConfig { epochs: 60, ..TrainConfig::quick(9) };
        let out = train_score_network(&ds, sigma, &[16], &cfg).unwrap();
        assert!(
            out.final_heldout < out.initial_heldout,
            "denoising objective should improve: {} -> {}",
            out.initial_heldout,
            out.final_heldout
        );
        // Monte-Carlo oracle: at noisy points the score should, on average,
        // point back toward the clean sample.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut aligned = 0usize;
        let total = 100;
        for i in 0..total {
            let x = &ds.inputs[i % ds.len()];
            let (noisy, target) = noisy_pair(x, sigma, &mut rng);
            let s = out.score.score(&noisy);
            if s.dot(&target) > 0.0 {
                aligned += 1;
            }
        }
        assert!(aligned as f64 / total as f64 > 0.7, "only {aligned}/{total} aligned");
    }

    #[test]
    fn training_rejects_bad_configs_and_shapes() {
        let ds = blobs();
        let model = init_network(&[2, 8], 2, 1, Activation::Relu).unwrap();
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::quick(1) };
        assert!(train_standard(&model, &ds, &bad).is_err());
        let wrong = init_network(&[3, 8], 2, 1, Activation::Relu).unwrap();
        assert!(train_standard(&wrong, &ds, &TrainConfig::quick(1)).is_err());
        assert!(train_score_network(&ds, 0.0, &[8], &TrainConfig::quick(1)).is_err());
        assert!(
            train_adversarial(&model, &ds, &ThreatModel::linf(-0.1), &TrainConfig::quick(1))
                .is_err()
        );
    }
}
