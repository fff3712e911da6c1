//! Closed-loop activation control: optimize additive offsets on the hidden
//! activations so each offset activation lands near its layer's principal
//! subspace, then classify with the offsets in place. The input itself is
//! never moved.

use super::{CostRecord, Defense, DefenseRun, GradientMode};
use crate::attacks::{append_loss_graph, eval_loss, EvalRecord, SurrogateLoss};
use crate::autodiff::{Graph, GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::models::{Classifier, LinearEmbedding};
use crate::tensor::Tensor;

pub struct ClcDefense {
    /// One fitted principal subspace per hidden layer, in layer order.
    pub embeddings: Vec<LinearEmbedding>,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl ClcDefense {
    pub fn new(embeddings: Vec<LinearEmbedding>, iterations: usize, learning_rate: f64) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::invalid("clc needs at least one layer embedding"));
        }
        if iterations == 0 || learning_rate <= 0.0 {
            return Err(Error::invalid("clc needs positive iterations and learning rate"));
        }
        Ok(ClcDefense { embeddings, iterations, learning_rate })
    }

    fn check_model(&self, model: &Classifier) -> Result<()> {
        let taps = model.num_layers() - 1;
        if self.embeddings.len() != taps {
            return Err(Error::invalid(format!(
                "clc has {} embeddings but the model taps {taps} hidden layers",
                self.embeddings.len()
            )));
        }
        Ok(())
    }

    /// One graph serves both the offset optimization and the final pass:
    /// input 0 is the example, inputs 1.. are the per-layer offsets; the
    /// output is the summed reconstruction error and the logits node is read
    /// off the same evaluation.
    fn control_graph(&self, model: &Classifier) -> Result<(Graph, NodeId)> {
        for (emb, &w) in self.embeddings.iter().zip(model.hidden_widths()) {
            if emb.dim() != w {
                return Err(Error::invalid(format!(
                    "clc embedding dimension {} does not match layer width {w}",
                    emb.dim()
                )));
            }
        }
        let mut b = GraphBuilder::new();
        let xin = b.input(vec![model.input_dim()]);
        let offsets: Vec<NodeId> =
            model.hidden_widths().iter().map(|&w| b.input(vec![w])).collect();
        let (logits, controlled) = model.graph_logits_with_offsets(&mut b, xin, &offsets)?;
        let mut terms = Vec::with_capacity(controlled.len());
        for (v, emb) in controlled.iter().zip(&self.embeddings) {
            terms.push(self.reconstruction_error(&mut b, *v, emb)?);
        }
        let mut objective = terms[0];
        for &t in &terms[1..] {
            objective = b.add(objective, t);
        }
        let g = b.finish(objective)?;
        Ok((g, logits))
    }

    /// Squared distance from an activation node to its reconstruction through
    /// the layer's principal subspace.
    fn reconstruction_error(
        &self,
        b: &mut GraphBuilder,
        v: NodeId,
        emb: &LinearEmbedding,
    ) -> Result<NodeId> {
        let (r, d) = (emb.rank(), emb.dim());
        let mean = b.constant(emb.mean.clone());
        let centered = b.sub(v, mean);
        let rows = b.constant(emb.rows.clone());
        let zero_r = b.constant(Tensor::zeros(vec![r]));
        let z = b.affine(centered, rows, zero_r);
        let mut tdata = vec![0.0; d * r];
        for i in 0..r {
            for j in 0..d {
                tdata[j * r + i] = emb.rows.data()[i * d + j];
            }
        }
        let rows_t = b.constant(Tensor::matrix(d, r, tdata)?);
        let zero_d = b.constant(Tensor::zeros(vec![d]));
        let back = b.affine(z, rows_t, zero_d);
        let residual = b.sub(centered, back);
        let sq = b.mul(residual, residual);
        Ok(b.sum(sq))
    }

    /// Joint gradient descent on all offsets: per iteration one evaluation of
    /// the controlled forward (1 static forward) and one backward sweep (1
    /// static backward). Returns the best evaluated offsets and the prefix-min
    /// trace.
    fn optimize_offsets(
        &self,
        model: &Classifier,
        g: &mut Graph,
        logits_node: NodeId,
        x: &Tensor,
        cost: &mut CostRecord,
    ) -> Result<(Vec<Tensor>, Vec<f64>, Tensor)> {
        let widths = model.hidden_widths();
        let mut offsets: Vec<Tensor> = widths.iter().map(|&w| Tensor::zeros(vec![w])).collect();
        let mut best: Option<(f64, Vec<Tensor>)> = None;
        let mut trace = Vec::with_capacity(self.iterations);
        for _ in 0..self.iterations {
            let mut inputs = vec![x.clone()];
            inputs.extend(offsets.iter().cloned());
            let value = g.forward_eval(&inputs)?.scalar_value();
            let grads = g.backward_inputs()?;
            cost.static_forwards += 1;
            cost.static_backwards += 1;
            if best.as_ref().map_or(true, |(v, _)| value < *v) {
                best = Some((value, offsets.clone()));
            }
            trace.push(best.as_ref().unwrap().0);
            for (u, du) in offsets.iter_mut().zip(&grads[1..]) {
                *u = u.sub(&du.scale(self.learning_rate));
            }
        }
        let (_, best_offsets) = best.unwrap();
        // Final pass with the selected offsets.
        let mut inputs = vec![x.clone()];
        inputs.extend(best_offsets.iter().cloned());
        g.forward_eval(&inputs)?;
        cost.static_forwards += 1;
        let logits = g.node_value(logits_node).unwrap().clone();
        Ok((best_offsets, trace, logits))
    }
}

impl Defense for ClcDefense {
    fn name(&self) -> &'static str {
        "clc"
    }

    fn is_randomized(&self) -> bool {
        false
    }

    fn supported_modes(&self) -> &'static [GradientMode] {
        &[GradientMode::BpdaIdentity]
    }

    /// Five optimization iterations (one forward/backward pair each) plus the
    /// final controlled forward: 6 static forwards and 5 static backwards at
    /// the defaults.
    fn defend(&self, model: &Classifier, x: &Tensor, _seed: u64) -> Result<DefenseRun> {
        self.check_model(model)?;
        let (mut g, logits_node) = self.control_graph(model)?;
        let mut cost = CostRecord::default();
        let (_, trace, logits) = self.optimize_offsets(model, &mut g, logits_node, x, &mut cost)?;
        Ok(DefenseRun {
            logits,
            purified: x.clone(),
            iterates: Vec::new(),
            trace,
            cost,
        })
    }

    /// The defense moves activations, not the input, so identity-BPDA means
    /// the gradient of the final controlled pass with the optimized offsets
    /// held fixed.
    fn bpda_identity_grad(
        &self,
        model: &Classifier,
        loss: &SurrogateLoss,
        x: &Tensor,
        y: usize,
        _seed: u64,
    ) -> Result<(EvalRecord, Tensor, CostRecord)> {
        self.check_model(model)?;
        let (mut g, logits_node) = self.control_graph(model)?;
        let mut cost = CostRecord::default();
        let (offsets, _, logits) =
            self.optimize_offsets(model, &mut g, logits_node, x, &mut cost)?;
        let record =
            EvalRecord { loss: eval_loss(loss, &logits, y)?, predicted: logits.argmax() + 1 };

        let mut b = GraphBuilder::new();
        let xin = b.input(vec![model.input_dim()]);
        let offset_consts: Vec<NodeId> =
            offsets.iter().map(|u| b.constant(u.clone())).collect();
        let (logits_fixed, _) = model.graph_logits_with_offsets(&mut b, xin, &offset_consts)?;
        let loss_node = append_loss_graph(&mut b, logits_fixed, loss, y, model.num_classes)?;
        let mut lg = b.finish(loss_node)?;
        lg.forward_eval(std::slice::from_ref(x))?;
        let grad = lg.backward_grad(0)?;
        cost.static_forwards += 1;
        cost.static_backwards += 1;
        Ok((record, grad, cost))
    }
}
