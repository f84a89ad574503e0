//! Training objectives wired to the model: which losses apply to which
//! parts of a batch, which targets are held constant, and how gradients
//! flow back into the parameters.

use crate::error::{Error, Result};
use crate::losses::{self, HierLossSpec, TermOutput};
use crate::model::{Differentiable, Gradients, Model};

/// The unsupervised term added on the coarse batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unsupervised {
    None,
    /// Confident argmax of the coarse view supervises the same view.
    PseudoLabel { tau: f64 },
    /// Confident argmax of the weak view supervises the strong view.
    Consistency { tau: f64 },
    /// Temperature-softened teacher distribution supervises the student.
    Distill { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub hier: HierLossSpec,
    /// Whether the coarse batch contributes the marginalized supervised term.
    pub use_coarse_labels: bool,
    pub unsupervised: Unsupervised,
    pub unsup_weight: f64,
}

/// Inputs for one step. Feature vectors are already augmented.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub labeled: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Views trained on: clean, or strongly augmented for consistency training.
    pub coarse: Vec<Vec<f64>>,
    pub coarse_labels: Vec<usize>,
    /// Weak views that produce consistency targets.
    pub coarse_weak: Vec<Vec<f64>>,
    /// Teacher logits on `coarse`, for distillation.
    pub teacher_logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub coarse: f64,
    pub unsupervised: f64,
    /// Fraction of coarse samples that produced a pseudo-target.
    pub mask_rate: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.supervised + self.coarse + self.unsupervised
    }
}

impl Objective {
    pub fn needs_coarse(&self) -> bool {
        self.use_coarse_labels || !matches!(self.unsupervised, Unsupervised::None)
    }

    /// Fixes the constant targets (pseudo-labels) at the current parameters.
    pub fn bind<'a>(&'a self, model: &Model, batch: &'a Batch) -> Result<BoundObjective<'a>> {
        let pseudo = match self.unsupervised {
            Unsupervised::PseudoLabel { tau } => {
                let probs = predict_probs(model, &batch.coarse)?;
                losses::pseudo_targets(&probs, tau)
            }
            Unsupervised::Consistency { tau } => {
                if batch.coarse_weak.len() != batch.coarse.len() {
                    return Err(Error::IndexMisalignment {
                        weak: batch.coarse_weak.len(),
                        strong: batch.coarse.len(),
                    });
                }
                let probs = predict_probs(model, &batch.coarse_weak)?;
                losses::pseudo_targets(&probs, tau)
            }
            Unsupervised::Distill { .. } => {
                if batch.teacher_logits.len() != batch.coarse.len() {
                    return Err(Error::DimensionMismatch {
                        what: "teacher logits",
                        expected: batch.coarse.len(),
                        got: batch.teacher_logits.len(),
                    });
                }
                Vec::new()
            }
            Unsupervised::None => Vec::new(),
        };
        Ok(BoundObjective {
            objective: self,
            batch,
            pseudo,
        })
    }
}

fn predict_probs(model: &Model, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    xs.iter().map(|x| Ok(model.forward(x)?.probs)).collect()
}

/// An objective with its batch and constant targets fixed.
#[derive(Debug, Clone)]
pub struct BoundObjective<'a> {
    objective: &'a Objective,
    batch: &'a Batch,
    pseudo: Vec<Option<usize>>,
}

struct Terms {
    breakdown: LossBreakdown,
    labeled: TermOutput,
    coarse: TermOutput,
    unsup: TermOutput,
}

impl BoundObjective<'_> {
    pub fn pseudo_targets(&self) -> &[Option<usize>] {
        &self.pseudo
    }

    fn terms(&self, labeled_probs: &[Vec<f64>], coarse_probs: &[Vec<f64>], coarse_logits: &[Vec<f64>]) -> Result<Terms> {
        let obj = self.objective;
        let b = self.batch;
        let labeled = losses::level_cross_entropy(labeled_probs, &b.labels, obj.hier.fine_map())?;
        let coarse = if obj.use_coarse_labels {
            losses::level_cross_entropy(coarse_probs, &b.coarse_labels, obj.hier.coarse_map())?
        } else {
            TermOutput::default()
        };
        let mut mask_rate = 0.0;
        let unsup = match obj.unsupervised {
            Unsupervised::None => TermOutput::default(),
            Unsupervised::PseudoLabel { .. } | Unsupervised::Consistency { .. } => {
                if !self.pseudo.is_empty() {
                    mask_rate = self.pseudo.iter().filter(|t| t.is_some()).count() as f64 / self.pseudo.len() as f64;
                }
                losses::pseudo_target_cross_entropy(coarse_probs, &self.pseudo)?.scaled(obj.unsup_weight)
            }
            Unsupervised::Distill { temperature } => {
                let d = losses::distill_loss(&b.teacher_logits, coarse_logits, temperature)?;
                TermOutput {
                    value: d.value,
                    grads: d.grads,
                }
                .scaled(obj.unsup_weight)
            }
        };
        Ok(Terms {
            breakdown: LossBreakdown {
                supervised: labeled.value,
                coarse: coarse.value,
                unsupervised: unsup.value,
                mask_rate,
            },
            labeled,
            coarse,
            unsup,
        })
    }

    fn coarse_needed(&self) -> bool {
        self.objective.needs_coarse()
    }

    pub fn evaluate(&self, model: &Model) -> Result<LossBreakdown> {
        let labeled = predict_probs(model, &self.batch.labeled)?;
        let (coarse_probs, coarse_logits) = if self.coarse_needed() {
            let preds = self
                .batch
                .coarse
                .iter()
                .map(|x| model.forward(x))
                .collect::<Result<Vec<_>>>()?;
            preds.into_iter().map(|p| (p.probs, p.logits)).unzip()
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.terms(&labeled, &coarse_probs, &coarse_logits)?.breakdown)
    }

    pub fn evaluate_with_gradient(&self, model: &Model) -> Result<(LossBreakdown, Gradients)> {
        let labeled_acts = self
            .batch
            .labeled
            .iter()
            .map(|x| model.activations(x))
            .collect::<Result<Vec<_>>>()?;
        let coarse_acts = if self.coarse_needed() {
            self.batch
                .coarse
                .iter()
                .map(|x| model.activations(x))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let labeled_probs: Vec<Vec<f64>> = labeled_acts.iter().map(|a| a.probs.clone()).collect();
        let coarse_probs: Vec<Vec<f64>> = coarse_acts.iter().map(|a| a.probs.clone()).collect();
        let coarse_logits: Vec<Vec<f64>> = coarse_acts.iter().map(|a| a.logits.clone()).collect();
        let terms = self.terms(&labeled_probs, &coarse_probs, &coarse_logits)?;

        let mut grads = model.zero_gradients();
        for (acts, g) in labeled_acts.iter().zip(&terms.labeled.grads) {
            model.backward_logits(acts, g, &mut grads);
        }
        let skip_unsup = self.objective.unsup_weight == 0.0;
        for (j, acts) in coarse_acts.iter().enumerate() {
            let mut d = vec![0.0; model.num_classes()];
            let mut any = false;
            if let Some(g) = terms.coarse.grads.get(j) {
                for (a, b) in d.iter_mut().zip(g) {
                    *a += b;
                }
                any = true;
            }
            if !skip_unsup {
                if let Some(g) = terms.unsup.grads.get(j) {
                    if g.iter().any(|&v| v != 0.0) {
                        for (a, b) in d.iter_mut().zip(g) {
                            *a += b;
                        }
                        any = true;
                    }
                }
            }
            if any {
                model.backward_logits(acts, &d, &mut grads);
            }
        }
        Ok((terms.breakdown, grads))
    }
}

impl Differentiable for BoundObjective<'_> {
    fn loss(&self, model: &Model) -> Result<f64> {
        Ok(self.evaluate(model)?.total())
    }

    fn gradient(&self, model: &Model) -> Result<(f64, Gradients)> {
        let (b, g) = self.evaluate_with_gradient(model)?;
        Ok((b.total(), g))
    }
}

/// InfoNCE over a batch of queries with constant keys and negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveObjective<'a> {
    pub queries: &'a [Vec<f64>],
    /// Unit-norm key embeddings from the key encoder, one per query.
    pub keys: &'a [Vec<f64>],
    pub negatives: &'a [Vec<f64>],
    pub temperature: f64,
}

impl ContrastiveObjective<'_> {
    fn check(&self) -> Result<()> {
        if self.queries.len() != self.keys.len() {
            return Err(Error::DimensionMismatch {
                what: "positive keys",
                expected: self.queries.len(),
                got: self.keys.len(),
            });
        }
        Ok(())
    }
}

impl Differentiable for ContrastiveObjective<'_> {
    fn loss(&self, model: &Model) -> Result<f64> {
        self.check()?;
        if self.queries.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (x, k) in self.queries.iter().zip(self.keys) {
            let e = model.embed(x)?;
            total += losses::infonce_loss(&e.embedding, k, self.negatives, self.temperature)?.value;
        }
        Ok(total / self.queries.len() as f64)
    }

    fn gradient(&self, model: &Model) -> Result<(f64, Gradients)> {
        self.check()?;
        let mut grads = model.zero_gradients();
        if self.queries.is_empty() {
            return Ok((0.0, grads));
        }
        let scale = 1.0 / self.queries.len() as f64;
        let mut total = 0.0;
        for (x, k) in self.queries.iter().zip(self.keys) {
            let e = model.embed(x)?;
            let out = losses::infonce_loss(&e.embedding, k, self.negatives, self.temperature)?;
            total += out.value;
            let g: Vec<f64> = out.grad_query.iter().map(|v| v * scale).collect();
            model.backward_embedding(&e, &g, &mut grads);
        }
        Ok((total * scale, grads))
    }
}
