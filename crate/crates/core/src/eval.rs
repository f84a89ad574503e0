//! Accuracy at any taxonomy level and confusion matrices.
//!
//! Coarse-level predictions marginalize the leaf distribution first and then
//! take the argmax. Ties go to the lowest class index.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::model::Model;
use crate::synthdata::Sample;
use crate::taxonomy::Taxonomy;

/// Leaf probabilities for every sample, in order.
pub fn predict_probs(model: &Model, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| Ok(model.forward(&s.features)?.probs))
        .collect()
}

fn true_leaf(sample: &Sample, taxonomy: &Taxonomy) -> Result<usize> {
    sample
        .true_species
        .or((sample.label_level == taxonomy.leaf_level()).then_some(sample.label))
        .ok_or_else(|| Error::MissingSplit("evaluation sample without a species label".into()))
}

fn truths(samples: &[Sample], taxonomy: &Taxonomy) -> Result<Vec<usize>> {
    samples.iter().map(|s| true_leaf(s, taxonomy)).collect()
}

/// Fraction of rows whose argmax equals the true leaf.
pub fn top1_from_probs(probs: &[Vec<f64>], true_leaves: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let hits = probs
        .iter()
        .zip(true_leaves)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

pub fn top1(model: &Model, taxonomy: &Taxonomy, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let probs = predict_probs(model, test)?;
    top1_from_probs(&probs, &truths(test, taxonomy)?)
}

pub fn level_accuracy_from_probs(
    probs: &[Vec<f64>],
    true_leaves: &[usize],
    taxonomy: &Taxonomy,
    level: usize,
) -> Result<f64> {
    let cm = confusion_from_probs(probs, true_leaves, taxonomy, level)?;
    Ok(cm.accuracy())
}

/// Accuracy of the marginalized argmax at `level`.
pub fn level_accuracy(model: &Model, taxonomy: &Taxonomy, test: &[Sample], level: usize) -> Result<f64> {
    Ok(confusion(model, taxonomy, test, level)?.accuracy())
}

/// Accuracy of the leaf argmax's ancestor at `level`.
pub fn ancestor_accuracy(model: &Model, taxonomy: &Taxonomy, test: &[Sample], level: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let probs = predict_probs(model, test)?;
    let truth = truths(test, taxonomy)?;
    let mut hits = 0usize;
    for (p, &y) in probs.iter().zip(&truth) {
        if taxonomy.ancestor(argmax(p), level)? == taxonomy.ancestor(y, level)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Counts of (true class, predicted class) at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub level_name: String,
    pub class_names: Vec<String>,
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts.iter().enumerate().map(|(i, row)| row[i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn confusion_from_probs(
    probs: &[Vec<f64>],
    true_leaves: &[usize],
    taxonomy: &Taxonomy,
    level: usize,
) -> Result<ConfusionMatrix> {
    if probs.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let map = taxonomy.level_map(taxonomy.leaf_level(), level)?;
    let k = map.cols();
    let mut counts = vec![vec![0u64; k]; k];
    let mut marginal = vec![0.0; k];
    for (p, &y) in probs.iter().zip(true_leaves) {
        map.marginalize_into(p, &mut marginal)?;
        counts[taxonomy.ancestor(y, level)?][argmax(&marginal)] += 1;
    }
    Ok(ConfusionMatrix {
        level_name: taxonomy.level_name(level)?.to_string(),
        class_names: taxonomy.class_names(level)?.to_vec(),
        counts,
    })
}

pub fn confusion(model: &Model, taxonomy: &Taxonomy, test: &[Sample], level: usize) -> Result<ConfusionMatrix> {
    if test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let probs = predict_probs(model, test)?;
    confusion_from_probs(&probs, &truths(test, taxonomy)?, taxonomy, level)
}

/// Per-level accuracies, coarsest first, and confusion matrices at every level
/// except the leaves.
pub fn evaluate_levels(
    model: &Model,
    taxonomy: &Taxonomy,
    test: &[Sample],
) -> Result<(f64, Vec<(String, f64)>, Vec<ConfusionMatrix>)> {
    if test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let probs = predict_probs(model, test)?;
    let truth = truths(test, taxonomy)?;
    let top1 = top1_from_probs(&probs, &truth)?;
    let mut per_level = Vec::new();
    let mut matrices = Vec::new();
    for level in 0..taxonomy.num_levels() {
        let cm = confusion_from_probs(&probs, &truth, taxonomy, level)?;
        per_level.push((cm.level_name.clone(), cm.accuracy()));
        if level < taxonomy.leaf_level() {
            matrices.push(cm);
        }
    }
    Ok((top1, per_level, matrices))
}
