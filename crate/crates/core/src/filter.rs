//! Out-of-domain selection for coarsely labeled data.
//!
//! A sample is kept when a frozen model is confident (max leaf probability at
//! least `tau`) and the ancestor of its leaf argmax at `match_level` equals the
//! provided label's ancestor at that level. Origin tags are read only to
//! compute [`FilterStats`].

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::model::Model;
use crate::synthdata::{DataSplit, Origin, Sample};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub tau: f64,
    pub match_level: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { tau: 0.8, match_level: 1 }
    }
}

impl FilterConfig {
    /// `tau` may exceed 1 to reject everything; it must be positive.
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::config("filter.tau", format!("must be a nonnegative number, got {}", self.tau)));
        }
        if self.match_level >= taxonomy.num_levels() {
            return Err(Error::config(
                "filter.match_level",
                format!("level {} out of range for a {}-level taxonomy", self.match_level, taxonomy.num_levels()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    /// Position in the filtered input.
    pub index: usize,
    pub max_prob: f64,
    pub predicted_leaf: usize,
    pub predicted_ancestor: usize,
    pub provided_ancestor: usize,
    pub keep: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub in_class_total: usize,
    pub in_class_kept: usize,
    pub out_class_total: usize,
    pub out_class_kept: usize,
}

impl FilterStats {
    pub fn kept_fraction(&self) -> f64 {
        ratio(self.kept, self.total)
    }

    /// In-class share of the kept samples.
    pub fn precision(&self) -> f64 {
        ratio(self.in_class_kept, self.in_class_kept + self.out_class_kept)
    }

    /// Share of in-class samples that were kept.
    pub fn recall(&self) -> f64 {
        ratio(self.in_class_kept, self.in_class_total)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("filter.total".into(), self.total.to_string()),
            ("filter.kept".into(), self.kept.to_string()),
            ("filter.in_class_total".into(), self.in_class_total.to_string()),
            ("filter.in_class_kept".into(), self.in_class_kept.to_string()),
            ("filter.out_class_total".into(), self.out_class_total.to_string()),
            ("filter.out_class_kept".into(), self.out_class_kept.to_string()),
            ("filter.precision".into(), self.precision().to_string()),
            ("filter.recall".into(), self.recall().to_string()),
        ]
    }
}

// An empty denominator counts as perfect.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Sample>,
    pub decisions: Vec<FilterDecision>,
    pub stats: FilterStats,
}

/// Keep/reject decisions in input order. Only features and provided labels
/// are read.
pub fn decide(model: &Model, taxonomy: &Taxonomy, samples: &[Sample], config: &FilterConfig) -> Result<Vec<FilterDecision>> {
    config.validate(taxonomy)?;
    samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            if s.label_level < config.match_level {
                return Err(Error::LevelOrder {
                    fine: s.label_level,
                    coarse: config.match_level,
                });
            }
            let probs = model.forward(&s.features)?.probs;
            let predicted_leaf = argmax(&probs);
            let max_prob = probs[predicted_leaf];
            let predicted_ancestor = taxonomy.ancestor(predicted_leaf, config.match_level)?;
            let provided_ancestor = taxonomy.class_ancestor(s.label_level, s.label, config.match_level)?;
            Ok(FilterDecision {
                index,
                max_prob,
                predicted_leaf,
                predicted_ancestor,
                provided_ancestor,
                keep: max_prob >= config.tau && predicted_ancestor == provided_ancestor,
            })
        })
        .collect()
}

pub fn filter(model: &Model, taxonomy: &Taxonomy, samples: &[Sample], config: &FilterConfig) -> Result<FilterOutcome> {
    let decisions = decide(model, taxonomy, samples, config)?;
    let kept: Vec<Sample> = decisions
        .iter()
        .filter(|d| d.keep)
        .map(|d| samples[d.index].clone())
        .collect();
    let stats = stats(samples, &decisions);
    Ok(FilterOutcome { kept, decisions, stats })
}

fn stats(samples: &[Sample], decisions: &[FilterDecision]) -> FilterStats {
    let mut s = FilterStats {
        total: samples.len(),
        ..FilterStats::default()
    };
    for (sample, d) in samples.iter().zip(decisions) {
        s.kept += d.keep as usize;
        match sample.origin {
            Origin::InClass => {
                s.in_class_total += 1;
                s.in_class_kept += d.keep as usize;
            }
            Origin::OutOfClass { .. } => {
                s.out_class_total += 1;
                s.out_class_kept += d.keep as usize;
            }
            Origin::Unknown => {}
        }
    }
    s
}

/// Filters `coarse_in ∪ coarse_out` and returns a split whose coarse pool is
/// the kept samples (in `coarse_in`, with `coarse_out` empty). Other splits
/// are copied unchanged.
pub fn filtered_source(
    data: &DataSplit,
    model: &Model,
    taxonomy: &Taxonomy,
    config: &FilterConfig,
) -> Result<(DataSplit, FilterOutcome)> {
    let pool: Vec<Sample> = data.coarse_in.iter().chain(&data.coarse_out).cloned().collect();
    let outcome = filter(model, taxonomy, &pool, config)?;
    let split = DataSplit {
        dim: data.dim,
        labeled: data.labeled.clone(),
        coarse_in: outcome.kept.clone(),
        coarse_out: Vec::new(),
        test: data.test.clone(),
        validation: data.validation.clone(),
    };
    Ok((split, outcome))
}

const FILTER_MAGIC: &str = "#hierssl-filter v1";

/// One row per decision: sample id, max-prob, predicted leaf, predicted
/// ancestor, provided label, decision.
pub fn filter_report(decisions: &[FilterDecision], taxonomy: &Taxonomy, config: &FilterConfig) -> Result<String> {
    let leaf = taxonomy.leaf_level();
    let level = config.match_level;
    let mut out = format!(
        "{FILTER_MAGIC}\n#tau\t{}\n#match_level\t{}\nsample\tmax_prob\tpredicted_leaf\tpredicted_ancestor\tprovided_label\tdecision\n",
        config.tau,
        taxonomy.level_name(level)?
    );
    for d in decisions {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            d.index,
            d.max_prob,
            taxonomy.class_name(leaf, d.predicted_leaf)?,
            taxonomy.class_name(level, d.predicted_ancestor)?,
            taxonomy.class_name(level, d.provided_ancestor)?,
            if d.keep { "keep" } else { "reject" }
        );
    }
    Ok(out)
}
