//! Loss functions over model outputs.
//!
//! Every loss is a pure function of probabilities (or logits, for
//! distillation) and constant targets. Batch terms are averaged over their
//! own batch size, and each returns the gradient of that average with
//! respect to the per-sample logits, which is what the model backpropagates.

use crate::error::{Error, Result};
use crate::taxonomy::{MarginalizationMatrix, Taxonomy};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
pub fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy against a one-hot target.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    neg_log(probs[label])
}

/// Mean value of a batch term and the gradient of that mean with respect
/// to each sample's logits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TermOutput {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

impl TermOutput {
    fn empty() -> Self {
        Self::default()
    }

    pub fn scaled(mut self, weight: f64) -> Self {
        self.value *= weight;
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= weight;
            }
        }
        self
    }
}

/// `-log(mass of coarse class)` for one sample and its logit gradient
/// `p - p * 1[leaf under class] / mass`.
pub fn marginal_cross_entropy(probs: &[f64], map: &MarginalizationMatrix, label: usize) -> (f64, Vec<f64>) {
    let mass = map.mass_of(probs, label);
    let value = neg_log(mass);
    let grad = if mass > 0.0 {
        probs
            .iter()
            .zip(map.mapping())
            .map(|(&p, &c)| if c == label { p - p / mass } else { p })
            .collect()
    } else {
        // All mass underflowed: spread the target uniformly over the class.
        let members = map.mapping().iter().filter(|&&c| c == label).count() as f64;
        probs
            .iter()
            .zip(map.mapping())
            .map(|(&p, &c)| if c == label { p - 1.0 / members } else { p })
            .collect()
    };
    (value, grad)
}

/// Levels supervised by the hierarchical loss: species-labeled data at
/// `fine_level`, coarsely labeled data at `coarse_level`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierLossSpec {
    fine: MarginalizationMatrix,
    coarse: MarginalizationMatrix,
}

impl HierLossSpec {
    pub fn new(taxonomy: &Taxonomy, fine_level: usize, coarse_level: usize) -> Result<Self> {
        if coarse_level > fine_level {
            return Err(Error::LevelOrder {
                fine: fine_level,
                coarse: coarse_level,
            });
        }
        let leaf = taxonomy.leaf_level();
        Ok(Self {
            fine: taxonomy.level_map(leaf, fine_level)?,
            coarse: taxonomy.level_map(leaf, coarse_level)?,
        })
    }

    /// Leaf-level supervision on labeled data, `coarse_level` on coarse data.
    pub fn species(taxonomy: &Taxonomy, coarse_level: usize) -> Result<Self> {
        Self::new(taxonomy, taxonomy.leaf_level(), coarse_level)
    }

    pub fn fine_level(&self) -> usize {
        self.fine.coarse_level()
    }

    pub fn coarse_level(&self) -> usize {
        self.coarse.coarse_level()
    }

    pub fn num_leaves(&self) -> usize {
        self.fine.rows()
    }

    pub fn coarse_map(&self) -> &MarginalizationMatrix {
        &self.coarse
    }

    pub fn fine_map(&self) -> &MarginalizationMatrix {
        &self.fine
    }
}

/// Mean marginalized cross-entropy over a batch.
pub fn level_cross_entropy(probs: &[Vec<f64>], labels: &[usize], map: &MarginalizationMatrix) -> Result<TermOutput> {
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: probs.len(),
            got: labels.len(),
        });
    }
    if probs.is_empty() {
        return Ok(TermOutput::empty());
    }
    let scale = 1.0 / probs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (p, &y) in probs.iter().zip(labels) {
        if p.len() != map.rows() {
            return Err(Error::DimensionMismatch {
                what: "probabilities",
                expected: map.rows(),
                got: p.len(),
            });
        }
        if y >= map.cols() {
            return Err(Error::OutOfRange {
                what: "label",
                index: y,
                limit: map.cols(),
            });
        }
        let (value, mut grad) = marginal_cross_entropy(p, map, y);
        total += value;
        for g in &mut grad {
            *g *= scale;
        }
        grads.push(grad);
    }
    Ok(TermOutput {
        value: total * scale,
        grads,
    })
}

/// The two supervised terms of the hierarchical loss.
#[derive(Debug, Clone, PartialEq)]
pub struct HierLoss {
    pub labeled: TermOutput,
    pub coarse: TermOutput,
}

impl HierLoss {
    pub fn value(&self) -> f64 {
        self.labeled.value + self.coarse.value
    }
}

/// Species-level cross-entropy on labeled data plus cross-entropy of the
/// marginalized prediction on coarsely labeled data.
pub fn hier_loss(
    labeled_probs: &[Vec<f64>],
    labels: &[usize],
    coarse_probs: &[Vec<f64>],
    coarse_labels: &[usize],
    spec: &HierLossSpec,
) -> Result<HierLoss> {
    Ok(HierLoss {
        labeled: level_cross_entropy(labeled_probs, labels, &spec.fine)?,
        coarse: level_cross_entropy(coarse_probs, coarse_labels, &spec.coarse)?,
    })
}

/// Argmax of each prediction whose confidence reaches `tau`.
pub fn pseudo_targets(probs: &[Vec<f64>], tau: f64) -> Vec<Option<usize>> {
    probs
        .iter()
        .map(|p| {
            let best = argmax(p);
            (p[best] >= tau).then_some(best)
        })
        .collect()
}

/// Mean over the batch of `H(one-hot(target), probs)` for samples with a
/// target; samples without one contribute zero but still count in the mean.
pub fn pseudo_target_cross_entropy(probs: &[Vec<f64>], targets: &[Option<usize>]) -> Result<TermOutput> {
    if probs.len() != targets.len() {
        return Err(Error::IndexMisalignment {
            weak: targets.len(),
            strong: probs.len(),
        });
    }
    if probs.is_empty() {
        return Ok(TermOutput::empty());
    }
    let scale = 1.0 / probs.len() as f64;
    let mut total = 0.0;
    let grads = probs
        .iter()
        .zip(targets)
        .map(|(p, target)| match *target {
            Some(t) => {
                total += cross_entropy(p, t);
                p.iter()
                    .enumerate()
                    .map(|(j, &pj)| scale * (pj - f64::from(u8::from(j == t))))
                    .collect()
            }
            None => vec![0.0; p.len()],
        })
        .collect();
    Ok(TermOutput {
        value: total * scale,
        grads,
    })
}

/// Pseudo-label term: confident predictions supervise themselves. The
/// targets are constants.
pub fn pseudo_label_loss(probs: &[Vec<f64>], tau: f64) -> TermOutput {
    let targets = pseudo_targets(probs, tau);
    pseudo_target_cross_entropy(probs, &targets).expect("aligned by construction")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixMatchLoss {
    pub hier: HierLoss,
    pub consistency: TermOutput,
}

impl FixMatchLoss {
    pub fn value(&self) -> f64 {
        self.hier.value() + self.consistency.value
    }
}

/// Hierarchical loss on (weak labeled, strong coarse) predictions plus the
/// consistency term: weak-view pseudo-labels supervise the strong view.
pub fn fixmatch_loss(
    labeled_probs: &[Vec<f64>],
    labels: &[usize],
    weak_probs: &[Vec<f64>],
    strong_probs: &[Vec<f64>],
    coarse_labels: &[usize],
    spec: &HierLossSpec,
    tau: f64,
) -> Result<FixMatchLoss> {
    if weak_probs.len() != strong_probs.len() {
        return Err(Error::IndexMisalignment {
            weak: weak_probs.len(),
            strong: strong_probs.len(),
        });
    }
    let hier = hier_loss(labeled_probs, labels, strong_probs, coarse_labels, spec)?;
    let targets = pseudo_targets(weak_probs, tau);
    let consistency = pseudo_target_cross_entropy(strong_probs, &targets)?;
    Ok(FixMatchLoss { hier, consistency })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillLoss {
    /// Mean `H(softmax(z_t / T), softmax(z_s / T))`.
    pub value: f64,
    /// Mean KL divergence, i.e. `value` minus the teacher entropy.
    pub kl: f64,
    /// Gradient of `value` with respect to each student logit vector.
    pub grads: Vec<Vec<f64>>,
}

pub fn distill_loss(teacher_logits: &[Vec<f64>], student_logits: &[Vec<f64>], temperature: f64) -> Result<DistillLoss> {
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::DimensionMismatch {
            what: "distillation batch",
            expected: teacher_logits.len(),
            got: student_logits.len(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::config("ssl.t_distill", "temperature must be > 0"));
    }
    if teacher_logits.is_empty() {
        return Ok(DistillLoss {
            value: 0.0,
            kl: 0.0,
            grads: Vec::new(),
        });
    }
    let scale = 1.0 / teacher_logits.len() as f64;
    let mut ce = 0.0;
    let mut entropy = 0.0;
    let mut grads = Vec::with_capacity(student_logits.len());
    for (zt, zs) in teacher_logits.iter().zip(student_logits) {
        if zt.len() != zs.len() {
            return Err(Error::DimensionMismatch {
                what: "logits",
                expected: zt.len(),
                got: zs.len(),
            });
        }
        let pt = softmax(&zt.iter().map(|z| z / temperature).collect::<Vec<_>>());
        let ps = softmax(&zs.iter().map(|z| z / temperature).collect::<Vec<_>>());
        for (&a, &b) in pt.iter().zip(&ps) {
            ce += a * neg_log(b);
            if a > 0.0 {
                entropy -= a * a.ln();
            }
        }
        grads.push(
            ps.iter()
                .zip(&pt)
                .map(|(s, t)| scale * (s - t) / temperature)
                .collect(),
        );
    }
    Ok(DistillLoss {
        value: ce * scale,
        kl: (ce - entropy) * scale,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub value: f64,
    /// Gradient with respect to the (normalized) query embedding.
    pub grad_query: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Contrastive loss of a query against one positive key and queued negatives.
pub fn infonce_loss(query: &[f64], positive: &[f64], negatives: &[Vec<f64>], temperature: f64) -> Result<InfoNceOutput> {
    if negatives.is_empty() {
        return Err(Error::EmptyQueue);
    }
    if !(temperature > 0.0) {
        return Err(Error::config("ssl.t_nce", "temperature must be > 0"));
    }
    let dim = query.len();
    for key in std::iter::once(positive).chain(negatives.iter().map(Vec::as_slice)) {
        if key.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "key embedding",
                expected: dim,
                got: key.len(),
            });
        }
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(dot(query, positive) / temperature);
    sims.extend(negatives.iter().map(|k| dot(query, k) / temperature));
    let value = log_sum_exp(&sims) - sims[0];
    let weights = softmax(&sims);
    let mut grad_query: Vec<f64> = positive.iter().map(|&k| (weights[0] - 1.0) * k).collect();
    for (w, key) in weights[1..].iter().zip(negatives) {
        for (g, &k) in grad_query.iter_mut().zip(key) {
            *g += w * k;
        }
    }
    for g in &mut grad_query {
        *g /= temperature;
    }
    Ok(InfoNceOutput { value, grad_query })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::random_taxonomy;

    fn toy() -> Taxonomy {
        let paths = [["K", "P1", "S1"], ["K", "P1", "S2"], ["K", "P2", "S3"], ["K", "P2", "S4"]]
            .iter()
            .map(|p| p.iter().map(|s| s.to_string()).collect())
            .collect::<Vec<Vec<String>>>();
        Taxonomy::build(&["Kingdom", "Phylum", "Species"], &paths).unwrap()
    }

    /// Reference CE written independently of the marginalization path.
    fn plain_ce_mean(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
        if probs.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for (p, &y) in probs.iter().zip(labels) {
            total += -(p[y].max(1e-12)).ln();
        }
        total * (1.0 / probs.len() as f64)
    }

    #[test]
    fn softmax_is_overflow_safe() {
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300 && p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn species_level_is_plain_ce() {
        let t = toy();
        let spec = HierLossSpec::species(&t, 2).unwrap();
        let labeled = vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.7, 0.1, 0.1, 0.1]];
        let coarse = vec![vec![0.25; 4], vec![0.05, 0.05, 0.05, 0.85]];
        let loss = hier_loss(&labeled, &[3, 0], &coarse, &[2, 3], &spec).unwrap();
        let expected = plain_ce_mean(&labeled, &[3, 0]) + plain_ce_mean(&coarse, &[2, 3]);
        assert_eq!(loss.value().to_bits(), expected.to_bits());
    }

    #[test]
    fn coarse_term_hand_sum() {
        let t = toy();
        let spec = HierLossSpec::species(&t, 1).unwrap();
        let p1 = t.class_index(1, "P1").unwrap();
        let q = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let loss = hier_loss(&[], &[], &q, &[p1], &spec).unwrap();
        assert!((loss.coarse.value - (-(0.1f64 + 0.2).ln())).abs() < 1e-15);
        assert_eq!(loss.labeled.value, 0.0);

        // one-hot on a leaf under the labeled phylum
        let q = vec![vec![0.0, 1.0, 0.0, 0.0]];
        let loss = hier_loss(&[], &[], &q, &[p1], &spec).unwrap();
        assert_eq!(loss.coarse.value, 0.0);
    }

    #[test]
    fn coarse_term_matches_leaf_sum_oracle() {
        let mut r = crate::rng::stream(11, 0);
        use rand::Rng;
        for _ in 0..50 {
            let t = random_taxonomy(4, 25, &mut r).unwrap();
            let level = r.gen_range(0..4);
            let spec = HierLossSpec::species(&t, level).unwrap();
            let raw: Vec<f64> = (0..25).map(|_| r.gen::<f64>()).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let label = r.gen_range(0..t.num_classes(level).unwrap());
            let mut mass = 0.0;
            for leaf in 0..25 {
                if t.ancestor(leaf, level).unwrap() == label {
                    mass += p[leaf];
                }
            }
            let loss = hier_loss(&[], &[], &[p], &[label], &spec).unwrap();
            assert!((loss.coarse.value + mass.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn level_order_and_label_checks() {
        let t = toy();
        assert!(matches!(HierLossSpec::new(&t, 1, 2), Err(Error::LevelOrder { .. })));
        let spec = HierLossSpec::species(&t, 1).unwrap();
        let err = hier_loss(&[], &[], &[vec![0.25; 4]], &[5], &spec).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
        let err = hier_loss(&[vec![0.5; 2]], &[0], &[], &[], &spec).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn pseudo_label_examples() {
        let q = vec![vec![0.6, 0.4], vec![0.5, 0.5]];
        assert_eq!(pseudo_label_loss(&q, 0.8).value, 0.0);
        let q = vec![vec![0.9, 0.1]];
        assert!((pseudo_label_loss(&q, 0.8).value + 0.9f64.ln()).abs() < 1e-15);
        let q = vec![vec![1.0, 0.0]];
        assert_eq!(pseudo_label_loss(&q, 1.5).value, 0.0);
    }

    #[test]
    fn fixmatch_reductions() {
        let t = toy();
        let spec = HierLossSpec::species(&t, 1).unwrap();
        let p = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let weak = vec![vec![0.85, 0.05, 0.05, 0.05], vec![0.3, 0.3, 0.2, 0.2]];
        let strong = vec![vec![0.6, 0.2, 0.1, 0.1], vec![0.1, 0.1, 0.1, 0.7]];
        let yk = [0, 1];

        let fm = fixmatch_loss(&p, &[2], &weak, &strong, &yk, &spec, 1.5).unwrap();
        let hier = hier_loss(&p, &[2], &strong, &yk, &spec).unwrap();
        assert_eq!(fm.value().to_bits(), hier.value().to_bits());

        // identical views, confident sample: consistency = -log max(q) / n
        let fm = fixmatch_loss(&p, &[2], &weak, &weak, &yk, &spec, 0.8).unwrap();
        assert!((fm.consistency.value - (-(0.85f64).ln() / 2.0)).abs() < 1e-15);

        // identical views with tau = 0: hier + mean(-log max q)
        let fm = fixmatch_loss(&p, &[2], &weak, &weak, &yk, &spec, 0.0).unwrap();
        let hier = hier_loss(&p, &[2], &weak, &yk, &spec).unwrap();
        let min_ent = (-(0.85f64).ln() - (0.3f64).ln()) / 2.0;
        assert!((fm.value() - hier.value() - min_ent).abs() < 1e-14);

        let err = fixmatch_loss(&p, &[2], &weak, &strong[..1], &yk, &spec, 0.8).unwrap_err();
        assert!(matches!(err, Error::IndexMisalignment { .. }));
    }

    #[test]
    fn distill_examples() {
        let z = vec![vec![0.3, -1.2, 2.0]];
        let d = distill_loss(&z, &z, 2.0).unwrap();
        assert!(d.kl.abs() < 1e-15);
        let p = softmax(&[0.15, -0.6, 1.0]);
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((d.value - entropy).abs() < 1e-15);

        let d = distill_loss(&[vec![5.0, -3.0, 1.0]], &[vec![-2.0, 4.0, 0.0]], 1e6).unwrap();
        assert!((d.value - 3f64.ln()).abs() < 1e-6);

        // softmax([2,0]) against softmax([0,2]) via log-softmax arithmetic
        let d = distill_loss(&[vec![2.0, 0.0]], &[vec![0.0, 2.0]], 1.0).unwrap();
        let lse = (1.0 + 2f64.exp()).ln();
        let pt = [2f64.exp() / (1.0 + 2f64.exp()), 1.0 / (1.0 + 2f64.exp())];
        let expected = pt[0] * lse + pt[1] * (lse - 2.0);
        assert!((d.value - expected).abs() < 1e-12);
        assert!((d.value - 1.888522).abs() < 1e-6);

        assert!(matches!(
            distill_loss(&[vec![1.0]], &[vec![1.0, 2.0]], 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn infonce_examples() {
        let q = vec![1.0, 0.0];
        let negs = vec![vec![-1.0, 0.0]; 4];
        let out = infonce_loss(&q, &q, &negs, 0.07).unwrap();
        let closed = (1.0 + 4.0 * (-2.0f64 / 0.07).exp()).ln();
        assert!((out.value - closed).abs() < 1e-15 && out.value < 1e-10);

        let k = unit(&[0.3, 0.4]);
        let out = infonce_loss(&q, &k, &vec![k.clone(); 7], 0.5).unwrap();
        assert!((out.value - 8f64.ln()).abs() < 1e-12);
        let out = infonce_loss(&q, &k, &[k.clone()], 0.5).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);

        assert!(matches!(infonce_loss(&q, &k, &[], 0.5), Err(Error::EmptyQueue)));
    }

    #[test]
    fn infonce_negative_order_invariant() {
        let q = unit(&[0.2, -0.5, 0.9]);
        let pos = unit(&[0.1, -0.4, 1.0]);
        let mut negs: Vec<Vec<f64>> = (0..6)
            .map(|i| unit(&[i as f64 - 2.5, 1.0, 0.3 * i as f64]))
            .collect();
        let a = infonce_loss(&q, &pos, &negs, 0.2).unwrap();
        negs.reverse();
        let b = infonce_loss(&q, &pos, &negs, 0.2).unwrap();
        assert!((a.value - b.value).abs() < 1e-14);
        assert!(a.value >= 0.0);
    }

    /// Logit gradients against central differences through softmax.
    #[test]
    fn logit_gradients_match_finite_differences() {
        let t = toy();
        let spec = HierLossSpec::species(&t, 1).unwrap();
        let z = vec![0.3, -0.2, 0.8, 0.1];
        let eval = |z: &[f64]| {
            let p = softmax(z);
            hier_loss(&[], &[], &[p], &[1], &spec).unwrap().value()
        };
        let grad = hier_loss(&[], &[], &[softmax(&z)], &[1], &spec).unwrap().coarse.grads[0].clone();
        for j in 0..4 {
            let eps = 1e-6;
            let mut up = z.clone();
            up[j] += eps;
            let mut down = z.clone();
            down[j] -= eps;
            let fd = (eval(&up) - eval(&down)) / (2.0 * eps);
            assert!((fd - grad[j]).abs() < 1e-8, "coord {j}: {fd} vs {}", grad[j]);
        }
    }
}
