//! Synthetic hierarchically clustered feature data, feature-space
//! augmentations, and the tab-separated dataset file format.
//!
//! Class centers are drawn top-down: every class sits at its parent's
//! center plus a Gaussian offset whose scale depends on the level, and
//! samples scatter around their species center. Out-of-class species are
//! extra leaves grafted under existing internal nodes, so they share every
//! coarse label with in-class species while never appearing in the labeled
//! or test splits.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::taxonomy::{default_level_names, Taxonomy};

/// Hidden provenance of a sample. Never consulted by training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    InClass,
    OutOfClass { species: String },
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label_level: usize,
    pub label: usize,
    /// In-class leaf index, when known.
    pub true_species: Option<usize>,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitKind {
    Labeled,
    CoarseIn,
    CoarseOut,
    Test,
    Validation,
}

impl SplitKind {
    pub const ALL: [SplitKind; 5] = [
        SplitKind::Labeled,
        SplitKind::CoarseIn,
        SplitKind::CoarseOut,
        SplitKind::Test,
        SplitKind::Validation,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SplitKind::Labeled => "labeled",
            SplitKind::CoarseIn => "coarse_in",
            SplitKind::CoarseOut => "coarse_out",
            SplitKind::Test => "test",
            SplitKind::Validation => "validation",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataSplit {
    pub dim: usize,
    pub labeled: Vec<Sample>,
    pub coarse_in: Vec<Sample>,
    pub coarse_out: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Held-out species-labeled pool used for model selection and
    /// contrastive pretraining, never for supervised losses.
    pub validation: Vec<Sample>,
}

impl DataSplit {
    pub fn get(&self, kind: SplitKind) -> &[Sample] {
        match kind {
            SplitKind::Labeled => &self.labeled,
            SplitKind::CoarseIn => &self.coarse_in,
            SplitKind::CoarseOut => &self.coarse_out,
            SplitKind::Test => &self.test,
            SplitKind::Validation => &self.validation,
        }
    }

    pub fn get_mut(&mut self, kind: SplitKind) -> &mut Vec<Sample> {
        match kind {
            SplitKind::Labeled => &mut self.labeled,
            SplitKind::CoarseIn => &mut self.coarse_in,
            SplitKind::CoarseOut => &mut self.coarse_out,
            SplitKind::Test => &mut self.test,
            SplitKind::Validation => &mut self.validation,
        }
    }

    /// Serialized form of one split in the dataset file format.
    pub fn split_text(&self, kind: SplitKind, taxonomy: &Taxonomy) -> Result<String> {
        let mut out = dataset_header(self.dim, taxonomy);
        for sample in self.get(kind) {
            write_sample_row(&mut out, kind, sample, taxonomy)?;
        }
        Ok(out)
    }

    /// Writes one file per split (`labeled.tsv`, `coarse_in.tsv`, ...).
    pub fn write_dir(&self, dir: &Path, taxonomy: &Taxonomy) -> Result<()> {
        self.write_dir_annotated(dir, taxonomy, &[])
    }

    /// Like [`DataSplit::write_dir`], with `#key<TAB>value` lines after the
    /// header. Readers skip them.
    pub fn write_dir_annotated(&self, dir: &Path, taxonomy: &Taxonomy, meta: &[(&str, &str)]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = dataset_header(self.dim, taxonomy);
        let mut annotation = String::new();
        for (k, v) in meta {
            let _ = writeln!(annotation, "#{k}\t{v}");
        }
        for kind in SplitKind::ALL {
            let path = dir.join(format!("{}.tsv", kind.tag()));
            let mut text = self.split_text(kind, taxonomy)?;
            text.insert_str(header.len(), &annotation);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads every split file present in `dir`.
    pub fn load_dir(dir: &Path, taxonomy: &Taxonomy) -> Result<Self> {
        let paths: Vec<_> = SplitKind::ALL
            .iter()
            .map(|k| dir.join(format!("{}.tsv", k.tag())))
            .filter(|p| p.exists())
            .collect();
        if paths.is_empty() {
            return Err(Error::MissingSplit(format!("no split files in {}", dir.display())));
        }
        load_dataset(&paths, taxonomy)
    }

    /// SHA-256 over the serialized splits; identifies the data a run used.
    pub fn fingerprint(&self, taxonomy: &Taxonomy) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(taxonomy.to_text().as_bytes());
        for kind in SplitKind::ALL {
            hasher.update(self.split_text(kind, taxonomy)?.as_bytes());
        }
        Ok(hex(&hasher.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Parameters of the weak and strong feature-space augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub drop_prob: f64,
    /// Per-sample scale factor is drawn uniformly from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            weak_sigma: 0.3,
            strong_sigma: 1.5,
            drop_prob: 0.2,
            jitter: 0.2,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_sigma >= 0.0 && self.weak_sigma.is_finite()) {
            return Err(Error::config("aug.weak_sigma", "must be finite and >= 0"));
        }
        if !(self.strong_sigma > self.weak_sigma && self.strong_sigma.is_finite()) {
            return Err(Error::config("aug.strong_sigma", "must be finite and exceed aug.weak_sigma"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::config("aug.drop_prob", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config("aug.jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `x + N(0, sigma^2)` per coordinate. Returns `x` unchanged when `sigma == 0`.
pub fn augment_weak(x: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Inverted dropout, a per-sample scale jitter, then additive Gaussian noise.
pub fn augment_strong(x: &[f64], params: &AugConfig, rng: &mut Rng) -> Vec<f64> {
    let keep_scale = 1.0 / (1.0 - params.drop_prob);
    let scale = if params.jitter > 0.0 {
        rng.gen_range(1.0 - params.jitter..=1.0 + params.jitter)
    } else {
        1.0
    };
    x.iter()
        .map(|&v| {
            let kept = if rng.gen::<f64>() < params.drop_prob { 0.0 } else { v * keep_scale };
            kept * scale + params.strong_sigma * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

/// Everything needed to build a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub level_names: Vec<String>,
    /// In-class class counts per level, coarsest first.
    pub level_counts: Vec<usize>,
    pub dim: usize,
    /// Center offset scale per level.
    pub sigmas: Vec<f64>,
    /// Within-species noise.
    pub sigma_x: f64,
    pub labeled_per_species: usize,
    pub coarse_in_per_species: usize,
    pub coarse_out_per_species: usize,
    pub test_per_species: usize,
    pub val_per_species: usize,
    /// Fraction of all leaves held out as out-of-class species.
    pub out_fraction: f64,
    /// Level whose classes receive the novel species (default: one above the leaves).
    pub out_attach_level: Option<usize>,
    /// Multiplier on the offsets of novel nodes; > 1 shifts their appearance.
    pub out_offset_multiplier: f64,
    /// Level at which coarse samples are labeled; `None` labels each at the
    /// finest level known for it (the leaf for in-class, the attach level
    /// for out-of-class).
    pub coarse_label_level: Option<usize>,
    /// Power-law exponent on per-species coarse counts; 0 disables the tail.
    pub long_tail_exponent: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            level_names: default_level_names(7),
            level_counts: vec![3, 8, 14, 22, 32, 45, 60],
            dim: 32,
            sigmas: vec![0.7; 7],
            sigma_x: 2.0,
            labeled_per_species: 5,
            coarse_in_per_species: 45,
            coarse_out_per_species: 45,
            test_per_species: 20,
            val_per_species: 5,
            out_fraction: 2.0 / 3.0,
            out_attach_level: None,
            out_offset_multiplier: 1.0,
            coarse_label_level: None,
            long_tail_exponent: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let depth = self.level_names.len();
        if depth < 2 {
            return Err(Error::config("gen.level_names", "need at least 2 levels"));
        }
        if self.level_counts.len() != depth {
            return Err(Error::config(
                "gen.level_counts",
                format!("expected {depth} counts, got {}", self.level_counts.len()),
            ));
        }
        if self.level_counts[0] == 0 {
            return Err(Error::config("gen.level_counts", "top level needs at least one class"));
        }
        if self.level_counts.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("gen.level_counts", "counts must be nondecreasing"));
        }
        if self.dim == 0 {
            return Err(Error::config("gen.dim", "must be >= 1"));
        }
        if self.sigmas.len() != depth {
            return Err(Error::config(
                "gen.sigmas",
                format!("expected {depth} values, got {}", self.sigmas.len()),
            ));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("gen.sigmas", "all values must be finite and > 0"));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_x.is_finite()) {
            return Err(Error::config("gen.sigma_x", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.out_fraction) {
            return Err(Error::config("gen.out_fraction", "must lie in [0, 1)"));
        }
        if self.attach_level() >= depth - 1 {
            return Err(Error::config("gen.out_attach_level", "must be above the leaf level"));
        }
        if !(self.out_offset_multiplier > 0.0 && self.out_offset_multiplier.is_finite()) {
            return Err(Error::config("gen.out_offset_multiplier", "must be finite and > 0"));
        }
        if let Some(level) = self.coarse_label_level {
            if level >= depth {
                return Err(Error::config("gen.coarse_label_level", "level out of range"));
            }
        }
        if !(self.long_tail_exponent >= 0.0 && self.long_tail_exponent.is_finite()) {
            return Err(Error::config("gen.long_tail_exponent", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn attach_level(&self) -> usize {
        self.out_attach_level
            .unwrap_or(self.level_names.len().saturating_sub(2))
    }

    /// Number of novel leaves implied by `out_fraction`.
    pub fn num_out_species(&self) -> usize {
        let n_in = *self.level_counts.last().unwrap_or(&0) as f64;
        (n_in * self.out_fraction / (1.0 - self.out_fraction)).round() as usize
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Taxonomy over in-class and out-of-class species.
    pub full_taxonomy: Taxonomy,
    /// Label space used for training and evaluation (in-class species only).
    /// Indices at levels at or above the attach level agree with `full_taxonomy`.
    pub taxonomy: Taxonomy,
    pub split: DataSplit,
    /// Class centers per level, indexed like `full_taxonomy`.
    pub centers: Vec<Vec<Vec<f64>>>,
    /// For each `full_taxonomy` leaf, whether it is in-class.
    pub in_class: Vec<bool>,
}

const STREAM_CENTERS_IN: u64 = 1;
const STREAM_CENTERS_OUT: u64 = 2;
const STREAM_TAIL: u64 = 3;

fn split_stream(kind: SplitKind) -> u64 {
    10 + kind as u64
}

pub fn generate(config: &GenConfig) -> Result<SyntheticData> {
    config.validate()?;
    let depth = config.level_names.len();
    let leaf_level = depth - 1;
    let attach = config.attach_level();

    let in_paths = shape_paths(&config.level_names, &config.level_counts, None)?;
    let taxonomy = Taxonomy::build(&config.level_names, &in_paths)?;

    // Novel species: distribute across attach-level classes in proportion to
    // their in-class leaf counts, each with a private chain below the attach level.
    let n_out = config.num_out_species();
    let attach_counts = {
        let mut counts = vec![0usize; taxonomy.num_classes(attach)?];
        for &a in taxonomy.leaf_ancestors(attach)? {
            counts[a] += 1;
        }
        counts
    };
    let out_per_attach = largest_remainder(&attach_counts, n_out);
    let mut out_paths = Vec::with_capacity(n_out);
    let mut serial = 0usize;
    for (node, &k) in out_per_attach.iter().enumerate() {
        let prefix: Vec<String> = {
            // any in-class leaf under `node` gives the ancestor names
            let leaf = taxonomy
                .leaf_ancestors(attach)?
                .iter()
                .position(|&a| a == node)
                .expect("attach node has an in-class leaf");
            taxonomy.leaf_path(leaf)?[..=attach]
                .iter()
                .map(|s| s.to_string())
                .collect()
        };
        for _ in 0..k {
            serial += 1;
            let mut path = prefix.clone();
            for level in attach + 1..depth {
                path.push(format!("Novel{}{serial:05}", config.level_names[level]));
            }
            out_paths.push(path);
        }
    }
    let mut all_paths = in_paths.clone();
    all_paths.extend(out_paths.iter().cloned());
    let full_taxonomy = Taxonomy::build(&config.level_names, &all_paths)?;

    let in_leaf_names: std::collections::HashSet<&str> = taxonomy
        .class_names(leaf_level)?
        .iter()
        .map(String::as_str)
        .collect();
    let in_class: Vec<bool> = full_taxonomy
        .class_names(leaf_level)?
        .iter()
        .map(|n| in_leaf_names.contains(n.as_str()))
        .collect();

    // Centers. In-class nodes draw from their own stream in in-class index
    // order, so adding novel species never perturbs the in-class geometry.
    let mut centers: Vec<Vec<Vec<f64>>> = Vec::with_capacity(depth);
    let mut in_rng = rng::stream(config.seed, STREAM_CENTERS_IN);
    let mut out_rng = rng::stream(config.seed, STREAM_CENTERS_OUT);
    for level in 0..depth {
        let full_names = full_taxonomy.class_names(level)?;
        let mut level_centers = vec![Vec::new(); full_names.len()];
        let parents = full_taxonomy.parents(level)?;
        let origin = vec![0.0; config.dim];
        let offset_center = |c: usize, scale: f64, rng: &mut Rng| -> Vec<f64> {
            let base = if level == 0 { &origin } else { &centers[level - 1][parents[c]] };
            base.iter()
                .map(|&b| b + scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        for name in taxonomy.class_names(level)? {
            let c = full_taxonomy.class_index(level, name).expect("in-class node in full taxonomy");
            level_centers[c] = offset_center(c, config.sigmas[level], &mut in_rng);
        }
        for (c, name) in full_names.iter().enumerate() {
            if taxonomy.class_index(level, name).is_none() {
                let scale = config.sigmas[level] * config.out_offset_multiplier;
                level_centers[c] = offset_center(c, scale, &mut out_rng);
            }
        }
        centers.push(level_centers);
    }

    let leaf_center_in = |leaf: usize| -> &Vec<f64> {
        let name = &taxonomy.class_names(leaf_level).expect("leaf level")[leaf];
        let c = full_taxonomy.class_index(leaf_level, name).expect("in-class leaf");
        &centers[leaf_level][c]
    };

    let n_in = taxonomy.num_leaves();
    let mut tail_rng = rng::stream(config.seed, STREAM_TAIL);
    let coarse_in_counts = tail_counts(config.coarse_in_per_species, n_in, config.long_tail_exponent, &mut tail_rng);
    let coarse_out_counts = tail_counts(config.coarse_out_per_species, n_out, config.long_tail_exponent, &mut tail_rng);

    let draw = |center: &[f64], rng: &mut Rng| -> Vec<f64> {
        center
            .iter()
            .map(|&c| {
                if config.sigma_x == 0.0 {
                    c
                } else {
                    c + config.sigma_x * rng.sample::<f64, _>(StandardNormal)
                }
            })
            .collect()
    };

    let mut split = DataSplit {
        dim: config.dim,
        ..DataSplit::default()
    };

    let species_level_split = |kind: SplitKind, per_species: usize| -> Vec<Sample> {
        let mut rng = rng::stream(config.seed, split_stream(kind));
        let mut out = Vec::with_capacity(per_species * n_in);
        for leaf in 0..n_in {
            for _ in 0..per_species {
                out.push(Sample {
                    features: draw(leaf_center_in(leaf), &mut rng),
                    label_level: leaf_level,
                    label: leaf,
                    true_species: Some(leaf),
                    origin: Origin::InClass,
                });
            }
        }
        out
    };
    split.labeled = species_level_split(SplitKind::Labeled, config.labeled_per_species);
    split.test = species_level_split(SplitKind::Test, config.test_per_species);
    split.validation = species_level_split(SplitKind::Validation, config.val_per_species);

    let in_label_level = config.coarse_label_level.unwrap_or(leaf_level);
    {
        let mut rng = rng::stream(config.seed, split_stream(SplitKind::CoarseIn));
        for leaf in 0..n_in {
            for _ in 0..coarse_in_counts[leaf] {
                split.coarse_in.push(Sample {
                    features: draw(leaf_center_in(leaf), &mut rng),
                    label_level: in_label_level,
                    label: taxonomy.ancestor(leaf, in_label_level)?,
                    true_species: Some(leaf),
                    origin: Origin::InClass,
                });
            }
        }
    }

    let out_label_level = config.coarse_label_level.unwrap_or(attach).min(attach);
    {
        let mut rng = rng::stream(config.seed, split_stream(SplitKind::CoarseOut));
        let mut out_leaves: Vec<(usize, &String)> = full_taxonomy
            .class_names(leaf_level)?
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_class[*i])
            .collect();
        out_leaves.sort_by_key(|(i, _)| *i);
        for (k, (leaf, name)) in out_leaves.into_iter().enumerate() {
            let full_label = full_taxonomy.ancestor(leaf, out_label_level)?;
            let label_name = full_taxonomy.class_name(out_label_level, full_label)?;
            let label = taxonomy
                .class_index(out_label_level, label_name)
                .expect("novel species attach under in-class nodes");
            for _ in 0..coarse_out_counts[k] {
                split.coarse_out.push(Sample {
                    features: draw(&centers[leaf_level][leaf], &mut rng),
                    label_level: out_label_level,
                    label,
                    true_species: None,
                    origin: Origin::OutOfClass {
                        species: name.clone(),
                    },
                });
            }
        }
    }

    Ok(SyntheticData {
        full_taxonomy,
        taxonomy,
        split,
        centers,
        in_class,
    })
}

/// Per-species counts under an optional power-law tail, in species order.
/// With exponent 0 every species gets `base`.
fn tail_counts(base: usize, n: usize, exponent: f64, rng: &mut Rng) -> Vec<usize> {
    if exponent == 0.0 || n == 0 {
        return vec![base; n];
    }
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let weights: Vec<f64> = (0..n).map(|r| ((r + 1) as f64).powf(-exponent)).collect();
    let norm = n as f64 / weights.iter().sum::<f64>();
    ranks
        .iter()
        .map(|&r| ((base as f64 * weights[r] * norm).round() as usize).max(1))
        .collect()
}

/// Splits `total` across buckets in proportion to `weights` (largest
/// remainder; ties go to the lower index).
fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((w * total) % sum, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Leaf paths of a balanced tree with exactly `level_counts[l]` classes at
/// each level. `top_budgets`, if given, fixes how many leaves sit under each
/// top-level class.
pub fn shape_paths(
    level_names: &[String],
    level_counts: &[usize],
    top_budgets: Option<&[usize]>,
) -> Result<Vec<Vec<String>>> {
    let names: Vec<Vec<String>> = level_names
        .iter()
        .zip(level_counts)
        .map(|(level, &n)| (0..n).map(|i| format!("{level}{i:04}")).collect())
        .collect();
    shape_named_paths(&names, level_counts, top_budgets)
}

fn shape_named_paths(
    names: &[Vec<String>],
    level_counts: &[usize],
    top_budgets: Option<&[usize]>,
) -> Result<Vec<Vec<String>>> {
    let depth = level_counts.len();
    if depth < 2 || level_counts[0] == 0 || level_counts.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config(
            "level_counts",
            "need >= 2 levels with nondecreasing, nonzero counts",
        ));
    }
    let leaves = level_counts[depth - 1];
    let mut budgets: Vec<usize> = match top_budgets {
        Some(b) => {
            if b.len() != level_counts[0] || b.iter().sum::<usize>() != leaves || b.contains(&0) {
                return Err(Error::config("top_budgets", "must cover every leaf, one entry per top class"));
            }
            b.to_vec()
        }
        None => even_split(leaves, level_counts[0]),
    };
    // paths_so_far[i] = names of the ancestors of node i at the current level
    let mut prefixes: Vec<Vec<String>> = names[0].iter().map(|n| vec![n.clone()]).collect();
    for level in 1..depth {
        let children = allocate_children(&budgets, level_counts[level]);
        let mut next_prefixes = Vec::with_capacity(level_counts[level]);
        let mut next_budgets = Vec::with_capacity(level_counts[level]);
        let mut serial = 0;
        for (parent, &k) in children.iter().enumerate() {
            for b in even_split(budgets[parent], k) {
                let mut p = prefixes[parent].clone();
                p.push(names[level][serial].clone());
                serial += 1;
                next_prefixes.push(p);
                next_budgets.push(b);
            }
        }
        prefixes = next_prefixes;
        budgets = next_budgets;
    }
    Ok(prefixes)
}

fn even_split(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

/// One child per parent, then greedily to the parent with the most leaves per child.
fn allocate_children(budgets: &[usize], total: usize) -> Vec<usize> {
    let mut counts = vec![1usize; budgets.len()];
    for _ in budgets.len()..total {
        let best = (0..budgets.len())
            .filter(|&p| counts[p] < budgets[p])
            .max_by(|&a, &b| {
                let ra = budgets[a] as f64 / counts[a] as f64;
                let rb = budgets[b] as f64 / counts[b] as f64;
                ra.partial_cmp(&rb).unwrap().then(b.cmp(&a))
            })
            .expect("level counts never exceed leaf count");
        counts[best] += 1;
    }
    counts
}

/// Kingdom and phylum structure of the Semi-iNat in-class species, with
/// deeper levels shaped to the published per-level class counts.
pub fn semi_inat_paths() -> Vec<Vec<String>> {
    const PHYLA: [(&str, &str, usize); 8] = [
        ("Animalia", "Mollusca", 11),
        ("Animalia", "Chordata", 113),
        ("Animalia", "Arthropoda", 301),
        ("Animalia", "Echinodermata", 4),
        ("Plantae", "Tracheophyta", 336),
        ("Plantae", "Bryophyta", 6),
        ("Fungi", "Basidiomycota", 29),
        ("Fungi", "Ascomycota", 10),
    ];
    let counts = [29usize, 123, 339, 729, 810];
    let level_names = default_level_names(7);
    let mut names: Vec<Vec<String>> = vec![PHYLA.iter().map(|p| p.1.to_string()).collect()];
    for (level, &n) in counts.iter().enumerate() {
        names.push((0..n).map(|i| format!("{}{i:04}", level_names[level + 2])).collect());
    }
    let mut level_counts = vec![PHYLA.len()];
    level_counts.extend_from_slice(&counts);
    let budgets: Vec<usize> = PHYLA.iter().map(|p| p.2).collect();
    let below_phylum =
        shape_named_paths(&names, &level_counts, Some(&budgets)).expect("valid Semi-iNat shape");
    below_phylum
        .into_iter()
        .map(|tail| {
            let kingdom = PHYLA.iter().find(|p| p.1 == tail[0]).expect("known phylum").0;
            std::iter::once(kingdom.to_string()).chain(tail).collect()
        })
        .collect()
}

pub fn semi_inat_taxonomy() -> Taxonomy {
    Taxonomy::from_paths(&semi_inat_paths()).expect("valid Semi-iNat taxonomy")
}

/// A random tree with `levels` levels and `leaves` leaves.
pub fn random_taxonomy(levels: usize, leaves: usize, rng: &mut Rng) -> Result<Taxonomy> {
    if levels < 2 || leaves == 0 {
        return Err(Error::config("random_taxonomy", "need >= 2 levels and >= 1 leaf"));
    }
    // parents[l][c] for l >= 1, built bottom-up.
    let mut counts = vec![0usize; levels];
    counts[levels - 1] = leaves;
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); levels];
    for level in (1..levels).rev() {
        let n_children = counts[level];
        let n_parents = rng.gen_range(1..=n_children);
        counts[level - 1] = n_parents;
        let mut order: Vec<usize> = (0..n_children).collect();
        order.shuffle(rng);
        let mut assign = vec![0usize; n_children];
        for (k, &child) in order.iter().enumerate() {
            assign[child] = if k < n_parents { k } else { rng.gen_range(0..n_parents) };
        }
        parents[level] = assign;
    }
    let paths: Vec<Vec<String>> = (0..leaves)
        .map(|leaf| {
            let mut path = vec![String::new(); levels];
            let mut c = leaf;
            for level in (0..levels).rev() {
                path[level] = format!("n{level}_{c:04}");
                if level > 0 {
                    c = parents[level][c];
                }
            }
            path
        })
        .collect();
    Taxonomy::build(&default_level_names(levels), &paths)
}

const DATASET_MAGIC: &str = "#hierssl-dataset v1";

fn dataset_header(dim: usize, taxonomy: &Taxonomy) -> String {
    format!(
        "{DATASET_MAGIC}\n#dim\t{dim}\n#levels\t{}\n",
        taxonomy.level_names().join(",")
    )
}

fn write_sample_row(out: &mut String, kind: SplitKind, sample: &Sample, taxonomy: &Taxonomy) -> Result<()> {
    let level_name = taxonomy.level_name(sample.label_level)?;
    let label_name = taxonomy.class_name(sample.label_level, sample.label)?;
    let truth = match (&sample.origin, sample.true_species) {
        (Origin::OutOfClass { species }, _) => species.clone(),
        (_, Some(leaf)) => taxonomy.class_name(taxonomy.leaf_level(), leaf)?.to_string(),
        (_, None) => "-".to_string(),
    };
    let _ = write!(out, "{}\t{level_name}\t{label_name}\t{truth}", kind.tag());
    for v in &sample.features {
        let _ = write!(out, "\t{v}");
    }
    out.push('\n');
    Ok(())
}

/// Reads one or more dataset files against a label-space taxonomy.
///
/// A true-species name that resolves to a leaf marks the sample in-class; an
/// unresolvable name marks it out-of-class; `-` leaves the origin unknown.
pub fn load_dataset<P: AsRef<Path>>(paths: &[P], taxonomy: &Taxonomy) -> Result<DataSplit> {
    let mut split = DataSplit::default();
    let mut dim: Option<usize> = None;
    for path in paths {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file_dim = parse_dataset(&text, &path.display().to_string(), taxonomy, &mut split)?;
        match dim {
            Some(d) if d != file_dim => {
                return Err(Error::parse(
                    path.display().to_string(),
                    2,
                    format!("dimension {file_dim} differs from earlier files ({d})"),
                ));
            }
            _ => dim = Some(file_dim),
        }
    }
    split.dim = dim.unwrap_or(0);
    Ok(split)
}

/// Parses dataset text, appending rows to `split`; returns the feature dimension.
pub fn parse_dataset(text: &str, source: &str, taxonomy: &Taxonomy, split: &mut DataSplit) -> Result<usize> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let perr = |line: usize, msg: String| Error::parse(source, line, msg);

    match lines.next() {
        Some((_, l)) if l == DATASET_MAGIC => {}
        Some((n, _)) => return Err(perr(n, format!("expected `{DATASET_MAGIC}`"))),
        None => return Err(perr(1, "empty dataset file".into())),
    }
    let dim = match lines.next() {
        Some((n, l)) => l
            .strip_prefix("#dim\t")
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| perr(n, "expected `#dim<TAB><positive integer>`".into()))?,
        None => return Err(perr(2, "missing #dim line".into())),
    };
    match lines.next() {
        Some((n, l)) => {
            let names = l
                .strip_prefix("#levels\t")
                .ok_or_else(|| perr(n, "expected `#levels<TAB>...`".into()))?;
            if names.split(',').ne(taxonomy.level_names().iter().map(String::as_str)) {
                return Err(perr(n, format!("levels {names:?} do not match the taxonomy")));
            }
        }
        None => return Err(perr(3, "missing #levels line".into())),
    }

    let leaf_level = taxonomy.leaf_level();
    for (n, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 + dim {
            return Err(perr(n, format!("expected {} fields, found {}", 4 + dim, fields.len())));
        }
        let kind = SplitKind::from_tag(fields[0])
            .ok_or_else(|| perr(n, format!("unknown split tag {:?}", fields[0])))?;
        let level = taxonomy
            .level_index(fields[1])
            .ok_or_else(|| perr(n, format!("unknown level {:?}", fields[1])))?;
        let label = taxonomy.class_index(level, fields[2]).ok_or_else(|| Error::UnknownClass {
            level: fields[1].to_string(),
            name: fields[2].to_string(),
        })?;
        let (true_species, origin) = match fields[3] {
            "-" => (None, Origin::Unknown),
            name => match taxonomy.class_index(leaf_level, name) {
                Some(leaf) => (Some(leaf), Origin::InClass),
                None => (
                    None,
                    Origin::OutOfClass {
                        species: name.to_string(),
                    },
                ),
            },
        };
        if let Some(leaf) = true_species {
            if taxonomy.ancestor(leaf, level)? != label {
                return Err(perr(n, format!("label {:?} is not an ancestor of {:?}", fields[2], fields[3])));
            }
        }
        if matches!(kind, SplitKind::Labeled | SplitKind::Test | SplitKind::Validation) && level != leaf_level {
            return Err(perr(n, format!("{} rows must be labeled at the leaf level", kind.tag())));
        }
        let features = fields[4..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(n, format!("bad feature value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        split.get_mut(kind).push(Sample {
            features,
            label_level: level,
            label,
            true_species,
            origin,
        });
    }
    Ok(dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> GenConfig {
        GenConfig {
            level_names: vec!["Kingdom".into(), "Phylum".into(), "Species".into()],
            level_counts: vec![1, 2, 8],
            dim: 8,
            sigmas: vec![1.0, 1.0, 0.5],
            sigma_x: 0.3,
            labeled_per_species: 2,
            coarse_in_per_species: 3,
            coarse_out_per_species: 2,
            test_per_species: 2,
            val_per_species: 1,
            seed: 0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn semi_inat_shape() {
        let t = semi_inat_taxonomy();
        assert_eq!(t.class_counts(), vec![3, 8, 29, 123, 339, 729, 810]);
        assert_eq!(t.edge_count(), 2041);
        let kingdoms = t.class_names(0).unwrap();
        assert_eq!(kingdoms, ["Animalia", "Fungi", "Plantae"]);
    }

    #[test]
    fn semi_inat_out_ratio() {
        let config = GenConfig {
            level_counts: vec![3, 8, 29, 123, 339, 729, 810],
            sigmas: vec![1.0; 7],
            dim: 2,
            labeled_per_species: 0,
            coarse_in_per_species: 0,
            coarse_out_per_species: 0,
            test_per_species: 0,
            val_per_species: 0,
            ..GenConfig::default()
        };
        let data = generate(&config).unwrap();
        let n_in = data.taxonomy.num_leaves();
        let n_out = data.full_taxonomy.num_leaves() - n_in;
        assert_eq!(n_in, 810);
        let ratio = n_out as f64 / n_in as f64;
        assert!((ratio - 1629.0 / 810.0).abs() < 0.02, "ratio {ratio}");
        assert_eq!(data.in_class.iter().filter(|&&b| b).count(), 810);
    }

    #[test]
    fn deterministic_generation() {
        let a = generate(&toy_config()).unwrap();
        let b = generate(&toy_config()).unwrap();
        assert_eq!(a, b);
        let c = generate(&GenConfig { seed: 1, ..toy_config() }).unwrap();
        assert_ne!(a.split, c.split);
    }

    #[test]
    fn zero_noise_is_center() {
        let data = generate(&GenConfig { sigma_x: 0.0, ..toy_config() }).unwrap();
        let leaf_level = data.taxonomy.leaf_level();
        for s in &data.split.test {
            let name = data.taxonomy.class_name(leaf_level, s.label).unwrap();
            let c = data.full_taxonomy.class_index(leaf_level, name).unwrap();
            assert_eq!(s.features, data.centers[leaf_level][c]);
        }
    }

    #[test]
    fn split_invariants() {
        let data = generate(&toy_config()).unwrap();
        let t = &data.taxonomy;
        for s in data.split.coarse_in.iter().chain(&data.split.labeled).chain(&data.split.test) {
            let leaf = s.true_species.unwrap();
            assert_eq!(t.ancestor(leaf, s.label_level).unwrap(), s.label);
            assert!(s.features.iter().all(|v| v.is_finite()));
        }
        let attach = toy_config().attach_level();
        for s in &data.split.coarse_out {
            let Origin::OutOfClass { species } = &s.origin else { panic!("origin") };
            assert!(t.class_index(t.leaf_level(), species).is_none());
            let full = &data.full_taxonomy;
            let leaf = full.class_index(full.leaf_level(), species).unwrap();
            let anc = full.ancestor(leaf, attach).unwrap();
            assert_eq!(full.class_name(attach, anc).unwrap(), t.class_name(attach, s.label).unwrap());
        }
        assert!(!data.split.coarse_out.is_empty());
    }

    #[test]
    fn no_out_fraction_means_no_out_split() {
        let data = generate(&GenConfig { out_fraction: 0.0, ..toy_config() }).unwrap();
        assert!(data.split.coarse_out.is_empty());
        assert_eq!(data.full_taxonomy, data.taxonomy);
    }

    #[test]
    fn in_class_data_independent_of_out_config() {
        let a = generate(&toy_config()).unwrap();
        let b = generate(&GenConfig {
            out_fraction: 0.0,
            out_offset_multiplier: 3.0,
            ..toy_config()
        })
        .unwrap();
        assert_eq!(a.split.labeled, b.split.labeled);
        assert_eq!(a.split.coarse_in, b.split.coarse_in);
        assert_eq!(a.split.test, b.split.test);
    }

    #[test]
    fn config_validation_names_field() {
        let bad = GenConfig { sigmas: vec![1.0, 0.0, 1.0], ..toy_config() };
        assert!(matches!(generate(&bad), Err(Error::Config { field, .. }) if field == "gen.sigmas"));
        let bad = GenConfig { out_fraction: 1.0, ..toy_config() };
        assert!(matches!(generate(&bad), Err(Error::Config { field, .. }) if field == "gen.out_fraction"));
    }

    #[test]
    fn long_tail_skews_counts() {
        let data = generate(&GenConfig {
            long_tail_exponent: 1.0,
            coarse_in_per_species: 10,
            ..toy_config()
        })
        .unwrap();
        let mut per_species = vec![0usize; data.taxonomy.num_leaves()];
        for s in &data.split.coarse_in {
            per_species[s.true_species.unwrap()] += 1;
        }
        let max = *per_species.iter().max().unwrap();
        let min = *per_species.iter().min().unwrap();
        assert!(max > 2 * min, "{per_species:?}");
    }

    #[test]
    fn augmentations() {
        let x = vec![1.0, -2.0, 3.0];
        let mut r = rng::stream(5, 0);
        assert_eq!(augment_weak(&x, 0.0, &mut r), x);

        let params = AugConfig::default();
        let a = augment_strong(&x, &params, &mut rng::stream(5, 0));
        let b = augment_strong(&x, &params, &mut rng::stream(5, 0));
        assert_eq!(a, b);
        let w1 = augment_weak(&x, 0.1, &mut rng::stream(5, 0));
        let w2 = augment_weak(&x, 0.1, &mut rng::stream(5, 0));
        assert_eq!(w1, w2);

        let bad = AugConfig { drop_prob: 1.0, ..AugConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AugConfig { strong_sigma: 0.05, ..AugConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let data = generate(&toy_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.split.write_dir(dir.path(), &data.taxonomy).unwrap();
        let back = DataSplit::load_dir(dir.path(), &data.taxonomy).unwrap();
        assert_eq!(back, data.split);
        assert_eq!(
            back.fingerprint(&data.taxonomy).unwrap(),
            data.split.fingerprint(&data.taxonomy).unwrap()
        );
    }

    #[test]
    fn unknown_class_on_load() {
        let data = generate(&toy_config()).unwrap();
        let text = format!(
            "{}coarse_in\tPhylum\tPhylum9999\t-{}\n",
            dataset_header(2, &data.taxonomy),
            "\t0.5".repeat(2)
        );
        let mut split = DataSplit::default();
        let err = parse_dataset(&text, "mem", &data.taxonomy, &mut split).unwrap_err();
        assert!(matches!(err, Error::UnknownClass { .. }));

        let bad_header = "#not-a-dataset\n";
        let err = parse_dataset(bad_header, "mem", &data.taxonomy, &mut split).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_labeled_split_loads() {
        let data = generate(&GenConfig { labeled_per_species: 0, ..toy_config() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.split.write_dir(dir.path(), &data.taxonomy).unwrap();
        let back = DataSplit::load_dir(dir.path(), &data.taxonomy).unwrap();
        assert!(back.labeled.is_empty());
    }

    #[test]
    fn random_taxonomy_is_valid() {
        let mut r = rng::stream(3, 0);
        for _ in 0..20 {
            let t = random_taxonomy(4, 30, &mut r).unwrap();
            assert_eq!(t.num_leaves(), 30);
            let counts = t.class_counts();
            assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder(&[1, 1, 2], 8), vec![2, 2, 4]);
        assert_eq!(largest_remainder(&[1, 1, 1], 4).iter().sum::<usize>(), 4);
    }
}
