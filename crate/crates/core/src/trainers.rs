//! The six training regimes, each with or without coarse supervision.
//!
//! Every random consumer (initialization, batch order, each augmentation
//! view) draws from its own ChaCha stream keyed by `(seed, stage, purpose)`.
//! Two regimes that differ only in a term that switches off therefore see
//! identical draws for everything they share.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval;
use crate::filter::{self, FilterConfig, FilterOutcome};
use crate::losses::HierLossSpec;
use crate::model::{momentum_encoder_update, sgd_step, Architecture, Differentiable, Model, ModelSpec, Optimizer};
use crate::objective::{Batch, ContrastiveObjective, LossBreakdown, Objective, Unsupervised};
use crate::report::TraceRow;
use crate::rng::{self, Rng};
use crate::synthdata::{augment_strong, augment_weak, AugConfig, DataSplit, Sample};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    PseudoLabel,
    FixMatch,
    SelfTraining,
    Moco,
    MocoSelfTraining,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Baseline,
        Method::PseudoLabel,
        Method::FixMatch,
        Method::SelfTraining,
        Method::Moco,
        Method::MocoSelfTraining,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::PseudoLabel => "pseudo_label",
            Method::FixMatch => "fixmatch",
            Method::SelfTraining => "self_training",
            Method::Moco => "moco",
            Method::MocoSelfTraining => "moco_self_training",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::config("train.method", format!("unknown method {name:?}; valid methods: {}", valid.join(", ")))
        })
    }

    /// Labeled and coarse batch sizes used when none are configured.
    pub fn default_batch_sizes(self) -> (usize, usize) {
        match self {
            Method::FixMatch => (32, 160),
            _ => (30, 30),
        }
    }
}

/// Which coarsely labeled pool feeds the coarse batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoarseSource {
    In,
    InPlusOut,
    /// `In ∪ Out` after out-of-domain filtering.
    Filtered,
}

impl CoarseSource {
    pub const ALL: [CoarseSource; 3] = [CoarseSource::In, CoarseSource::InPlusOut, CoarseSource::Filtered];

    pub fn name(self) -> &'static str {
        match self {
            CoarseSource::In => "U_in",
            CoarseSource::InPlusOut => "U_in_plus_U_out",
            CoarseSource::Filtered => "filtered",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| {
            Error::config(
                "train.coarse_source",
                format!("unknown source {name:?}; valid: U_in, U_in_plus_U_out, filtered"),
            )
        })
    }
}

/// How the distillation student is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentInit {
    Fresh,
    Teacher,
}

impl StudentInit {
    pub fn name(self) -> &'static str {
        match self {
            StudentInit::Fresh => "fresh",
            StudentInit::Teacher => "teacher",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fresh" => Ok(StudentInit::Fresh),
            "teacher" => Ok(StudentInit::Teacher),
            _ => Err(Error::config("train.student_init", format!("{name:?} is not one of fresh, teacher"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    /// Confidence threshold for pseudo-labels. Values above 1 disable them.
    pub tau: f64,
    pub distill_temperature: f64,
    pub nce_temperature: f64,
    pub queue_size: usize,
    pub key_momentum: f64,
    pub unsup_weight: f64,
    pub embed_dim: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            tau: 0.8,
            distill_temperature: 2.0,
            nce_temperature: 0.1,
            queue_size: 2048,
            key_momentum: 0.99,
            unsup_weight: 1.0,
            embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub use_hier: bool,
    pub coarse_level: usize,
    pub coarse_source: CoarseSource,
    pub arch: Architecture,
    /// Labeled batch size.
    pub m: usize,
    /// Coarse batch size.
    pub n: usize,
    pub steps: usize,
    /// Contrastive pretraining steps (MoCo methods).
    pub pretrain_steps: usize,
    /// Teacher training steps (self-training methods).
    pub teacher_steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    /// Weak noise on every input of non-consistency methods.
    pub weak_aug_all: bool,
    pub student_init: StudentInit,
    /// Test accuracy is recorded every this many steps and at the last step.
    pub eval_every: usize,
    pub ssl: SslConfig,
    pub aug: AugConfig,
    pub filter: FilterConfig,
    /// Whether the model behind the out-of-domain filter uses coarse labels.
    pub filter_use_hier: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_method(Method::Baseline)
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        let (m, n) = method.default_batch_sizes();
        TrainConfig {
            method,
            use_hier: true,
            coarse_level: 1,
            coarse_source: CoarseSource::In,
            arch: Architecture::Mlp1 { hidden: 64 },
            m,
            n,
            steps: 3000,
            pretrain_steps: 1000,
            teacher_steps: 3000,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 3e-3,
            cosine: false,
            weak_aug_all: false,
            student_init: StudentInit::Fresh,
            eval_every: 100,
            ssl: SslConfig::default(),
            aug: AugConfig::default(),
            filter: FilterConfig::default(),
            filter_use_hier: true,
            seed: 0,
        }
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be >= 1"))
            } else {
                Ok(())
            }
        };
        positive("train.m", self.m)?;
        positive("train.n", self.n)?;
        positive("train.steps", self.steps)?;
        positive("train.eval_every", self.eval_every)?;
        if matches!(self.method, Method::SelfTraining | Method::MocoSelfTraining) {
            positive("train.teacher_steps", self.teacher_steps)?;
        }
        if matches!(self.method, Method::Moco | Method::MocoSelfTraining) {
            positive("train.pretrain_steps", self.pretrain_steps)?;
            positive("ssl.queue_size", self.ssl.queue_size)?;
            positive("ssl.embed_dim", self.ssl.embed_dim)?;
            if !matches!(self.arch, Architecture::Mlp1 { .. }) {
                return Err(Error::config("train.arch", "contrastive pretraining needs a hidden layer (mlp)"));
            }
        }
        if self.coarse_level >= taxonomy.num_levels() {
            return Err(Error::config(
                "train.coarse_level",
                format!("level {} out of range for a {}-level taxonomy", self.coarse_level, taxonomy.num_levels()),
            ));
        }
        let finite_nonneg = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be a finite nonnegative number, got {v}")))
            }
        };
        finite_nonneg("train.lr", self.learning_rate)?;
        finite_nonneg("train.momentum", self.momentum)?;
        finite_nonneg("train.weight_decay", self.weight_decay)?;
        finite_nonneg("ssl.unsup_weight", self.ssl.unsup_weight)?;
        if !(self.ssl.tau > 0.0) || self.ssl.tau.is_nan() {
            return Err(Error::config("ssl.tau", "must be > 0"));
        }
        for (field, t) in [
            ("ssl.distill_temperature", self.ssl.distill_temperature),
            ("ssl.nce_temperature", self.ssl.nce_temperature),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config(field, "must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.ssl.key_momentum) {
            return Err(Error::config("ssl.key_momentum", "must lie in [0, 1]"));
        }
        self.aug.validate()?;
        if self.coarse_source == CoarseSource::Filtered {
            self.filter.validate(taxonomy)?;
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO of unit-norm key embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("ssl.queue_size", "must be >= 1"));
        }
        Ok(NegativeQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a key, evicting the oldest when full.
    pub fn push(&mut self, key: Vec<f64>) -> Result<()> {
        if let Some(first) = self.entries.front() {
            if first.len() != key.len() {
                return Err(Error::DimensionMismatch {
                    what: "queued key",
                    expected: first.len(),
                    got: key.len(),
                });
            }
        }
        let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::config("queue", format!("keys must be unit-norm, got norm {norm}")));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(key);
        Ok(())
    }

    /// Entries oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    pub fn to_vec(&self) -> Vec<Vec<f64>> {
        self.entries.iter().cloned().collect()
    }
}

/// Uniform sampling without replacement within an epoch; a new permutation
/// starts whenever the current one runs out, so batches larger than the
/// pool wrap around.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(len: usize, rng: Rng, what: &str) -> Result<Self> {
        if len == 0 {
            return Err(Error::MissingSplit(format!("{what} is empty")));
        }
        let mut s = BatchSampler {
            order: (0..len).collect(),
            pos: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (k - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Endless stream of (labeled indices, coarse indices) batches.
#[derive(Debug, Clone)]
pub struct BatchStream {
    labeled: BatchSampler,
    coarse: BatchSampler,
    m: usize,
    n: usize,
}

impl Iterator for BatchStream {
    type Item = (Vec<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        Some((self.labeled.next_batch(self.m), self.coarse.next_batch(self.n)))
    }
}

/// Batches as drawn by the main training stage for `seed`.
pub fn make_batches(labeled: &[Sample], coarse: &[Sample], m: usize, n: usize, seed: u64) -> Result<BatchStream> {
    Ok(BatchStream {
        labeled: BatchSampler::new(labeled.len(), stage_rng(seed, STAGE_MAIN, P_LABELED), "labeled split")?,
        coarse: BatchSampler::new(coarse.len(), stage_rng(seed, STAGE_MAIN, P_COARSE), "coarse set")?,
        m,
        n,
    })
}

const STAGE_FILTER: u64 = 1;
const STAGE_MAIN: u64 = 2;
const STAGE_TEACHER: u64 = 3;
const STAGE_PRETRAIN: u64 = 4;

const P_INIT: u64 = 0;
const P_LABELED: u64 = 1;
const P_COARSE: u64 = 2;
const P_AUG_LABELED: u64 = 3;
const P_AUG_WEAK: u64 = 4;
const P_AUG_STRONG: u64 = 5;
const P_HEAD: u64 = 6;
const P_VIEW_Q: u64 = 7;
const P_VIEW_K: u64 = 8;

fn stage_rng(seed: u64, stage: u64, purpose: u64) -> Rng {
    rng::stream(seed, stage * 16 + purpose)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    /// Teacher of the distillation methods.
    pub teacher: Option<Model>,
    pub filter: Option<FilterOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum View {
    Clean,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CoarseView {
    Plain(View),
    /// Weak views make targets; strong views are trained.
    WeakStrong,
}

struct Stage<'a> {
    name: &'static str,
    id: u64,
    objective: Objective,
    labeled: &'a [Sample],
    coarse: &'a [Sample],
    coarse_labels: &'a [usize],
    steps: usize,
    labeled_view: View,
    coarse_view: CoarseView,
    teacher: Option<&'a Model>,
    select_on_validation: bool,
}

struct Env<'a> {
    config: &'a TrainConfig,
    taxonomy: &'a Taxonomy,
    test: &'a [Sample],
    validation: &'a [Sample],
}

fn learning_rate(config: &TrainConfig, step: usize, steps: usize) -> f64 {
    if config.cosine {
        config.learning_rate * 0.5 * (1.0 + (PI * step as f64 / steps as f64).cos())
    } else {
        config.learning_rate
    }
}

fn view(x: &[f64], v: View, aug: &AugConfig, rng: &mut Rng) -> Vec<f64> {
    match v {
        View::Clean => x.to_vec(),
        View::Weak => augment_weak(x, aug.weak_sigma, rng),
    }
}

fn is_eval_step(step: usize, steps: usize, every: usize) -> bool {
    step.is_multiple_of(every) || step == steps
}

fn trace_row(stage: &str, step: usize, b: &LossBreakdown, test_acc: Option<f64>) -> TraceRow {
    TraceRow {
        stage: stage.to_string(),
        step,
        total: b.total(),
        supervised: b.supervised,
        coarse: b.coarse,
        unsupervised: b.unsupervised,
        mask_rate: b.mask_rate,
        test_acc,
    }
}

fn maybe_test_acc(env: &Env, model: &Model) -> Result<Option<f64>> {
    if env.test.is_empty() {
        return Ok(None);
    }
    eval::top1(model, env.taxonomy, env.test).map(Some)
}

fn run_stage(mut model: Model, stage: &Stage, env: &Env, trace: &mut Vec<TraceRow>) -> Result<Model> {
    let cfg = env.config;
    let seed = cfg.seed;
    let mut labeled_sampler = BatchSampler::new(stage.labeled.len(), stage_rng(seed, stage.id, P_LABELED), "labeled split")?;
    let needs_coarse = stage.objective.needs_coarse();
    let mut coarse_sampler = if needs_coarse {
        Some(BatchSampler::new(
            stage.coarse.len(),
            stage_rng(seed, stage.id, P_COARSE),
            "coarse set (check train.coarse_source and filter settings)",
        )?)
    } else {
        None
    };
    if stage.select_on_validation && env.validation.is_empty() {
        return Err(Error::MissingSplit("validation split is empty; the teacher is selected on it".into()));
    }
    let mut aug_labeled = stage_rng(seed, stage.id, P_AUG_LABELED);
    let mut aug_weak = stage_rng(seed, stage.id, P_AUG_WEAK);
    let mut aug_strong = stage_rng(seed, stage.id, P_AUG_STRONG);
    let mut optimizer = Optimizer::new(&model, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut best: Option<(f64, Model)> = None;

    for step in 1..=stage.steps {
        optimizer.learning_rate = learning_rate(cfg, step - 1, stage.steps);
        let mut batch = Batch::default();
        for i in labeled_sampler.next_batch(cfg.m) {
            let s = &stage.labeled[i];
            batch.labeled.push(view(&s.features, stage.labeled_view, &cfg.aug, &mut aug_labeled));
            batch.labels.push(s.label);
        }
        if let Some(sampler) = coarse_sampler.as_mut() {
            for j in sampler.next_batch(cfg.n) {
                let x = &stage.coarse[j].features;
                match stage.coarse_view {
                    CoarseView::Plain(v) => batch.coarse.push(view(x, v, &cfg.aug, &mut aug_weak)),
                    CoarseView::WeakStrong => {
                        batch.coarse_weak.push(augment_weak(x, cfg.aug.weak_sigma, &mut aug_weak));
                        batch.coarse.push(augment_strong(x, &cfg.aug, &mut aug_strong));
                    }
                }
                batch.coarse_labels.push(stage.coarse_labels[j]);
            }
            if let Some(teacher) = stage.teacher {
                batch.teacher_logits = batch
                    .coarse
                    .iter()
                    .map(|x| Ok(teacher.forward(x)?.logits))
                    .collect::<Result<_>>()?;
            }
        }

        let bound = stage.objective.bind(&model, &batch)?;
        let (breakdown, grads) = bound.evaluate_with_gradient(&model)?;
        sgd_step(&mut model, &mut optimizer, &grads, step)?;

        let eval_now = is_eval_step(step, stage.steps, cfg.eval_every);
        let test_acc = if eval_now { maybe_test_acc(env, &model)? } else { None };
        trace.push(trace_row(stage.name, step, &breakdown, test_acc));
        if eval_now && stage.select_on_validation {
            let acc = eval::top1(&model, env.taxonomy, env.validation)?;
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
            }
        }
    }
    Ok(match best {
        Some((_, m)) => m,
        None => model,
    })
}

#[allow(clippy::too_many_arguments)]
fn main_stage<'a>(
    objective: Objective,
    data: &'a DataSplit,
    pool: &'a [Sample],
    coarse_labels: &'a [usize],
    steps: usize,
    labeled_view: View,
    coarse_view: CoarseView,
    teacher: Option<&'a Model>,
) -> Stage<'a> {
    Stage {
        name: "main",
        id: STAGE_MAIN,
        objective,
        labeled: &data.labeled,
        coarse: pool,
        coarse_labels,
        steps,
        labeled_view,
        coarse_view,
        teacher,
        select_on_validation: false,
    }
}

fn leaf_labels_ok(samples: &[Sample], taxonomy: &Taxonomy) -> Result<()> {
    match samples.iter().find(|s| s.label_level != taxonomy.leaf_level()) {
        Some(_) => Err(Error::config("data", "labeled samples must carry leaf labels")),
        None => Ok(()),
    }
}

/// Provided labels lifted to `level`.
pub fn coarse_targets(samples: &[Sample], taxonomy: &Taxonomy, level: usize) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            if s.label_level < level {
                return Err(Error::LevelOrder {
                    fine: s.label_level,
                    coarse: level,
                });
            }
            taxonomy.class_ancestor(s.label_level, s.label, level)
        })
        .collect()
}

fn fresh_model(config: &TrainConfig, dim: usize, taxonomy: &Taxonomy, stage: u64) -> Result<Model> {
    let spec = ModelSpec {
        arch: config.arch,
        input_dim: dim,
        num_classes: taxonomy.num_leaves(),
        embed_dim: None,
    };
    Model::new(spec, &mut stage_rng(config.seed, stage, P_INIT))
}

fn data_dim(data: &DataSplit) -> Result<usize> {
    let dim = data
        .labeled
        .first()
        .map(|s| s.features.len())
        .unwrap_or(data.dim);
    if dim == 0 {
        return Err(Error::MissingSplit("labeled split is empty".into()));
    }
    Ok(dim)
}

fn objective(config: &TrainConfig, taxonomy: &Taxonomy, use_hier: bool, unsupervised: Unsupervised) -> Result<Objective> {
    Ok(Objective {
        hier: HierLossSpec::species(taxonomy, config.coarse_level)?,
        use_coarse_labels: use_hier,
        unsupervised,
        unsup_weight: config.ssl.unsup_weight,
    })
}

/// Trains according to `config.method`.
pub fn train(config: &TrainConfig, data: &DataSplit, taxonomy: &Taxonomy) -> Result<TrainOutcome> {
    config.validate(taxonomy)?;
    if data.labeled.is_empty() {
        return Err(Error::MissingSplit("labeled split is empty".into()));
    }
    leaf_labels_ok(&data.labeled, taxonomy)?;
    let dim = data_dim(data)?;
    let env = Env {
        config,
        taxonomy,
        test: &data.test,
        validation: &data.validation,
    };
    let mut trace = Vec::new();

    let mut filter_outcome = None;
    let pool: Vec<Sample> = match config.coarse_source {
        CoarseSource::In => data.coarse_in.clone(),
        CoarseSource::InPlusOut => data.coarse_in.iter().chain(&data.coarse_out).cloned().collect(),
        CoarseSource::Filtered => {
            let outcome = run_filter(config, data, taxonomy, &mut trace)?;
            let kept = outcome.kept.clone();
            filter_outcome = Some(outcome);
            kept
        }
    };
    let uses_coarse_labels = config.use_hier;
    let coarse_labels = if uses_coarse_labels {
        coarse_targets(&pool, taxonomy, config.coarse_level)?
    } else {
        vec![0; pool.len()]
    };

    let labeled_view = if config.weak_aug_all { View::Weak } else { View::Clean };
    let plain = CoarseView::Plain(labeled_view);
    let main = |objective, labeled_view, coarse_view, teacher| {
        main_stage(objective, data, &pool, &coarse_labels, config.steps, labeled_view, coarse_view, teacher)
    };
    let supervised = objective(config, taxonomy, config.use_hier, Unsupervised::None)?;
    let teacher_stage = |objective: Objective| Stage {
        name: "teacher",
        id: STAGE_TEACHER,
        objective,
        labeled: &data.labeled,
        coarse: &pool,
        coarse_labels: &coarse_labels,
        steps: config.teacher_steps,
        labeled_view,
        coarse_view: plain,
        teacher: None,
        select_on_validation: true,
    };
    let distill = Unsupervised::Distill {
        temperature: config.ssl.distill_temperature,
    };

    let (model, teacher) = match config.method {
        Method::Baseline => {
            let init = fresh_model(config, dim, taxonomy, STAGE_MAIN)?;
            (run_stage(init, &main(supervised, labeled_view, plain, None), &env, &mut trace)?, None)
        }
        Method::PseudoLabel => {
            let obj = objective(config, taxonomy, config.use_hier, Unsupervised::PseudoLabel { tau: config.ssl.tau })?;
            let init = fresh_model(config, dim, taxonomy, STAGE_MAIN)?;
            (run_stage(init, &main(obj, labeled_view, plain, None), &env, &mut trace)?, None)
        }
        Method::FixMatch => {
            let obj = objective(config, taxonomy, config.use_hier, Unsupervised::Consistency { tau: config.ssl.tau })?;
            let init = fresh_model(config, dim, taxonomy, STAGE_MAIN)?;
            (run_stage(init, &main(obj, View::Weak, CoarseView::WeakStrong, None), &env, &mut trace)?, None)
        }
        Method::SelfTraining => {
            let teacher_obj = objective(config, taxonomy, false, Unsupervised::None)?;
            let init = fresh_model(config, dim, taxonomy, STAGE_TEACHER)?;
            let teacher = run_stage(init, &teacher_stage(teacher_obj), &env, &mut trace)?;
            let student_init = match config.student_init {
                StudentInit::Fresh => fresh_model(config, dim, taxonomy, STAGE_MAIN)?,
                StudentInit::Teacher => teacher.clone(),
            };
            let obj = objective(config, taxonomy, config.use_hier, distill)?;
            let student = run_stage(student_init, &main(obj, labeled_view, plain, Some(&teacher)), &env, &mut trace)?;
            (student, Some(teacher))
        }
        Method::Moco => {
            let base = fresh_model(config, dim, taxonomy, STAGE_MAIN)?;
            let pretrained = pretrain(base, data, &pool, config, &mut trace)?;
            let init = pretrained.with_fresh_classifier(&mut stage_rng(config.seed, STAGE_MAIN, P_HEAD));
            (run_stage(init, &main(supervised, labeled_view, plain, None), &env, &mut trace)?, None)
        }
        Method::MocoSelfTraining => {
            let base = fresh_model(config, dim, taxonomy, STAGE_MAIN)?;
            let pretrained = pretrain(base, data, &pool, config, &mut trace)?;
            let teacher_init = pretrained.with_fresh_classifier(&mut stage_rng(config.seed, STAGE_TEACHER, P_HEAD));
            let teacher_obj = objective(config, taxonomy, false, Unsupervised::None)?;
            let teacher = run_stage(teacher_init, &teacher_stage(teacher_obj), &env, &mut trace)?;
            let student_init = match config.student_init {
                StudentInit::Fresh => pretrained.with_fresh_classifier(&mut stage_rng(config.seed, STAGE_MAIN, P_HEAD)),
                StudentInit::Teacher => teacher.clone(),
            };
            let obj = objective(config, taxonomy, config.use_hier, distill)?;
            let student = run_stage(student_init, &main(obj, labeled_view, plain, Some(&teacher)), &env, &mut trace)?;
            (student, Some(teacher))
        }
    };
    Ok(TrainOutcome {
        model,
        trace,
        teacher,
        filter: filter_outcome,
    })
}

/// Supervised training (with coarse labels if `config.use_hier`) starting
/// from `init` instead of a fresh model. Uses the main stage's streams.
pub fn train_supervised_from(init: Model, config: &TrainConfig, data: &DataSplit, taxonomy: &Taxonomy) -> Result<TrainOutcome> {
    config.validate(taxonomy)?;
    leaf_labels_ok(&data.labeled, taxonomy)?;
    let pool: Vec<Sample> = match config.coarse_source {
        CoarseSource::In => data.coarse_in.clone(),
        _ => data.coarse_in.iter().chain(&data.coarse_out).cloned().collect(),
    };
    let coarse_labels = if config.use_hier {
        coarse_targets(&pool, taxonomy, config.coarse_level)?
    } else {
        vec![0; pool.len()]
    };
    let env = Env {
        config,
        taxonomy,
        test: &data.test,
        validation: &data.validation,
    };
    let labeled_view = if config.weak_aug_all { View::Weak } else { View::Clean };
    let stage = Stage {
        name: "main",
        id: STAGE_MAIN,
        objective: objective(config, taxonomy, config.use_hier, Unsupervised::None)?,
        labeled: &data.labeled,
        coarse: &pool,
        coarse_labels: &coarse_labels,
        steps: config.steps,
        labeled_view,
        coarse_view: CoarseView::Plain(labeled_view),
        teacher: None,
        select_on_validation: false,
    };
    let mut trace = Vec::new();
    let model = run_stage(init, &stage, &env, &mut trace)?;
    Ok(TrainOutcome {
        model,
        trace,
        teacher: None,
        filter: None,
    })
}

/// Trains the filter model on `U_in ∪ U_out` and filters that pool.
fn run_filter(config: &TrainConfig, data: &DataSplit, taxonomy: &Taxonomy, trace: &mut Vec<TraceRow>) -> Result<FilterOutcome> {
    let model = train_filter_model(config, data, taxonomy, trace)?;
    let (_, outcome) = filter::filtered_source(data, &model, taxonomy, &config.filter)?;
    Ok(outcome)
}

/// The frozen baseline behind the out-of-domain filter.
pub fn train_filter_model(
    config: &TrainConfig,
    data: &DataSplit,
    taxonomy: &Taxonomy,
    trace: &mut Vec<TraceRow>,
) -> Result<Model> {
    let dim = data_dim(data)?;
    let pool: Vec<Sample> = data.coarse_in.iter().chain(&data.coarse_out).cloned().collect();
    let use_hier = config.filter_use_hier;
    let coarse_labels = if use_hier {
        coarse_targets(&pool, taxonomy, config.coarse_level)?
    } else {
        vec![0; pool.len()]
    };
    let env = Env {
        config,
        taxonomy,
        test: &data.test,
        validation: &data.validation,
    };
    let labeled_view = if config.weak_aug_all { View::Weak } else { View::Clean };
    let stage = Stage {
        name: "filter",
        id: STAGE_FILTER,
        objective: objective(config, taxonomy, use_hier, Unsupervised::None)?,
        labeled: &data.labeled,
        coarse: &pool,
        coarse_labels: &coarse_labels,
        steps: config.steps,
        labeled_view,
        coarse_view: CoarseView::Plain(labeled_view),
        teacher: None,
        select_on_validation: false,
    };
    let init = fresh_model(config, dim, taxonomy, STAGE_FILTER)?;
    run_stage(init, &stage, &env, trace)
}

/// Contrastive pretraining of the representation on labeled, coarse and
/// validation features. Returns the query encoder with its projection head.
fn pretrain(base: Model, data: &DataSplit, pool: &[Sample], config: &TrainConfig, trace: &mut Vec<TraceRow>) -> Result<Model> {
    let seed = config.seed;
    let features: Vec<&[f64]> = data
        .labeled
        .iter()
        .chain(pool)
        .chain(&data.validation)
        .map(|s| s.features.as_slice())
        .collect();
    let mut query = base.with_projection(config.ssl.embed_dim, &mut stage_rng(seed, STAGE_PRETRAIN, P_HEAD));
    let mut key = query.clone();
    let mut queue = NegativeQueue::new(config.ssl.queue_size)?;
    let mut sampler = BatchSampler::new(features.len(), stage_rng(seed, STAGE_PRETRAIN, P_COARSE), "pretraining pool")?;
    let mut view_q = stage_rng(seed, STAGE_PRETRAIN, P_VIEW_Q);
    let mut view_k = stage_rng(seed, STAGE_PRETRAIN, P_VIEW_K);
    let mut optimizer = Optimizer::new(&query, config.learning_rate, config.momentum, config.weight_decay);
    let b = config.m + config.n;

    for step in 1..=config.pretrain_steps {
        optimizer.learning_rate = learning_rate(config, step - 1, config.pretrain_steps);
        let idx = sampler.next_batch(b);
        let queries: Vec<Vec<f64>> = idx.iter().map(|&i| augment_strong(features[i], &config.aug, &mut view_q)).collect();
        let key_views: Vec<Vec<f64>> = idx.iter().map(|&i| augment_strong(features[i], &config.aug, &mut view_k)).collect();
        let keys = key_views
            .par_iter()
            .map(|x| Ok(key.embed(x)?.embedding))
            .collect::<Result<Vec<_>>>()?;
        let mut breakdown = LossBreakdown::default();
        if !queue.is_empty() {
            let negatives = queue.to_vec();
            let objective = ContrastiveObjective {
                queries: &queries,
                keys: &keys,
                negatives: &negatives,
                temperature: config.ssl.nce_temperature,
            };
            let (loss, grads) = objective.gradient(&query)?;
            sgd_step(&mut query, &mut optimizer, &grads, step)?;
            momentum_encoder_update(&mut key, &query, config.ssl.key_momentum)?;
            breakdown.unsupervised = loss;
        }
        for k in keys {
            queue.push(k)?;
        }
        trace.push(trace_row("pretrain", step, &breakdown, None));
    }
    Ok(query)
}

/// One row of a supervision-level sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub level: usize,
    pub level_name: String,
    pub num_classes: usize,
    pub top1: f64,
}

/// Trains once per level with coarse supervision at that level. Cells run in
/// parallel; each is deterministic.
pub fn sweep_supervision_levels(
    base: &TrainConfig,
    levels: &[usize],
    data: &DataSplit,
    taxonomy: &Taxonomy,
) -> Result<Vec<LevelResult>> {
    levels
        .par_iter()
        .map(|&level| {
            let config = TrainConfig {
                use_hier: true,
                coarse_level: level,
                ..base.clone()
            };
            let outcome = train(&config, data, taxonomy)?;
            Ok(LevelResult {
                level,
                level_name: taxonomy.level_name(level)?.to_string(),
                num_classes: taxonomy.num_classes(level)?,
                top1: eval::top1(&outcome.model, taxonomy, &data.test)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        let err = Method::parse("mixmatch").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("fixmatch") && msg.contains("moco_self_training"), "{msg}");
        for s in CoarseSource::ALL {
            assert_eq!(CoarseSource::parse(s.name()).unwrap(), s);
        }
    }

    #[test]
    fn batch_defaults() {
        assert_eq!(TrainConfig::for_method(Method::Baseline).m, 30);
        assert_eq!(TrainConfig::for_method(Method::Baseline).n, 30);
        let f = TrainConfig::for_method(Method::FixMatch);
        assert_eq!((f.m, f.n), (32, 160));
    }

    #[test]
    fn sampler_epochs_are_permutations() {
        let mut s = BatchSampler::new(7, rng::stream(1, 1), "x").unwrap();
        let batch = s.next_batch(21);
        for epoch in batch.chunks(7) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..7).collect::<Vec<_>>());
        }
        assert!(matches!(BatchSampler::new(0, rng::stream(1, 1), "x"), Err(Error::MissingSplit(_))));
    }

    #[test]
    fn queue_fifo() {
        let mut q = NegativeQueue::new(3).unwrap();
        let unit = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i % 4] = 1.0;
            v
        };
        for i in 0..5 {
            q.push(unit(i)).unwrap();
            assert_eq!(q.len(), (i + 1).min(3));
        }
        let order: Vec<Vec<f64>> = q.iter().cloned().collect();
        assert_eq!(order, vec![unit(2), unit(3), unit(4)]);
        assert!(q.push(vec![2.0, 0.0, 0.0, 0.0]).is_err());
        assert!(q.push(vec![1.0, 0.0]).is_err());
        assert!(NegativeQueue::new(0).is_err());
    }
}
