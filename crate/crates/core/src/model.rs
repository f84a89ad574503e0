//! Leaf-level softmax classifiers with hand-derived gradients.
//!
//! A model maps features to a representation (the input itself for
//! [`Architecture::Linear`], a ramp-activated hidden layer for
//! [`Architecture::Mlp1`]), then to logits over the leaves. An optional
//! projection head maps the representation to a unit-norm embedding for
//! contrastive pretraining.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::rng::{self, Rng};
use crate::synthdata::hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    Mlp1 { hidden: usize },
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::Mlp1 { .. } => "mlp1",
        }
    }

    pub fn hidden_dim(self) -> usize {
        match self {
            Architecture::Linear => 0,
            Architecture::Mlp1 { hidden } => hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub embed_dim: Option<usize>,
}

impl ModelSpec {
    pub fn representation_dim(&self) -> usize {
        match self.arch {
            Architecture::Linear => self.input_dim,
            Architecture::Mlp1 { hidden } => hidden,
        }
    }
}

/// Fully connected layer, `out = weight * in + bias`, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    /// Gaussian weights scaled by `cols^(-1/2)`, zero bias.
    pub fn init(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        Self {
            rows,
            cols,
            weight: (0..rows * cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            bias: vec![0.0; rows],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
            .collect()
    }

    /// Accumulates `d out` into this layer's gradient and returns `d in`.
    fn backward(&self, input: &[f64], dout: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut din = vec![0.0; self.cols];
        for (r, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[r] += g;
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            let grow = &mut grad.weight[r * self.cols..(r + 1) * self.cols];
            for ((gw, &x), (&w, d)) in grow.iter_mut().zip(input).zip(row.iter().zip(din.iter_mut())) {
                *gw += g * x;
                *d += g * w;
            }
        }
        din
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Parameter set of a model. Gradients and optimizer velocities share the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub hidden: Option<Dense>,
    pub classifier: Dense,
    pub projection: Option<Dense>,
}

pub type Gradients = Params;

impl Params {
    pub fn zeros_like(other: &Params) -> Self {
        let z = |d: &Dense| Dense::zeros(d.rows, d.cols);
        Self {
            hidden: other.hidden.as_ref().map(z),
            classifier: z(&other.classifier),
            projection: other.projection.as_ref().map(z),
        }
    }

    pub fn layers(&self) -> Vec<(&'static str, &Dense)> {
        let mut out = Vec::with_capacity(3);
        if let Some(h) = &self.hidden {
            out.push(("hidden", h));
        }
        out.push(("classifier", &self.classifier));
        if let Some(p) = &self.projection {
            out.push(("projection", p));
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut Dense)> {
        let mut out = Vec::with_capacity(3);
        if let Some(h) = &mut self.hidden {
            out.push(("hidden", h));
        }
        out.push(("classifier", &mut self.classifier));
        if let Some(p) = &mut self.projection {
            out.push(("projection", p));
        }
        out
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        let a = self.layers();
        let b = other.layers();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, da), (nb, db))| na == nb && da.same_shape(db))
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(_, d)| d.len()).sum()
    }

    /// Flat view: layer by layer, weights then biases.
    pub fn get(&self, mut i: usize) -> f64 {
        for (_, d) in self.layers() {
            if i < d.weight.len() {
                return d.weight[i];
            }
            i -= d.weight.len();
            if i < d.bias.len() {
                return d.bias[i];
            }
            i -= d.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut i: usize, value: f64) {
        for (_, d) in self.layers_mut() {
            if i < d.weight.len() {
                d.weight[i] = value;
                return;
            }
            i -= d.weight.len();
            if i < d.bias.len() {
                d.bias[i] = value;
                return;
            }
            i -= d.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|(_, d)| d.weight.iter().chain(&d.bias).all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.layers_mut().into_iter().zip(other.layers()) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }
}

/// Logits and probabilities over the leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Activations {
    pub input: Vec<f64>,
    pub hidden_pre: Option<Vec<f64>>,
    pub representation: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingActivations {
    pub input: Vec<f64>,
    pub hidden_pre: Option<Vec<f64>>,
    pub representation: Vec<f64>,
    pub raw: Vec<f64>,
    pub norm: f64,
    /// Unit-norm embedding.
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Params,
}

fn ramp(v: f64) -> f64 {
    v.max(0.0)
}

impl Model {
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        if spec.input_dim == 0 || spec.num_classes == 0 {
            return Err(Error::config("model", "input and class dimensions must be >= 1"));
        }
        if spec.arch.hidden_dim() == 0 && matches!(spec.arch, Architecture::Mlp1 { .. }) {
            return Err(Error::config("train.hidden", "hidden width must be >= 1"));
        }
        if spec.embed_dim == Some(0) {
            return Err(Error::config("ssl.embed_dim", "must be >= 1"));
        }
        let hidden = match spec.arch {
            Architecture::Linear => None,
            Architecture::Mlp1 { hidden } => Some(Dense::init(hidden, spec.input_dim, rng)),
        };
        let rep = spec.representation_dim();
        let classifier = Dense::init(spec.num_classes, rep, rng);
        let projection = spec.embed_dim.map(|e| Dense::init(e, rep, rng));
        Ok(Self {
            spec,
            params: Params {
                hidden,
                classifier,
                projection,
            },
        })
    }

    pub fn from_params(spec: ModelSpec, params: Params) -> Result<Self> {
        let rep = spec.representation_dim();
        let ok_hidden = match (spec.arch, &params.hidden) {
            (Architecture::Linear, None) => true,
            (Architecture::Mlp1 { hidden }, Some(h)) => h.rows == hidden && h.cols == spec.input_dim,
            _ => false,
        };
        let ok_classifier = params.classifier.rows == spec.num_classes && params.classifier.cols == rep;
        let ok_projection = match (spec.embed_dim, &params.projection) {
            (None, None) => true,
            (Some(e), Some(p)) => p.rows == e && p.cols == rep,
            _ => false,
        };
        if !(ok_hidden && ok_classifier && ok_projection) {
            return Err(Error::ArchitectureMismatch(
                "parameter shapes do not match the model description".into(),
            ));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn represent(&self, x: &[f64]) -> (Option<Vec<f64>>, Vec<f64>) {
        match &self.params.hidden {
            None => (None, x.to_vec()),
            Some(h) => {
                let pre = h.apply(x);
                let rep = pre.iter().map(|&v| ramp(v)).collect();
                (Some(pre), rep)
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        let acts = self.activations(x)?;
        Ok(Prediction {
            logits: acts.logits,
            probs: acts.probs,
        })
    }

    pub fn activations(&self, x: &[f64]) -> Result<Activations> {
        self.check_input(x)?;
        let (hidden_pre, representation) = self.represent(x);
        let logits = self.params.classifier.apply(&representation);
        let probs = softmax(&logits);
        Ok(Activations {
            input: x.to_vec(),
            hidden_pre,
            representation,
            logits,
            probs,
        })
    }

    pub fn representation(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.represent(x).1)
    }

    pub fn embed(&self, x: &[f64]) -> Result<EmbeddingActivations> {
        self.check_input(x)?;
        let projection = self
            .params
            .projection
            .as_ref()
            .ok_or_else(|| Error::ArchitectureMismatch("model has no projection head".into()))?;
        let (hidden_pre, representation) = self.represent(x);
        let raw = projection.apply(&representation);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let embedding = raw.iter().map(|v| v / norm).collect();
        Ok(EmbeddingActivations {
            input: x.to_vec(),
            hidden_pre,
            representation,
            raw,
            norm,
            embedding,
        })
    }

    fn backward_representation(&self, input: &[f64], hidden_pre: Option<&Vec<f64>>, drep: &[f64], grads: &mut Gradients) {
        if let (Some(h), Some(pre), Some(gh)) = (&self.params.hidden, hidden_pre, grads.hidden.as_mut()) {
            let dpre: Vec<f64> = drep
                .iter()
                .zip(pre)
                .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
                .collect();
            h.backward(input, &dpre, gh);
        }
    }

    /// Backpropagates a logit gradient, accumulating into `grads`.
    pub fn backward_logits(&self, acts: &Activations, dlogits: &[f64], grads: &mut Gradients) {
        let drep = self
            .params
            .classifier
            .backward(&acts.representation, dlogits, &mut grads.classifier);
        self.backward_representation(&acts.input, acts.hidden_pre.as_ref(), &drep, grads);
    }

    /// Backpropagates a gradient on the unit-norm embedding.
    pub fn backward_embedding(&self, acts: &EmbeddingActivations, dembedding: &[f64], grads: &mut Gradients) {
        let (Some(projection), Some(gp)) = (&self.params.projection, grads.projection.as_mut()) else {
            return;
        };
        let along: f64 = dembedding.iter().zip(&acts.embedding).map(|(g, e)| g * e).sum();
        let draw: Vec<f64> = dembedding
            .iter()
            .zip(&acts.embedding)
            .map(|(g, e)| (g - along * e) / acts.norm)
            .collect();
        let drep = projection.backward(&acts.representation, &draw, gp);
        self.backward_representation(&acts.input, acts.hidden_pre.as_ref(), &drep, grads);
    }

    pub fn zero_gradients(&self) -> Gradients {
        Params::zeros_like(&self.params)
    }

    /// Copy with the projection head dropped and a freshly initialized classifier.
    pub fn with_fresh_classifier(&self, rng: &mut Rng) -> Model {
        let rep = self.spec.representation_dim();
        Model {
            spec: ModelSpec {
                embed_dim: None,
                ..self.spec
            },
            params: Params {
                hidden: self.params.hidden.clone(),
                classifier: Dense::init(self.spec.num_classes, rep, rng),
                projection: None,
            },
        }
    }

    /// Copy with a freshly initialized projection head of width `embed_dim`.
    pub fn with_projection(&self, embed_dim: usize, rng: &mut Rng) -> Model {
        let rep = self.spec.representation_dim();
        Model {
            spec: ModelSpec {
                embed_dim: Some(embed_dim),
                ..self.spec
            },
            params: Params {
                hidden: self.params.hidden.clone(),
                classifier: self.params.classifier.clone(),
                projection: Some(Dense::init(embed_dim, rep, rng)),
            },
        }
    }

    /// SHA-256 over the representation layer's parameters (empty input for linear models).
    pub fn representation_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        if let Some(h) = &self.params.hidden {
            for v in h.weight.iter().chain(&h.bias) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

/// SGD with momentum and decoupled-from-bias weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients,
}

impl Optimizer {
    pub fn new(model: &Model, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: model.zero_gradients(),
        }
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }
}

/// `v <- momentum * v + g + weight_decay * w` (weights only), then `theta <- theta - lr * v`.
pub fn sgd_step(model: &mut Model, optimizer: &mut Optimizer, grads: &Gradients, step: usize) -> Result<()> {
    if !grads.same_layout(&model.params) || !optimizer.velocity.same_layout(&model.params) {
        return Err(Error::ArchitectureMismatch("gradient layout differs from the model".into()));
    }
    for (name, g) in grads.layers() {
        if !g.weight.iter().chain(&g.bias).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                layer: name.to_string(),
                step,
            });
        }
    }
    let (lr, mu, wd) = (optimizer.learning_rate, optimizer.momentum, optimizer.weight_decay);
    let velocity = optimizer.velocity.layers_mut();
    let params = model.params.layers_mut();
    for (((_, v), (_, p)), (_, g)) in velocity.into_iter().zip(params).zip(grads.layers()) {
        for ((vw, w), gw) in v.weight.iter_mut().zip(p.weight.iter_mut()).zip(&g.weight) {
            *vw = mu * *vw + gw + wd * *w;
            *w -= lr * *vw;
        }
        for ((vb, b), gb) in v.bias.iter_mut().zip(p.bias.iter_mut()).zip(&g.bias) {
            *vb = mu * *vb + gb;
            *b -= lr * *vb;
        }
    }
    Ok(())
}

/// `theta_k <- m * theta_k + (1 - m) * theta_q` for every parameter.
pub fn momentum_encoder_update(key: &mut Model, query: &Model, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::config("ssl.m_mom", "must lie in [0, 1]"));
    }
    if key.spec != query.spec || !key.params.same_layout(&query.params) {
        return Err(Error::ArchitectureMismatch("key and query encoders differ".into()));
    }
    for ((_, k), (_, q)) in key.params.layers_mut().into_iter().zip(query.params.layers()) {
        for (a, b) in k.weight.iter_mut().zip(&q.weight).chain(k.bias.iter_mut().zip(&q.bias)) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
    Ok(())
}

/// A scalar loss of the model parameters with its analytic gradient.
pub trait Differentiable {
    fn loss(&self, model: &Model) -> Result<f64>;
    fn gradient(&self, model: &Model) -> Result<(f64, Gradients)>;
}

pub const MIN_CHECKED_COORDS: usize = 200;

/// Largest relative error `|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)` between
/// analytic and central-difference gradients over a random sample of at least
/// [`MIN_CHECKED_COORDS`] coordinates (all of them for smaller models).
pub fn grad_check(model: &Model, objective: &dyn Differentiable, epsilon: f64, seed: u64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::config("epsilon", "must lie in [1e-6, 1e-3]"));
    }
    let (_, analytic) = objective.gradient(model)?;
    let total = model.params.num_params();
    let mut rng = rng::stream(seed, 0x9c);
    let coords: Vec<usize> = if total <= MIN_CHECKED_COORDS {
        (0..total).collect()
    } else {
        let mut c = index::sample(&mut rng, total, MIN_CHECKED_COORDS).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let original = probe.params.get(i);
        probe.params.set(i, original + epsilon);
        let up = objective.loss(&probe)?;
        probe.params.set(i, original - epsilon);
        let down = objective.loss(&probe)?;
        probe.params.set(i, original);
        let fd = (up - down) / (2.0 * epsilon);
        let ga = analytic.get(i);
        let denom = ga.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((ga - fd).abs() / denom);
    }
    Ok(worst)
}

/// A model plus the bookkeeping stored beside it on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub step: usize,
    /// Hash of the config that produced the model; empty when unknown.
    pub config_hash: String,
}

const CHECKPOINT_MAGIC: &str = "#hierssl-checkpoint v1";

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let spec = &self.model.spec;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "arch\t{}", spec.arch.name());
        let _ = writeln!(out, "input_dim\t{}", spec.input_dim);
        let _ = writeln!(out, "hidden_dim\t{}", spec.arch.hidden_dim());
        let _ = writeln!(out, "num_classes\t{}", spec.num_classes);
        let _ = writeln!(out, "embed_dim\t{}", spec.embed_dim.unwrap_or(0));
        let _ = writeln!(out, "seed\t{}", self.seed);
        let _ = writeln!(out, "step\t{}", self.step);
        let hash = if self.config_hash.is_empty() { "-" } else { &self.config_hash };
        let _ = writeln!(out, "config_hash\t{hash}");
        for (name, d) in self.model.params.layers() {
            let _ = writeln!(out, "layer\t{name}\t{}\t{}", d.rows, d.cols);
            for row in d.weight.chunks_exact(d.cols) {
                out.push('w');
                for v in row {
                    let _ = write!(out, "\t{v}");
                }
                out.push('\n');
            }
            out.push('b');
            for v in &d.bias {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let perr = |line: usize, msg: String| Error::parse(source, line, msg);
        let eof = text.lines().count();
        match lines.next() {
            Some((_, l)) if l == CHECKPOINT_MAGIC => {}
            Some((n, _)) => return Err(perr(n, format!("expected `{CHECKPOINT_MAGIC}`"))),
            None => return Err(perr(1, "empty checkpoint".into())),
        }
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (n, l) = lines.next().ok_or_else(|| perr(eof, format!("missing `{key}`")))?;
            let value = l
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('\t'))
                .ok_or_else(|| perr(n, format!("expected `{key}`")))?;
            Ok((n, value.to_string()))
        };
        let num = |(n, v): (usize, String)| -> Result<u64> {
            v.parse::<u64>().map_err(|_| perr(n, format!("bad integer {v:?}")))
        };
        let (arch_line, arch_name) = header("arch")?;
        let input_dim = num(header("input_dim")?)? as usize;
        let hidden_dim = num(header("hidden_dim")?)? as usize;
        let num_classes = num(header("num_classes")?)? as usize;
        let embed_dim = num(header("embed_dim")?)? as usize;
        let seed = num(header("seed")?)?;
        let step = num(header("step")?)? as usize;
        let config_hash = match header("config_hash")?.1.as_str() {
            "-" => String::new(),
            h => h.to_string(),
        };
        let arch = match arch_name.as_str() {
            "linear" => Architecture::Linear,
            "mlp1" => Architecture::Mlp1 { hidden: hidden_dim },
            other => return Err(perr(arch_line, format!("unknown architecture {other:?}"))),
        };
        let spec = ModelSpec {
            arch,
            input_dim,
            num_classes,
            embed_dim: (embed_dim > 0).then_some(embed_dim),
        };

        let mut hidden = None;
        let mut classifier = None;
        let mut projection = None;
        while let Some((n, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 || fields[0] != "layer" {
                return Err(perr(n, "expected `layer<TAB>name<TAB>rows<TAB>cols`".into()));
            }
            let rows: usize = fields[2].parse().map_err(|_| perr(n, "bad row count".into()))?;
            let cols: usize = fields[3].parse().map_err(|_| perr(n, "bad column count".into()))?;
            let mut dense = Dense::zeros(rows, cols);
            let mut parse_row = |tag: char, dst: &mut [f64]| -> Result<()> {
                let (n, line) = lines.next().ok_or_else(|| perr(n, "truncated layer".into()))?;
                let mut parts = line.split('\t');
                if parts.next() != Some(&tag.to_string()[..]) {
                    return Err(perr(n, format!("expected `{tag}` row")));
                }
                let values: Vec<f64> = parts
                    .map(|v| v.parse::<f64>().map_err(|_| perr(n, format!("bad value {v:?}"))))
                    .collect::<Result<_>>()?;
                if values.len() != dst.len() {
                    return Err(perr(n, format!("expected {} values, found {}", dst.len(), values.len())));
                }
                dst.copy_from_slice(&values);
                Ok(())
            };
            for r in 0..rows {
                parse_row('w', &mut dense.weight[r * cols..(r + 1) * cols])?;
            }
            parse_row('b', &mut dense.bias)?;
            match fields[1] {
                "hidden" => hidden = Some(dense),
                "classifier" => classifier = Some(dense),
                "projection" => projection = Some(dense),
                other => return Err(perr(n, format!("unknown layer {other:?}"))),
            }
        }
        let classifier = classifier.ok_or_else(|| perr(eof, "missing classifier layer".into()))?;
        let model = Model::from_params(
            spec,
            Params {
                hidden,
                classifier,
                projection,
            },
        )?;
        Ok(Self {
            model,
            seed,
            step,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cross_entropy;

    fn linear(d: usize, c: usize, seed: u64) -> Model {
        let spec = ModelSpec {
            arch: Architecture::Linear,
            input_dim: d,
            num_classes: c,
            embed_dim: None,
        };
        Model::new(spec, &mut rng::stream(seed, 0)).unwrap()
    }

    struct SingleCe {
        x: Vec<f64>,
        y: usize,
    }

    impl Differentiable for SingleCe {
        fn loss(&self, model: &Model) -> Result<f64> {
            Ok(cross_entropy(&model.forward(&self.x)?.probs, self.y))
        }
        fn gradient(&self, model: &Model) -> Result<(f64, Gradients)> {
            let acts = model.activations(&self.x)?;
            let mut d = acts.probs.clone();
            d[self.y] -= 1.0;
            let mut g = model.zero_gradients();
            model.backward_logits(&acts, &d, &mut g);
            Ok((cross_entropy(&acts.probs, self.y), g))
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut m = linear(4, 5, 0);
        for (_, d) in m.params_mut().layers_mut() {
            d.weight.fill(0.0);
        }
        let p = m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap().probs;
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn closed_form_linear_ce_gradient() {
        let m = linear(3, 4, 1);
        let x = vec![0.5, -1.0, 2.0];
        let (_, g) = SingleCe { x: x.clone(), y: 2 }.gradient(&m).unwrap();
        let p = m.forward(&x).unwrap().probs;
        for c in 0..4 {
            let coef = p[c] - if c == 2 { 1.0 } else { 0.0 };
            for (k, xv) in x.iter().enumerate() {
                assert_eq!(g.classifier.weight[c * 3 + k], coef * xv);
            }
            assert_eq!(g.classifier.bias[c], coef);
        }
        let err = grad_check(&m, &SingleCe { x, y: 2 }, 1e-5, 0).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn sgd_plain_and_zero_lr() {
        let mut m = linear(2, 2, 2);
        let before = m.clone();
        let mut g = m.zero_gradients();
        g.classifier.weight = vec![1.0, -2.0, 0.5, 0.25];
        g.classifier.bias = vec![0.1, -0.1];

        let mut opt = Optimizer::new(&m, 0.1, 0.0, 0.0);
        sgd_step(&mut m, &mut opt, &g, 0).unwrap();
        for i in 0..6 {
            assert_eq!(m.params().get(i), before.params().get(i) - 0.1 * g.get(i));
        }

        let mut m = before.clone();
        let mut opt = Optimizer::new(&m, 0.0, 0.9, 0.0);
        sgd_step(&mut m, &mut opt, &g, 0).unwrap();
        assert_eq!(m, before);
        assert_eq!(opt.velocity(), &g);
    }

    #[test]
    fn momentum_unrolls() {
        let mut m = linear(2, 2, 3);
        let mut g = m.zero_gradients();
        g.classifier.weight = vec![1.0, 2.0, -1.0, 0.5];
        let lr = 0.01;
        let mut opt = Optimizer::new(&m, lr, 0.9, 0.0);
        sgd_step(&mut m, &mut opt, &g, 0).unwrap();
        let mid = m.clone();
        sgd_step(&mut m, &mut opt, &g, 1).unwrap();
        for i in 0..4 {
            let step = mid.params().get(i) - m.params().get(i);
            assert!((step - 1.9 * lr * g.get(i)).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_skips_bias() {
        let mut m = linear(2, 2, 4);
        let before = m.clone();
        let g = m.zero_gradients();
        let mut opt = Optimizer::new(&m, 0.1, 0.0, 0.5);
        sgd_step(&mut m, &mut opt, &g, 0).unwrap();
        assert_eq!(m.params().classifier.bias, before.params().classifier.bias);
        for (a, b) in m.params().classifier.weight.iter().zip(&before.params().classifier.weight) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut m = linear(2, 2, 5);
        let mut g = m.zero_gradients();
        g.classifier.bias[0] = f64::NAN;
        let mut opt = Optimizer::new(&m, 0.1, 0.9, 0.0);
        let err = sgd_step(&mut m, &mut opt, &g, 17).unwrap_err();
        assert_eq!(
            err,
            Error::NonFiniteGradient {
                layer: "classifier".into(),
                step: 17
            }
        );
    }

    #[test]
    fn momentum_encoder_cases() {
        let query = linear(2, 3, 6);
        let mut key = linear(2, 3, 7);
        let original = key.clone();
        momentum_encoder_update(&mut key, &query, 1.0).unwrap();
        assert_eq!(key, original);
        momentum_encoder_update(&mut key, &query, 0.0).unwrap();
        assert_eq!(key, query);

        let mut zero = linear(1, 1, 0);
        zero.params_mut().set(0, 0.0);
        let mut two = zero.clone();
        two.params_mut().set(0, 2.0);
        momentum_encoder_update(&mut zero, &two, 0.5).unwrap();
        assert_eq!(zero.params().get(0), 1.0);

        let mut other = linear(3, 3, 0);
        assert!(matches!(
            momentum_encoder_update(&mut other, &query, 0.5),
            Err(Error::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = ModelSpec {
            arch: Architecture::Mlp1 { hidden: 5 },
            input_dim: 3,
            num_classes: 4,
            embed_dim: Some(2),
        };
        let model = Model::new(spec, &mut rng::stream(9, 0)).unwrap();
        for hash in ["", "abc123"] {
            let ck = Checkpoint {
                model: model.clone(),
                seed: 9,
                step: 123,
                config_hash: hash.into(),
            };
            let text = ck.to_text();
            let back = Checkpoint::from_text(&text, "mem").unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_text(), text);
        }
        assert!(matches!(Checkpoint::from_text("junk", "mem"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn fresh_classifier_keeps_representation() {
        let spec = ModelSpec {
            arch: Architecture::Mlp1 { hidden: 6 },
            input_dim: 3,
            num_classes: 4,
            embed_dim: Some(2),
        };
        let model = Model::new(spec, &mut rng::stream(1, 0)).unwrap();
        let fresh = model.with_fresh_classifier(&mut rng::stream(2, 0));
        assert_eq!(fresh.representation_fingerprint(), model.representation_fingerprint());
        assert!(fresh.params().projection.is_none());
        assert_ne!(fresh.params().classifier, model.params().classifier);
    }
}
