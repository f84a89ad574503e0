//! Flat `key = value` experiment configs.
//!
//! Every field of the generator and trainer has a dotted key. Lines starting
//! with `#` are comments. Levels are given by name (case-insensitive) or by
//! 1-based number. The resolved text lists every key in a fixed order, and its
//! SHA-256 identifies the experiment.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::synthdata::{hex, GenConfig};
use crate::taxonomy::Taxonomy;
use crate::trainers::{CoarseSource, Method, StudentInit, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: String,
    /// Directory with `taxonomy.csv` and split files; generated data when unset.
    pub data_dir: Option<PathBuf>,
    pub gen: GenConfig,
    gen_out_attach_level: String,
    gen_coarse_label_level: String,
    pub train: TrainConfig,
    train_coarse_level: String,
    filter_match_level: String,
    batch_m: Option<usize>,
    batch_n: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            id: "experiment".into(),
            data_dir: None,
            gen: GenConfig::default(),
            gen_out_attach_level: "default".into(),
            gen_coarse_label_level: "finest".into(),
            train: TrainConfig::default(),
            train_coarse_level: "Phylum".into(),
            filter_match_level: "Phylum".into(),
            batch_m: None,
            batch_n: None,
        }
    }
}

/// Every settable key, in resolved-output order.
pub const KEYS: &[&str] = &[
    "id",
    "data.dir",
    "gen.level_names",
    "gen.level_counts",
    "gen.dim",
    "gen.sigmas",
    "gen.sigma_x",
    "gen.labeled_per_species",
    "gen.coarse_in_per_species",
    "gen.coarse_out_per_species",
    "gen.test_per_species",
    "gen.val_per_species",
    "gen.out_fraction",
    "gen.out_attach_level",
    "gen.out_offset_multiplier",
    "gen.coarse_label_level",
    "gen.long_tail_exponent",
    "gen.seed",
    "train.method",
    "train.use_hier",
    "train.coarse_level",
    "train.coarse_source",
    "train.arch",
    "train.hidden",
    "train.m",
    "train.n",
    "train.steps",
    "train.pretrain_steps",
    "train.teacher_steps",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.cosine",
    "train.weak_aug_all",
    "train.student_init",
    "train.eval_every",
    "train.seed",
    "ssl.tau",
    "ssl.distill_temperature",
    "ssl.nce_temperature",
    "ssl.queue_size",
    "ssl.key_momentum",
    "ssl.unsup_weight",
    "ssl.embed_dim",
    "aug.weak_sigma",
    "aug.strong_sigma",
    "aug.drop_prob",
    "aug.jitter",
    "filter.tau",
    "filter.match_level",
    "filter.use_hier",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn float(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(key, format!("{value:?} is not finite")))
    }
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("{value:?} is not a boolean"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Resolves a level given by name or 1-based number.
pub fn resolve_level(key: &str, value: &str, level_names: &[String]) -> Result<usize> {
    if let Some(i) = level_names.iter().position(|n| n.eq_ignore_ascii_case(value)) {
        return Ok(i);
    }
    match value.parse::<usize>() {
        Ok(k) if (1..=level_names.len()).contains(&k) => Ok(k - 1),
        _ => Err(Error::config(
            key,
            format!("unknown level {value:?}; expected one of {} or 1..{}", level_names.join(", "), level_names.len()),
        )),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        let mut version_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "version" {
                if value != CONFIG_VERSION.to_string() {
                    return Err(Error::config("version", format!("unsupported config version {value:?}")));
                }
                version_seen = true;
                continue;
            }
            config.set(key, value)?;
        }
        if !version_seen && !text.trim().is_empty() {
            return Err(Error::config("version", format!("{source}: missing `version = {CONFIG_VERSION}`")));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.gen;
        let t = &mut self.train;
        match key {
            "id" => {
                if value.is_empty() || value.contains(['/', '\\', '\t']) {
                    return Err(Error::config(key, "must be a nonempty name without slashes or tabs"));
                }
                self.id = value.to_string();
            }
            "data.dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "gen.level_names" => g.level_names = value.split(',').map(|s| s.trim().to_string()).collect(),
            "gen.level_counts" => g.level_counts = list(key, value)?,
            "gen.dim" => g.dim = num(key, value)?,
            "gen.sigmas" => g.sigmas = list(key, value)?,
            "gen.sigma_x" => g.sigma_x = float(key, value)?,
            "gen.labeled_per_species" => g.labeled_per_species = num(key, value)?,
            "gen.coarse_in_per_species" => g.coarse_in_per_species = num(key, value)?,
            "gen.coarse_out_per_species" => g.coarse_out_per_species = num(key, value)?,
            "gen.test_per_species" => g.test_per_species = num(key, value)?,
            "gen.val_per_species" => g.val_per_species = num(key, value)?,
            "gen.out_fraction" => g.out_fraction = float(key, value)?,
            "gen.out_attach_level" => self.gen_out_attach_level = value.to_string(),
            "gen.out_offset_multiplier" => g.out_offset_multiplier = float(key, value)?,
            "gen.coarse_label_level" => self.gen_coarse_label_level = value.to_string(),
            "gen.long_tail_exponent" => g.long_tail_exponent = float(key, value)?,
            "gen.seed" => g.seed = num(key, value)?,
            "train.method" => t.method = Method::parse(value)?,
            "train.use_hier" => t.use_hier = flag(key, value)?,
            "train.coarse_level" => self.train_coarse_level = value.to_string(),
            "train.coarse_source" => t.coarse_source = CoarseSource::parse(value)?,
            "train.arch" => {
                t.arch = match value {
                    "linear" => Architecture::Linear,
                    "mlp1" | "mlp" => Architecture::Mlp1 {
                        hidden: match t.arch {
                            Architecture::Mlp1 { hidden } => hidden,
                            Architecture::Linear => 64,
                        },
                    },
                    _ => return Err(Error::config(key, format!("{value:?} is not one of linear, mlp1"))),
                }
            }
            "train.hidden" => {
                let h: usize = num(key, value)?;
                if let Architecture::Mlp1 { hidden } = &mut t.arch {
                    *hidden = h;
                } else if h != 0 {
                    return Err(Error::config(key, "a linear model has no hidden layer; set train.arch = mlp1 first"));
                }
            }
            "train.m" => self.batch_m = auto(key, value)?,
            "train.n" => self.batch_n = auto(key, value)?,
            "train.steps" => t.steps = num(key, value)?,
            "train.pretrain_steps" => t.pretrain_steps = num(key, value)?,
            "train.teacher_steps" => t.teacher_steps = num(key, value)?,
            "train.lr" => t.learning_rate = float(key, value)?,
            "train.momentum" => t.momentum = float(key, value)?,
            "train.weight_decay" => t.weight_decay = float(key, value)?,
            "train.cosine" => t.cosine = flag(key, value)?,
            "train.weak_aug_all" => t.weak_aug_all = flag(key, value)?,
            "train.student_init" => t.student_init = StudentInit::parse(value)?,
            "train.eval_every" => t.eval_every = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "ssl.tau" => t.ssl.tau = float(key, value)?,
            "ssl.distill_temperature" => t.ssl.distill_temperature = float(key, value)?,
            "ssl.nce_temperature" => t.ssl.nce_temperature = float(key, value)?,
            "ssl.queue_size" => t.ssl.queue_size = num(key, value)?,
            "ssl.key_momentum" => t.ssl.key_momentum = float(key, value)?,
            "ssl.unsup_weight" => t.ssl.unsup_weight = float(key, value)?,
            "ssl.embed_dim" => t.ssl.embed_dim = num(key, value)?,
            "aug.weak_sigma" => t.aug.weak_sigma = float(key, value)?,
            "aug.strong_sigma" => t.aug.strong_sigma = float(key, value)?,
            "aug.drop_prob" => t.aug.drop_prob = float(key, value)?,
            "aug.jitter" => t.aug.jitter = float(key, value)?,
            "filter.tau" => t.filter.tau = float(key, value)?,
            "filter.match_level" => self.filter_match_level = value.to_string(),
            "filter.use_hier" => t.filter_use_hier = flag(key, value)?,
            _ => return Err(Error::config(key, "unknown config key")),
        }
        Ok(())
    }

    /// Labeled and coarse batch sizes after applying method defaults.
    pub fn batch_sizes(&self) -> (usize, usize) {
        let (m, n) = self.train.method.default_batch_sizes();
        (self.batch_m.unwrap_or(m), self.batch_n.unwrap_or(n))
    }

    /// Generator settings with level references resolved.
    pub fn gen_config(&self) -> Result<GenConfig> {
        let mut g = self.gen.clone();
        g.out_attach_level = match self.gen_out_attach_level.as_str() {
            "default" => None,
            v => Some(resolve_level("gen.out_attach_level", v, &g.level_names)?),
        };
        g.coarse_label_level = match self.gen_coarse_label_level.as_str() {
            "finest" => None,
            v => Some(resolve_level("gen.coarse_label_level", v, &g.level_names)?),
        };
        g.validate()?;
        Ok(g)
    }

    /// Trainer settings with levels resolved against `taxonomy`.
    pub fn train_config(&self, taxonomy: &Taxonomy) -> Result<TrainConfig> {
        let names = taxonomy.level_names();
        let mut t = self.train.clone();
        t.coarse_level = resolve_level("train.coarse_level", &self.train_coarse_level, names)?;
        t.filter.match_level = resolve_level("filter.match_level", &self.filter_match_level, names)?;
        (t.m, t.n) = self.batch_sizes();
        t.validate(taxonomy)?;
        Ok(t)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.gen;
        let t = &self.train;
        let (m, n) = self.batch_sizes();
        Some(match key {
            "id" => self.id.clone(),
            "data.dir" => self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "gen.level_names" => g.level_names.join(","),
            "gen.level_counts" => join(&g.level_counts),
            "gen.dim" => g.dim.to_string(),
            "gen.sigmas" => join(&g.sigmas),
            "gen.sigma_x" => g.sigma_x.to_string(),
            "gen.labeled_per_species" => g.labeled_per_species.to_string(),
            "gen.coarse_in_per_species" => g.coarse_in_per_species.to_string(),
            "gen.coarse_out_per_species" => g.coarse_out_per_species.to_string(),
            "gen.test_per_species" => g.test_per_species.to_string(),
            "gen.val_per_species" => g.val_per_species.to_string(),
            "gen.out_fraction" => g.out_fraction.to_string(),
            "gen.out_attach_level" => self.gen_out_attach_level.clone(),
            "gen.out_offset_multiplier" => g.out_offset_multiplier.to_string(),
            "gen.coarse_label_level" => self.gen_coarse_label_level.clone(),
            "gen.long_tail_exponent" => g.long_tail_exponent.to_string(),
            "gen.seed" => g.seed.to_string(),
            "train.method" => t.method.name().to_string(),
            "train.use_hier" => t.use_hier.to_string(),
            "train.coarse_level" => self.train_coarse_level.clone(),
            "train.coarse_source" => t.coarse_source.name().to_string(),
            "train.arch" => t.arch.name().to_string(),
            "train.hidden" => t.arch.hidden_dim().to_string(),
            "train.m" => m.to_string(),
            "train.n" => n.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.pretrain_steps" => t.pretrain_steps.to_string(),
            "train.teacher_steps" => t.teacher_steps.to_string(),
            "train.lr" => t.learning_rate.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.cosine" => t.cosine.to_string(),
            "train.weak_aug_all" => t.weak_aug_all.to_string(),
            "train.student_init" => t.student_init.name().to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.seed" => t.seed.to_string(),
            "ssl.tau" => t.ssl.tau.to_string(),
            "ssl.distill_temperature" => t.ssl.distill_temperature.to_string(),
            "ssl.nce_temperature" => t.ssl.nce_temperature.to_string(),
            "ssl.queue_size" => t.ssl.queue_size.to_string(),
            "ssl.key_momentum" => t.ssl.key_momentum.to_string(),
            "ssl.unsup_weight" => t.ssl.unsup_weight.to_string(),
            "ssl.embed_dim" => t.ssl.embed_dim.to_string(),
            "aug.weak_sigma" => t.aug.weak_sigma.to_string(),
            "aug.strong_sigma" => t.aug.strong_sigma.to_string(),
            "aug.drop_prob" => t.aug.drop_prob.to_string(),
            "aug.jitter" => t.aug.jitter.to_string(),
            "filter.tau" => t.filter.tau.to_string(),
            "filter.match_level" => self.filter_match_level.clone(),
            "filter.use_hier" => t.filter_use_hier.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("every listed key has a value")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("version = {CONFIG_VERSION}\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// SHA-256 of the resolved text.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    /// Sets both the data and training seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.gen.seed = seed;
        self.train.seed = seed;
    }

    pub fn coarse_level_ref(&self) -> &str {
        &self.train_coarse_level
    }
}

fn auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = ExperimentConfig::default();
        c.apply_override("train.method=fixmatch").unwrap();
        c.apply_override("gen.sigma_x = 0.5").unwrap();
        let text = c.to_text();
        let back = ExperimentConfig::parse(&text, "c").unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(back.batch_sizes(), (32, 160));
    }

    #[test]
    fn method_defaults_follow_the_method() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.batch_sizes(), (30, 30));
        c.set("train.method", "fixmatch").unwrap();
        assert_eq!(c.batch_sizes(), (32, 160));
        c.set("train.n", "64").unwrap();
        assert_eq!(c.batch_sizes(), (32, 64));
    }

    #[test]
    fn errors_name_the_key() {
        let mut c = ExperimentConfig::default();
        let e = c.apply_override("train.nope=1").unwrap_err();
        assert!(e.to_string().contains("train.nope"));
        assert_eq!(e.category(), crate::error::ErrorCategory::Config);
        let e = c.apply_override("train.method=mixmatch").unwrap_err();
        assert!(e.to_string().contains("pseudo_label"));
        assert!(c.apply_override("gen.sigma_x=abc").is_err());
        assert!(c.apply_override("no-equals").is_err());
        assert!(ExperimentConfig::parse("version = 2\n", "c").is_err());
        assert!(ExperimentConfig::parse("gen.dim = 3\n", "c").is_err());
        assert!(matches!(ExperimentConfig::parse("version = 1\nbogus\n", "c"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn levels_by_name_or_number() {
        let names: Vec<String> = ["Kingdom", "Phylum", "Species"].iter().map(|s| s.to_string()).collect();
        assert_eq!(resolve_level("k", "phylum", &names).unwrap(), 1);
        assert_eq!(resolve_level("k", "3", &names).unwrap(), 2);
        assert!(resolve_level("k", "0", &names).is_err());
        assert!(resolve_level("k", "Genus", &names).is_err());
    }

    #[test]
    fn every_key_is_settable_with_its_own_value() {
        let c = ExperimentConfig::default();
        let mut d = ExperimentConfig::default();
        for (k, v) in c.entries() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(d.to_text(), c.to_text());
    }
}
