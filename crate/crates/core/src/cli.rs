//! Command-line front end: `gen-data`, `train`, `filter`, `eval`, `sweep`,
//! `report`.
//!
//! Each command writes one directory, built under a temporary name and
//! renamed into place when complete. Progress goes to stderr; results go to
//! files only.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval;
use crate::filter;
use crate::model::Checkpoint;
use crate::report::{self, EvalReport, SummaryRow};
use crate::synthdata::{generate, hex, DataSplit};
use crate::taxonomy::Taxonomy;
use crate::trainers::{self, CoarseSource, Method};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "HIERSSL_OUT_ROOT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "hierssl", version, about = "Hierarchical semi-supervised learning with coarse labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory. Defaults to `$HIERSSL_OUT_ROOT/<command>/<id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// No coarse labels, then coarse labels at every level.
    Levels,
    /// Every method, with and without coarse labels, on both coarse pools.
    Methods,
    /// Clean, mixed, and filtered coarse pools.
    Ood,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(Common),
    /// Train one model and evaluate it.
    Train(Common),
    /// Train the filter model and filter the mixed coarse pool.
    Filter(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run a grid of experiments over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        grid: Grid,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Worker count; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Merge sweep summaries and aggregate over seeds.
    Report {
        /// Sweep directories or summary files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Aggregate even when rows of one seed used different data.
        #[arg(long)]
        force: bool,
    },
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(out) => {
            eprintln!("wrote {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.category().exit_code()
        }
    }
}

/// Runs a parsed command and returns its output directory.
pub fn execute(command: &Command) -> Result<PathBuf> {
    match command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Filter(c) => filter_cmd(c),
        Command::Eval { common, model } => eval_cmd(common, model),
        Command::Sweep {
            common,
            grid,
            seeds,
            jobs,
        } => sweep(common, *grid, seeds, *jobs),
        Command::Report { inputs, out, force } => report_cmd(inputs, out.as_deref(), *force),
    }
}

pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        config.apply_override(o)?;
    }
    Ok(config)
}

fn out_dir(explicit: Option<&Path>, command: &str, id: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
            root.join(command).join(id)
        }
    }
}

/// Builds `out` under a temporary sibling and renames it into place,
/// replacing any previous contents.
pub fn write_atomically(out: &Path, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let name = out
        .file_name()
        .ok_or_else(|| Error::config("--out", format!("{} has no final component", out.display())))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = build(&tmp) {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    std::fs::rename(&tmp, out).map_err(|e| Error::io(out, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Inserts `#config_hash<TAB>hash` after the first line of a `#`-headed file.
fn annotate(text: &str, hash: &str) -> String {
    match text.split_once('\n') {
        Some((first, rest)) => format!("{first}\n#config_hash\t{hash}\n{rest}"),
        None => format!("{text}\n#config_hash\t{hash}\n"),
    }
}

/// The label-space taxonomy and the splits an experiment runs on.
pub struct Data {
    pub taxonomy: Taxonomy,
    /// Taxonomy including out-of-class species, when generated.
    pub full_taxonomy: Option<Taxonomy>,
    pub split: DataSplit,
}

pub fn load_data(config: &ExperimentConfig) -> Result<Data> {
    match &config.data_dir {
        Some(dir) => {
            let taxonomy = Taxonomy::load(&dir.join("taxonomy.csv"))?;
            let split = DataSplit::load_dir(dir, &taxonomy)?;
            Ok(Data {
                taxonomy,
                full_taxonomy: None,
                split,
            })
        }
        None => {
            let d = generate(&config.gen_config()?)?;
            Ok(Data {
                taxonomy: d.taxonomy,
                full_taxonomy: Some(d.full_taxonomy),
                split: d.split,
            })
        }
    }
}

fn write_data_dir(dir: &Path, data: &Data, hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.taxonomy.save(&dir.join("taxonomy.csv"))?;
    if let Some(full) = &data.full_taxonomy {
        full.save(&dir.join("taxonomy_full.csv"))?;
    }
    data.split
        .write_dir_annotated(dir, &data.taxonomy, &[("config_hash", hash)])
}

fn manifest(dir: &Path, files: &[&str], config_hash: &str, data_hash: &str) -> Result<String> {
    let mut out = format!("#hierssl-manifest v1\nconfig_hash\t{config_hash}\ndata_hash\t{data_hash}\n");
    for f in files {
        let path = dir.join(f);
        if !path.exists() {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.push_str(&format!("file\t{f}\t{}\n", hex(&Sha256::digest(&bytes))));
    }
    Ok(out)
}

fn gen_data(common: &Common) -> Result<PathBuf> {
    let config = load_config(common)?;
    let out = out_dir(common.out.as_deref(), "gen-data", &config.id);
    let data = load_data(&config)?;
    let hash = config.hash();
    let data_hash = data.split.fingerprint(&data.taxonomy)?;
    eprintln!(
        "generated {} labeled, {} coarse in, {} coarse out, {} test, {} validation samples",
        data.split.labeled.len(),
        data.split.coarse_in.len(),
        data.split.coarse_out.len(),
        data.split.test.len(),
        data.split.validation.len()
    );
    write_atomically(&out, |dir| {
        write_data_dir(dir, &data, &hash)?;
        write(&dir.join("config.resolved"), &config.to_text())?;
        let files = [
            "taxonomy.csv",
            "taxonomy_full.csv",
            "labeled.tsv",
            "coarse_in.tsv",
            "coarse_out.tsv",
            "test.tsv",
            "validation.tsv",
            "config.resolved",
        ];
        write(&dir.join("manifest.tsv"), &manifest(dir, &files, &hash, &data_hash)?)
    })?;
    Ok(out)
}

/// A finished training run.
pub struct Experiment {
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
    pub filter_report: Option<String>,
}

/// Trains and evaluates the experiment described by `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Experiment> {
    let data = load_data(config)?;
    run_experiment_on(config, &data)
}

pub fn run_experiment_on(config: &ExperimentConfig, data: &Data) -> Result<Experiment> {
    let tcfg = config.train_config(&data.taxonomy)?;
    let hash = config.hash();
    let outcome = trainers::train(&tcfg, &data.split, &data.taxonomy)?;
    let (top1, per_level, confusion) = eval::evaluate_levels(&outcome.model, &data.taxonomy, &data.split.test)?;
    let mut extra = Vec::new();
    let mut filter_report = None;
    if let Some(f) = &outcome.filter {
        extra.extend(f.stats.entries());
        filter_report = Some(annotate(
            &filter::filter_report(&f.decisions, &data.taxonomy, &tcfg.filter)?,
            &hash,
        ));
    }
    let steps = outcome.trace.iter().filter(|r| r.stage == "main").count();
    let report = EvalReport {
        id: config.id.clone(),
        config_hash: hash.clone(),
        data_hash: data.split.fingerprint(&data.taxonomy)?,
        config: config.entries(),
        top1_species: top1,
        per_level,
        extra,
        confusion,
        trace: outcome.trace,
    };
    Ok(Experiment {
        report,
        checkpoint: Checkpoint {
            model: outcome.model,
            seed: tcfg.seed,
            step: steps,
            config_hash: hash,
        },
        filter_report,
    })
}

fn write_experiment(dir: &Path, config: &ExperimentConfig, exp: &Experiment) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("config.resolved"), &config.to_text())?;
    exp.checkpoint.save(&dir.join("model.ckpt"))?;
    exp.report.write(&dir.join("report.txt"))?;
    if let Some(f) = &exp.filter_report {
        write(&dir.join("filter_report.tsv"), f)?;
    }
    Ok(())
}

fn train(common: &Common) -> Result<PathBuf> {
    let config = load_config(common)?;
    let out = out_dir(common.out.as_deref(), "train", &config.id);
    eprintln!("training {} ({})", config.id, config.train.method.name());
    let exp = run_experiment(&config)?;
    eprintln!("top-1 {:.4}", exp.report.top1_species);
    write_atomically(&out, |dir| write_experiment(dir, &config, &exp))?;
    Ok(out)
}

fn filter_cmd(common: &Common) -> Result<PathBuf> {
    let config = load_config(common)?;
    let out = out_dir(common.out.as_deref(), "filter", &config.id);
    let data = load_data(&config)?;
    let mut tcfg = config.train_config(&data.taxonomy)?;
    tcfg.coarse_source = CoarseSource::Filtered;
    tcfg.filter.validate(&data.taxonomy)?;
    let hash = config.hash();
    let mut trace = Vec::new();
    eprintln!("training filter model");
    let model = trainers::train_filter_model(&tcfg, &data.split, &data.taxonomy, &mut trace)?;
    let (filtered, outcome) = filter::filtered_source(&data.split, &model, &data.taxonomy, &tcfg.filter)?;
    eprintln!(
        "kept {}/{} coarse samples (precision {:.4}, recall {:.4})",
        outcome.stats.kept,
        outcome.stats.total,
        outcome.stats.precision(),
        outcome.stats.recall()
    );
    let (top1, per_level, confusion) = eval::evaluate_levels(&model, &data.taxonomy, &data.split.test)?;
    let report = EvalReport {
        id: config.id.clone(),
        config_hash: hash.clone(),
        data_hash: data.split.fingerprint(&data.taxonomy)?,
        config: config.entries(),
        top1_species: top1,
        per_level,
        extra: outcome.stats.entries(),
        confusion,
        trace,
    };
    let filtered_data = Data {
        taxonomy: data.taxonomy.clone(),
        full_taxonomy: None,
        split: filtered,
    };
    let filter_text = annotate(&filter::filter_report(&outcome.decisions, &data.taxonomy, &tcfg.filter)?, &hash);
    let steps = tcfg.steps;
    write_atomically(&out, |dir| {
        write(&dir.join("config.resolved"), &config.to_text())?;
        write(&dir.join("filter_report.tsv"), &filter_text)?;
        report.write(&dir.join("report.txt"))?;
        Checkpoint {
            model,
            seed: tcfg.seed,
            step: steps,
            config_hash: hash.clone(),
        }
        .save(&dir.join("filter_model.ckpt"))?;
        write_data_dir(&dir.join("data"), &filtered_data, &hash)
    })?;
    Ok(out)
}

fn eval_cmd(common: &Common, model_path: &Path) -> Result<PathBuf> {
    let config = load_config(common)?;
    let out = out_dir(common.out.as_deref(), "eval", &config.id);
    let checkpoint = Checkpoint::load(model_path)?;
    let data = load_data(&config)?;
    let model = &checkpoint.model;
    if model.input_dim() != data.split.dim || model.num_classes() != data.taxonomy.num_leaves() {
        return Err(Error::ArchitectureMismatch(format!(
            "{} expects {} inputs and {} classes; the data has {} and {}",
            model_path.display(),
            model.input_dim(),
            model.num_classes(),
            data.split.dim,
            data.taxonomy.num_leaves()
        )));
    }
    let (top1, per_level, confusion) = eval::evaluate_levels(model, &data.taxonomy, &data.split.test)?;
    let hash = config.hash();
    let report = EvalReport {
        id: config.id.clone(),
        config_hash: hash,
        data_hash: data.split.fingerprint(&data.taxonomy)?,
        config: config.entries(),
        top1_species: top1,
        per_level,
        extra: vec![("model.config_hash".into(), checkpoint.config_hash.clone())],
        confusion,
        trace: Vec::new(),
    };
    eprintln!("top-1 {top1:.4}");
    write_atomically(&out, |dir| {
        write(&dir.join("config.resolved"), &config.to_text())?;
        report.write(&dir.join("report.txt"))
    })?;
    Ok(out)
}

/// One cell of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: ExperimentConfig,
}

/// Expands a grid over `seeds`. Each seed sets both the data and training
/// seeds.
pub fn grid_cells(base: &ExperimentConfig, grid: Grid, seeds: &[u64]) -> Result<Vec<Cell>> {
    let mut variants: Vec<Vec<(&str, String)>> = Vec::new();
    let level_names = base.gen.level_names.clone();
    match grid {
        Grid::Levels => {
            variants.push(vec![("train.use_hier", "false".into())]);
            let names = match &base.data_dir {
                Some(dir) => Taxonomy::load(&dir.join("taxonomy.csv"))?.level_names().to_vec(),
                None => level_names,
            };
            for name in names {
                variants.push(vec![("train.use_hier", "true".into()), ("train.coarse_level", name)]);
            }
        }
        Grid::Methods => {
            for method in Method::ALL {
                for hier in [false, true] {
                    for source in [CoarseSource::In, CoarseSource::InPlusOut] {
                        variants.push(vec![
                            ("train.method", method.name().into()),
                            ("train.use_hier", hier.to_string()),
                            ("train.coarse_source", source.name().into()),
                        ]);
                    }
                }
            }
        }
        Grid::Ood => {
            for source in CoarseSource::ALL {
                variants.push(vec![("train.coarse_source", source.name().into())]);
            }
        }
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        for v in &variants {
            let mut config = base.clone();
            for (k, value) in v {
                config.set(k, value)?;
            }
            config.set_seed(seed);
            let name = format!(
                "{}-{}-{}-{}-s{seed}",
                config.train.method.name(),
                if config.train.use_hier { "hier" } else { "flat" },
                config.coarse_level_ref(),
                config.train.coarse_source.name()
            );
            config.set("id", &name)?;
            cells.push(Cell { name, config });
        }
    }
    Ok(cells)
}

fn summary_row(cell: &Cell, report: &EvalReport) -> SummaryRow {
    let c = &cell.config;
    SummaryRow {
        experiment: cell.name.clone(),
        method: c.train.method.name().to_string(),
        use_hier: c.train.use_hier,
        level: if c.train.use_hier { c.coarse_level_ref().to_string() } else { "-".into() },
        coarse_source: c.train.coarse_source.name().to_string(),
        seed: c.train.seed,
        top1: report.top1_species,
        config_hash: report.config_hash.clone(),
        data_hash: report.data_hash.clone(),
    }
}

fn sweep(common: &Common, grid: Grid, seeds: &[u64], jobs: Option<usize>) -> Result<PathBuf> {
    use rayon::prelude::*;

    let base = load_config(common)?;
    if seeds.is_empty() {
        return Err(Error::config("--seeds", "need at least one seed"));
    }
    let out = out_dir(common.out.as_deref(), "sweep", &base.id);
    let cells = grid_cells(&base, grid, seeds)?;
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(Error::config("--jobs", "must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config("--jobs", e.to_string()))?;
    let total = cells.len();
    eprintln!("sweep: {total} cells on {jobs} workers");
    write_atomically(&out, |dir| {
        let done = std::sync::atomic::AtomicUsize::new(0);
        let rows = pool.install(|| {
            cells
                .par_iter()
                .map(|cell| {
                    let exp = run_experiment(&cell.config)?;
                    write_experiment(&dir.join(&cell.name), &cell.config, &exp)?;
                    let k = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
                    eprintln!("[{k}/{total}] {} top-1 {:.4}", cell.name, exp.report.top1_species);
                    Ok(summary_row(cell, &exp.report))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        write(&dir.join("config.resolved"), &base.to_text())?;
        write(&dir.join("summary.tsv"), &annotate(&report::summary_to_text(&rows), &base.hash()))?;
        let groups = report::aggregate(&rows, false)?;
        write(&dir.join("aggregate.tsv"), &annotate(&report::aggregate_to_text(&groups), &base.hash()))
    })?;
    Ok(out)
}

/// Digest of the distinct config hashes behind a merged summary.
fn merged_hash(rows: &[report::SummaryRow]) -> String {
    let hashes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    let mut hasher = Sha256::new();
    for h in hashes {
        hasher.update(h.as_bytes());
        hasher.update(b"\n");
    }
    hex(&hasher.finalize())
}

fn report_cmd(inputs: &[PathBuf], out: Option<&Path>, force: bool) -> Result<PathBuf> {
    let mut parts = Vec::new();
    for input in inputs {
        let path = if input.is_dir() { input.join("summary.tsv") } else { input.clone() };
        parts.push(report::read_summary(&path)?);
    }
    let rows = report::merge_summaries(&parts);
    let groups = report::aggregate(&rows, force)?;
    let hash = merged_hash(&rows);
    let out = out_dir(out, "report", "merged");
    write_atomically(&out, |dir| {
        write(&dir.join("summary.tsv"), &annotate(&report::summary_to_text(&rows), &hash))?;
        write(&dir.join("aggregate.tsv"), &annotate(&report::aggregate_to_text(&groups), &hash))
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = ExperimentConfig::default();
        assert_eq!(grid_cells(&base, Grid::Methods, &[1]).unwrap().len(), 24);
        assert_eq!(grid_cells(&base, Grid::Levels, &[1, 2]).unwrap().len(), 16);
        let ood = grid_cells(&base, Grid::Ood, &[3]).unwrap();
        assert_eq!(ood.len(), 3);
        assert!(ood.iter().all(|c| c.config.train.seed == 3 && c.config.gen.seed == 3));
        let names: std::collections::BTreeSet<_> = grid_cells(&base, Grid::Methods, &[1, 2])
            .unwrap()
            .into_iter()
            .map(|c| c.name)
            .collect();
        assert_eq!(names.len(), 48);
    }

    #[test]
    fn annotate_after_magic() {
        assert_eq!(annotate("#m v1\nrow\n", "h"), "#m v1\n#config_hash\th\nrow\n");
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["hierssl", "frobnicate"]), 2);
        assert_eq!(run(["hierssl", "train", "--set", "train.method=mixmatch"]), 2);
    }
}
