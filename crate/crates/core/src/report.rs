//! Text formats for experiment reports and sweep summaries.
//!
//! Floats are written in shortest round-trip form, so reading a report back
//! yields bit-identical values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;

/// One training-trace row. `test_acc` is present at evaluation steps only.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub stage: String,
    pub step: usize,
    pub total: f64,
    pub supervised: f64,
    pub coarse: f64,
    pub unsupervised: f64,
    pub mask_rate: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub id: String,
    pub config_hash: String,
    pub data_hash: String,
    /// Resolved config, enough to reproduce the run.
    pub config: Vec<(String, String)>,
    pub top1_species: f64,
    pub per_level: Vec<(String, f64)>,
    /// Additional metrics such as filter statistics.
    pub extra: Vec<(String, String)>,
    pub confusion: Vec<ConfusionMatrix>,
    pub trace: Vec<TraceRow>,
}

const REPORT_MAGIC: &str = "#hierssl-report v1";
const TRACE_HEADER: &str = "stage\tstep\ttotal\tsupervised\tcoarse\tunsupervised\tmask_rate\ttest_acc";

fn check_field(what: &str, value: &str) -> Result<()> {
    if value.contains(['\t', '\n', '\r']) {
        return Err(Error::config(what, format!("{value:?} contains a tab or newline")));
    }
    Ok(())
}

impl EvalReport {
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "{REPORT_MAGIC}");
        for (k, v) in [("id", &self.id), ("config_hash", &self.config_hash), ("data_hash", &self.data_hash)] {
            check_field(k, v)?;
            let _ = writeln!(out, "{k}\t{v}");
        }
        out.push_str("[config]\n");
        for (k, v) in &self.config {
            check_field(k, k)?;
            check_field(k, v)?;
            let _ = writeln!(out, "{k}\t{v}");
        }
        out.push_str("[metrics]\n");
        let _ = writeln!(out, "top1_species\t{}", self.top1_species);
        for (name, acc) in &self.per_level {
            check_field("level", name)?;
            let _ = writeln!(out, "level\t{name}\t{acc}");
        }
        out.push_str("[extra]\n");
        for (k, v) in &self.extra {
            check_field(k, k)?;
            check_field(k, v)?;
            let _ = writeln!(out, "{k}\t{v}");
        }
        for cm in &self.confusion {
            let _ = writeln!(out, "[confusion\t{}]", cm.level_name);
            let _ = writeln!(out, "classes\t{}", cm.class_names.join("\t"));
            for (name, row) in cm.class_names.iter().zip(&cm.counts) {
                out.push_str(name);
                for c in row {
                    let _ = write!(out, "\t{c}");
                }
                out.push('\n');
            }
        }
        out.push_str("[trace]\n");
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for r in &self.trace {
            check_field("stage", &r.stage)?;
            let acc = r.test_acc.map_or_else(|| "-".to_string(), |a| a.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{acc}",
                r.stage, r.step, r.total, r.supervised, r.coarse, r.unsupervised, r.mask_rate
            );
        }
        Ok(out)
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::parse(source, line, msg);
        let eof = text.lines().count();
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        match lines.next() {
            Some((_, l)) if l == REPORT_MAGIC => {}
            Some((n, _)) => return Err(perr(n, format!("expected `{REPORT_MAGIC}`"))),
            None => return Err(perr(1, "empty report".into())),
        }
        let mut report = EvalReport::default();
        for key in ["id", "config_hash", "data_hash"] {
            let (n, l) = lines.next().ok_or_else(|| perr(eof, format!("missing `{key}` line")))?;
            let value = l
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('\t'))
                .ok_or_else(|| perr(n, format!("expected `{key}<TAB>...`")))?;
            match key {
                "id" => report.id = value.to_string(),
                "config_hash" => report.config_hash = value.to_string(),
                _ => report.data_hash = value.to_string(),
            }
        }

        #[derive(PartialEq)]
        enum Section {
            None,
            Config,
            Metrics,
            Extra,
            Confusion,
            Trace,
        }
        let mut section = Section::None;
        let mut saw_top1 = false;
        let mut trace_header_seen = false;
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = match line {
                    "[config]" => Section::Config,
                    "[metrics]" => Section::Metrics,
                    "[extra]" => Section::Extra,
                    "[trace]" => Section::Trace,
                    _ => {
                        let level = line
                            .strip_prefix("[confusion\t")
                            .and_then(|r| r.strip_suffix(']'))
                            .ok_or_else(|| perr(n, format!("unknown section {line:?}")))?;
                        report.confusion.push(ConfusionMatrix {
                            level_name: level.to_string(),
                            class_names: Vec::new(),
                            counts: Vec::new(),
                        });
                        Section::Confusion
                    }
                };
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match section {
                Section::None => return Err(perr(n, "row outside any section".into())),
                Section::Config | Section::Extra => {
                    if fields.len() != 2 {
                        return Err(perr(n, "expected `key<TAB>value`".into()));
                    }
                    let entry = (fields[0].to_string(), fields[1].to_string());
                    if section == Section::Config {
                        report.config.push(entry);
                    } else {
                        report.extra.push(entry);
                    }
                }
                Section::Metrics => match fields.as_slice() {
                    ["top1_species", v] => {
                        report.top1_species = parse_f64(v).ok_or_else(|| perr(n, format!("bad number {v:?}")))?;
                        saw_top1 = true;
                    }
                    ["level", name, v] => {
                        let acc = parse_f64(v).ok_or_else(|| perr(n, format!("bad number {v:?}")))?;
                        report.per_level.push((name.to_string(), acc));
                    }
                    _ => return Err(perr(n, "unrecognized metrics row".into())),
                },
                Section::Confusion => {
                    let cm = report.confusion.last_mut().expect("section opened with a matrix");
                    if fields[0] == "classes" && cm.class_names.is_empty() {
                        cm.class_names = fields[1..].iter().map(|s| s.to_string()).collect();
                        continue;
                    }
                    let k = cm.class_names.len();
                    if k == 0 || fields.len() != k + 1 || cm.counts.len() >= k || fields[0] != cm.class_names[cm.counts.len()] {
                        return Err(perr(n, "malformed confusion row".into()));
                    }
                    let row = fields[1..]
                        .iter()
                        .map(|c| c.parse::<u64>().map_err(|_| perr(n, format!("bad count {c:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    cm.counts.push(row);
                }
                Section::Trace => {
                    if !trace_header_seen {
                        if line != TRACE_HEADER {
                            return Err(perr(n, "expected trace column header".into()));
                        }
                        trace_header_seen = true;
                        continue;
                    }
                    if fields.len() != 8 {
                        return Err(perr(n, format!("expected 8 trace fields, found {}", fields.len())));
                    }
                    let num = |i: usize| parse_f64(fields[i]).ok_or_else(|| perr(n, format!("bad number {:?}", fields[i])));
                    report.trace.push(TraceRow {
                        stage: fields[0].to_string(),
                        step: fields[1].parse().map_err(|_| perr(n, format!("bad step {:?}", fields[1])))?,
                        total: num(2)?,
                        supervised: num(3)?,
                        coarse: num(4)?,
                        unsupervised: num(5)?,
                        mask_rate: num(6)?,
                        test_acc: if fields[7] == "-" { None } else { Some(num(7)?) },
                    });
                }
            }
        }
        if !saw_top1 {
            return Err(perr(eof, "missing top1_species".into()));
        }
        for cm in &report.confusion {
            if cm.counts.len() != cm.class_names.len() {
                return Err(perr(eof, format!("confusion matrix for {} is incomplete", cm.level_name)));
            }
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok()
}

/// One sweep cell's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub method: String,
    pub use_hier: bool,
    pub level: String,
    pub coarse_source: String,
    pub seed: u64,
    pub top1: f64,
    pub config_hash: String,
    pub data_hash: String,
}

const SUMMARY_MAGIC: &str = "#hierssl-summary v1";
const SUMMARY_HEADER: &str = "experiment\tmethod\tuse_hier\tlevel\tcoarse_source\tseed\ttop1\tconfig_hash\tdata_hash";

pub fn summary_to_text(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_MAGIC}\n{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.experiment, r.method, r.use_hier, r.level, r.coarse_source, r.seed, r.top1, r.config_hash, r.data_hash
        );
    }
    out
}

pub fn summary_from_text(text: &str, source: &str) -> Result<Vec<SummaryRow>> {
    let perr = |line: usize, msg: String| Error::parse(source, line, msg);
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(n, l)| *n == 1 || !l.starts_with('#'));
    match lines.next() {
        Some((_, l)) if l == SUMMARY_MAGIC => {}
        Some((n, _)) => return Err(perr(n, format!("expected `{SUMMARY_MAGIC}`"))),
        None => return Err(perr(1, "empty summary".into())),
    }
    match lines.next() {
        Some((_, l)) if l == SUMMARY_HEADER => {}
        Some((n, _)) => return Err(perr(n, "expected summary column header".into())),
        None => return Err(perr(2, "missing summary column header".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(perr(n, format!("expected 9 fields, found {}", f.len())));
        }
        rows.push(SummaryRow {
            experiment: f[0].to_string(),
            method: f[1].to_string(),
            use_hier: f[2].parse().map_err(|_| perr(n, format!("bad flag {:?}", f[2])))?,
            level: f[3].to_string(),
            coarse_source: f[4].to_string(),
            seed: f[5].parse().map_err(|_| perr(n, format!("bad seed {:?}", f[5])))?,
            top1: parse_f64(f[6]).ok_or_else(|| perr(n, format!("bad number {:?}", f[6])))?,
            config_hash: f[7].to_string(),
            data_hash: f[8].to_string(),
        });
    }
    Ok(rows)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    summary_from_text(&text, &path.display().to_string())
}

/// Concatenates summaries, keeping every row.
pub fn merge_summaries(parts: &[Vec<SummaryRow>]) -> Vec<SummaryRow> {
    parts.iter().flatten().cloned().collect()
}

/// Mean and sample standard deviation of top-1 per (method, use_hier, level,
/// coarse_source) group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub method: String,
    pub use_hier: bool,
    pub level: String,
    pub coarse_source: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Groups rows for reporting. Rows that share a seed must share a data hash
/// unless `force` is set, so that compared cells saw the same data.
pub fn aggregate(rows: &[SummaryRow], force: bool) -> Result<Vec<GroupStats>> {
    if !force {
        let mut by_seed: BTreeMap<u64, &SummaryRow> = BTreeMap::new();
        for r in rows {
            if let Some(first) = by_seed.insert(r.seed, r) {
                if first.data_hash != r.data_hash {
                    return Err(Error::HashMismatch(format!(
                        "seed {}: {} and {} used different data ({} vs {})",
                        r.seed, first.experiment, r.experiment, first.data_hash, r.data_hash
                    )));
                }
            }
        }
    }
    let mut groups: BTreeMap<(String, bool, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method.clone(), r.use_hier, r.level.clone(), r.coarse_source.clone()))
            .or_default()
            .push(r.top1);
    }
    Ok(groups
        .into_iter()
        .map(|((method, use_hier, level, coarse_source), v)| {
            let (mean, std) = mean_std(&v);
            GroupStats {
                method,
                use_hier,
                level,
                coarse_source,
                n: v.len(),
                mean,
                std,
            }
        })
        .collect())
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const AGGREGATE_MAGIC: &str = "#hierssl-aggregate v1";

pub fn aggregate_to_text(groups: &[GroupStats]) -> String {
    let mut out = format!("{AGGREGATE_MAGIC}\n");
    out.push_str("method\tuse_hier\tlevel\tcoarse_source\tn\tmean_top1\tstd_top1\n");
    for g in groups {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            g.method, g.use_hier, g.level, g.coarse_source, g.n, g.mean, g.std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport {
            id: "run-1".into(),
            config_hash: "abc".into(),
            data_hash: "def".into(),
            config: vec![("train.method".into(), "fixmatch".into()), ("train.lr".into(), "0.01".into())],
            top1_species: 0.1 + 0.2,
            per_level: vec![("Kingdom".into(), 1.0), ("Species".into(), 0.30000000000000004)],
            extra: vec![("filter.kept".into(), "17".into())],
            confusion: vec![ConfusionMatrix {
                level_name: "Kingdom".into(),
                class_names: vec!["A".into(), "B".into()],
                counts: vec![vec![3, 1], vec![0, 4]],
            }],
            trace: vec![
                TraceRow {
                    stage: "main".into(),
                    step: 1,
                    total: 2.5,
                    supervised: 1.0 / 3.0,
                    coarse: 1e-300,
                    unsupervised: 0.0,
                    mask_rate: 0.125,
                    test_acc: None,
                },
                TraceRow {
                    stage: "main".into(),
                    step: 2,
                    total: f64::NAN,
                    supervised: 0.1,
                    coarse: 0.2,
                    unsupervised: 0.3,
                    mask_rate: 1.0,
                    test_acc: Some(0.7),
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let r = report();
        let text = r.to_text().unwrap();
        let back = EvalReport::from_text(&text, "r").unwrap();
        assert_eq!(back.to_text().unwrap(), text);
        assert_eq!(back.top1_species.to_bits(), r.top1_species.to_bits());
        assert_eq!(back.trace[0].supervised.to_bits(), r.trace[0].supervised.to_bits());
        assert!(back.trace[1].total.is_nan());
        assert_eq!(back.confusion, r.confusion);
    }

    #[test]
    fn corrupt_reports() {
        let text = report().to_text().unwrap();
        let bad = text.replacen("#hierssl-report v1", "#hierssl-report v9", 1);
        assert!(matches!(EvalReport::from_text(&bad, "r"), Err(Error::Parse { line: 1, .. })));
        let bad = text.replace("B\t0\t4", "B\t0\tx");
        assert!(matches!(EvalReport::from_text(&bad, "r"), Err(Error::Parse { .. })));
        let bad = text.replace("[metrics]", "[metrix]");
        assert!(matches!(EvalReport::from_text(&bad, "r"), Err(Error::Parse { .. })));
    }

    fn row(exp: &str, seed: u64, data: &str, top1: f64) -> SummaryRow {
        SummaryRow {
            experiment: exp.into(),
            method: "baseline".into(),
            use_hier: true,
            level: "Phylum".into(),
            coarse_source: "U_in".into(),
            seed,
            top1,
            config_hash: "c".into(),
            data_hash: data.into(),
        }
    }

    #[test]
    fn summary_merge_and_aggregate() {
        let a = vec![row("a", 1, "d1", 0.5), row("b", 2, "d2", 0.7)];
        let b = vec![row("c", 3, "d3", 0.6)];
        let merged = merge_summaries(&[a.clone(), b.clone()]);
        assert_eq!(merged.len(), 3);
        let back = summary_from_text(&summary_to_text(&merged), "s").unwrap();
        assert_eq!(back, merged);
        let g = aggregate(&merged, false).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].n, 3);
        assert!((g[0].mean - 0.6).abs() < 1e-15);
        assert!((g[0].std - 0.1).abs() < 1e-12);

        let clash = merge_summaries(&[a, vec![row("d", 1, "other", 0.4)]]);
        assert!(matches!(aggregate(&clash, false), Err(Error::HashMismatch(_))));
        assert_eq!(aggregate(&clash, true).unwrap()[0].n, 3);
    }
}
