use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "gen.level_names=Kingdom,Phylum,Genus,Species",
    "--set",
    "gen.level_counts=2,3,6,10",
    "--set",
    "gen.sigmas=0.7,0.7,0.7,0.7",
    "--set",
    "gen.dim=8",
    "--set",
    "train.steps=200",
];

fn hierssl(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierssl"))
        .args(args)
        .env("HIERSSL_OUT_ROOT", out_root)
        .output()
        .unwrap()
}

fn ok(args: &[&str], root: &Path) -> Output {
    let out = hierssl(args, root);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn train_rerun_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("run");
    let out_s = out.to_str().unwrap();
    let args = with_small(&["train", "--set", "train.method=fixmatch", "--out", out_s]);
    let first = ok(&args, root.path());
    assert!(first.stdout.is_empty(), "stdout should stay clean");
    let files = ["model.ckpt", "report.txt", "config.resolved"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| read(&out.join(f))).collect();
    ok(&args, root.path());
    for (f, b) in files.iter().zip(&before) {
        assert_eq!(&read(&out.join(f)), b, "{f} changed on rerun");
    }
    let report = String::from_utf8(before[1].clone()).unwrap();
    let ckpt = String::from_utf8(before[0].clone()).unwrap();
    let hash = report.lines().find_map(|l| l.strip_prefix("config_hash\t")).unwrap();
    assert!(ckpt.contains(hash));
}

#[test]
fn gen_train_eval_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    ok(&with_small(&["gen-data", "--out", data.to_str().unwrap()]), root.path());
    assert!(data.join("taxonomy.csv").exists());
    assert!(data.join("manifest.tsv").exists());

    let run = root.path().join("run");
    let data_set = format!("data.dir={}", data.display());
    ok(
        &with_small(&["train", "--set", &data_set, "--out", run.to_str().unwrap()]),
        root.path(),
    );
    let ev = root.path().join("eval");
    ok(
        &with_small(&[
            "eval",
            "--set",
            &data_set,
            "--model",
            run.join("model.ckpt").to_str().unwrap(),
            "--out",
            ev.to_str().unwrap(),
        ]),
        root.path(),
    );
    let top1 = |p: &Path| -> String {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .find(|l| l.starts_with("top1_species"))
            .unwrap()
            .to_string()
    };
    assert_eq!(top1(&run.join("report.txt")), top1(&ev.join("report.txt")));
}

#[test]
fn filter_command_writes_report() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("f");
    ok(&with_small(&["filter", "--out", out.to_str().unwrap()]), root.path());
    let text = fs::read_to_string(out.join("filter_report.tsv")).unwrap();
    assert!(text.starts_with("#hierssl-filter v1\n#config_hash\t"));
    assert!(text.lines().skip(1).any(|l| l.ends_with("\tkeep") || l.ends_with("\treject")));
}

#[test]
fn sweep_and_report_aggregate() {
    let root = tempfile::tempdir().unwrap();
    let sweep = root.path().join("sweep");
    ok(
        &with_small(&["sweep", "--grid", "ood", "--seeds", "1,2", "--jobs", "2", "--out", sweep.to_str().unwrap()]),
        root.path(),
    );
    let summary = fs::read_to_string(sweep.join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6);
    let agg = root.path().join("agg");
    ok(
        &["report", sweep.join("summary.tsv").to_str().unwrap(), "--out", agg.to_str().unwrap()],
        root.path(),
    );
    let table = fs::read_to_string(agg.join("aggregate.tsv")).unwrap();
    assert!(table.starts_with("#hierssl-aggregate v1\n#config_hash\t"));
    assert_eq!(table.lines().filter(|l| l.starts_with("baseline\t")).count(), 3);
    assert!(table.contains("\tfiltered\t2\t"));
}

#[test]
fn errors_map_to_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| hierssl(args, root.path()).status.code();
    assert_eq!(code(&["train", "--set", "train.method=mixmatch"]), Some(2));
    assert_eq!(code(&["train", "--set", "no.such.key=1"]), Some(2));
    let missing = root.path().join("nothing");
    let set = format!("data.dir={}", missing.display());
    assert_eq!(code(&["train", "--set", &set]), Some(3));
    assert_eq!(code(&["frobnicate"]), Some(2));
}
