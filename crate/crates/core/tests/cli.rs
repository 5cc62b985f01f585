use std::path::Path;
use std::process::Command as Process;

use clap::CommandFactory;
use dykonem::cli::{run, Cli};

const SMALL_GEN: &[&str] = &[
    "gen.patients=40",
    "gen.doctors=8",
    "gen.hospitals=3",
    "gen.diseases=5",
    "gen.consultations=150",
    "gen.offline_visits=60",
    "gen.failure_rate=0.2",
    "gen.span_days=60",
];

const SMALL_MODEL: &[&str] = &[
    "model.entity_dim=8",
    "model.relation_dim=4",
    "model.attr_dim=4",
    "model.id_dim=4",
    "model.text_dim=8",
    "model.fusion_dim=16",
    "model.hidden=8",
    "train.epochs=2",
    "train.batch_size=32",
];

fn call(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("dykonem").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn sets(pairs: &[&str]) -> Vec<String> {
    pairs.iter().flat_map(|p| ["--set".to_string(), p.to_string()]).collect()
}

fn gen_small(dir: &Path) {
    let d = dir.display().to_string();
    let mut args = vec!["gen".to_string(), "--seed".into(), "7".into(), "--out".into(), d];
    args.extend(sets(SMALL_GEN));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, out) = call(&argv);
    assert_eq!(code, 0, "{out}");
}

fn train_small(data: &Path, model: &Path) -> String {
    let mut args = vec![
        "train".to_string(),
        "--data".into(),
        data.display().to_string(),
        "--model".into(),
        model.display().to_string(),
    ];
    args.extend(sets(SMALL_MODEL));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, out) = call(&argv);
    assert_eq!(code, 0, "{out}");
    out
}

fn row_value(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .and_then(|rest| rest.split('\t').next())
        .unwrap_or_else(|| panic!("no `{key}` row in\n{out}"))
        .parse()
        .unwrap()
}

#[test]
fn help_documents_every_flag() {
    let mut cli = Cli::command();
    cli.build();
    let subs: Vec<_> = cli
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .filter(|n| n != "help")
        .collect();
    assert_eq!(
        subs,
        ["gen", "train", "eval", "predict", "ablate", "curve", "gradcheck", "fuse-bench"]
    );
    for sub in cli.get_subcommands_mut().filter(|s| s.get_name() != "help") {
        let name = sub.get_name().to_string();
        let help = sub.render_long_help().to_string();
        for arg in sub.get_arguments() {
            let Some(long) = arg.get_long() else { continue };
            assert!(help.contains(&format!("--{long}")), "{name}: --{long} missing from help");
            assert!(
                arg.get_help().is_some() || arg.get_long_help().is_some(),
                "{name}: --{long} has no description"
            );
        }
        for required in ["--config", "--set", "--jobs"] {
            assert!(help.contains(required), "{name}: {required} missing");
        }
        let (code, out) = call(&[&name, "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("Usage"), "{name}");
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(call(&["bogus"]).0, 2);
    assert_eq!(call(&[]).0, 2);
    assert_eq!(call(&["gen", "--no-such-flag"]).0, 2);
    assert_eq!(call(&["gen", "--set", "gen.nope=1", "--out", "x"]).0, 2);
    assert_eq!(call(&["gen", "--set", "train.epochs=many", "--out", "x"]).0, 2);
    // Missing required path.
    assert_eq!(call(&["train"]).0, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.epochs=1\nnot a pair\n").unwrap();
    assert_eq!(call(&["gen", "--config", cfg.to_str().unwrap()]).0, 2);
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    let (code, _) = call(&["predict", "--data", missing.to_str().unwrap(), "--model", "m.bin"]);
    assert_eq!(code, 1);
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_dykonem");
    let status = Process::new(exe).arg("bogus").output().unwrap().status;
    assert_eq!(status.code(), Some(2));
    let out = Process::new(exe).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("fuse-bench"));
}

#[test]
fn gen_train_eval_predict_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model.dykm");
    gen_small(&data);
    for f in ["triples.tsv", "attributes.tsv", "consultations.tsv", "dialogues.tsv", "labels.tsv"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let out = train_small(&data, &model);
    assert!(model.exists());
    let trained_val = row_value(&out, "validation");

    let (d, m) = (data.to_str().unwrap(), model.to_str().unwrap());
    let (code, eval) = call(&["eval", "--data", d, "--model", m, "--subset", "validation"]);
    assert_eq!(code, 0);
    assert_eq!(row_value(&eval, "f1"), trained_val);
    for line in eval.lines() {
        assert_eq!(line.split('\t').count(), 3, "{line}");
    }

    let (code, grouped) = call(&["eval", "--data", d, "--model", m, "--subset", "all", "--group-by", "disease"]);
    assert_eq!(code, 0);
    assert!(grouped.lines().any(|l| l.starts_with("group\t")));
    assert_eq!(call(&["eval", "--data", d, "--model", m, "--subset", "nope"]).0, 2);

    let (code, pred) = call(&["predict", "--data", d, "--model", m]);
    assert_eq!(code, 0);
    let rows: Vec<Vec<&str>> = pred.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 150);
    for r in &rows {
        assert_eq!(r.len(), 3);
        let p: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(r[2] == "0" || r[2] == "1");
    }
    // Stable across invocations.
    assert_eq!(call(&["predict", "--data", d, "--model", m]).1, pred);

    let (code, curve) = call(&["curve", "--data", d, "--model", m, "--max-k", "3"]);
    assert_eq!(code, 0);
    let ks: Vec<&str> = curve.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(ks, ["1", "2", "3"]);
    assert_eq!(call(&["curve", "--data", d, "--model", m, "--truncate", "days"]).0, 2);
}

#[test]
fn ablate_with_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data);
    let mut args = vec![
        "ablate".to_string(),
        "--data".into(),
        data.display().to_string(),
        "--runs".into(),
        "2".into(),
        "--jobs".into(),
        "2".into(),
    ];
    args.extend(sets(SMALL_MODEL));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, out) = call(&argv);
    assert_eq!(code, 0, "{out}");
    let modes: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(modes, ["A", "B", "C", "D", "full"]);
    // Thread count does not change results.
    let single: Vec<String> = argv.iter().map(|a| if *a == "2" { "1".to_string() } else { a.to_string() }).collect();
    let mut single_args: Vec<&str> = single.iter().map(String::as_str).collect();
    // Restore --runs 2 (only --jobs drops to 1).
    single_args[4] = "2";
    assert_eq!(call(&single_args).1, out);
}

#[test]
fn gradcheck_and_fuse_bench() {
    let (code, out) = call(&["gradcheck", "--block", "linear", "--block", "classifier"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().all(|l| l.contains("\tPASS\t")));
    assert_eq!(call(&["gradcheck", "--block", "nonsense"]).0, 2);

    let (code, out) = call(&["fuse-bench", "--n", "8", "--d", "64", "--seeds", "20"]);
    assert_eq!(code, 0);
    let methods: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(methods, ["tensor_sketch", "random_maclaurin"]);
    assert_eq!(call(&["fuse-bench", "--d", "0"]).0, 2);
}
