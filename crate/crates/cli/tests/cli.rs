use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn crovca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crovca")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = crovca(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

/// Synthetic data plus a small trained model in `dir`.
fn prepare(dir: &Path) {
    ok(&[
        "synth",
        "--out",
        &p(dir, ""),
        "--classes",
        "4",
        "--dim",
        "16",
        "--train",
        "300",
        "--db",
        "200",
        "--query",
        "20",
        "--seed",
        "3",
    ]);
    train(dir, "model.cvck");
}

fn train(dir: &Path, out: &str) -> String {
    ok(&[
        "train",
        "--views",
        &p(dir, "train.cvca"),
        "--bits",
        "12",
        "--epochs",
        "2",
        "--batch",
        "64",
        "--width",
        "32",
        "--seed",
        "7",
        "--out",
        &p(dir, out),
    ])
}

#[test]
fn help_shows_table_defaults() {
    let help = ok(&["train", "--help"]);
    for needle in [
        "[default: 16]",
        "[default: 5]",
        "[default: 256]",
        "1e-3 small",
        "1e-2 small",
        "[default: 0.1]",
    ] {
        assert!(help.contains(needle), "missing {needle}");
    }
}

#[test]
fn pipeline_and_piped_eval_match_direct_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    ok(&[
        "encode",
        "--model",
        &p(d, "model.cvck"),
        "--input",
        &p(d, "db.cvca"),
        "--out",
        &p(d, "db.cvcd"),
    ]);
    let stats = ok(&["stats", "--codes", &p(d, "db.cvcd")]);
    assert!(stats.contains("unique_codes="), "{stats}");

    let rankings = ok(&[
        "query",
        "--db",
        &p(d, "db.cvcd"),
        "--queries",
        &p(d, "query.cvca"),
        "--model",
        &p(d, "model.cvck"),
        "--measure",
        "ah",
        "--k",
        "100",
    ]);
    assert!(rankings.starts_with("# rankings queries=20 db_rows=200 k=100"));

    let mut child = Command::new(env!("CARGO_BIN_EXE_crovca"))
        .args([
            "eval",
            "--metric",
            "map@100",
            "--query-labels",
            &p(d, "query.cvlb"),
            "--db-labels",
            &p(d, "db.cvlb"),
            "--rankings",
            "-",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(rankings.as_bytes()).unwrap();
    let piped = child.wait_with_output().unwrap();
    assert!(piped.status.success());

    let direct = ok(&[
        "eval",
        "--metric",
        "map@100",
        "--query-labels",
        &p(d, "query.cvlb"),
        "--db-labels",
        &p(d, "db.cvlb"),
        "--db",
        &p(d, "db.cvcd"),
        "--queries",
        &p(d, "query.cvca"),
        "--model",
        &p(d, "model.cvck"),
        "--measure",
        "ah",
        "--threads",
        "1",
    ]);
    assert_eq!(String::from_utf8(piped.stdout).unwrap(), direct);
    assert!(direct.starts_with("metric=map@100 k=100 value="));
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let log = train(d, "again.cvck");
    assert!(log.contains("summary epoch=2"), "{log}");
    assert_eq!(
        std::fs::read(d.join("model.cvck")).unwrap(),
        std::fs::read(d.join("again.cvck")).unwrap()
    );
}

#[test]
fn guard_failures_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let sup = crovca(&[
        "train",
        "--views",
        &p(d, "train.cvca"),
        "--mode",
        "sup",
        "--out",
        &p(d, "x.cvck"),
    ]);
    assert_eq!(sup.status.code(), Some(2));
    assert!(!d.join("x.cvck").exists());

    ok(&[
        "encode",
        "--model",
        &p(d, "model.cvck"),
        "--input",
        &p(d, "db.cvca"),
        "--out",
        &p(d, "db.cvcd"),
    ]);
    let query = |measure: &str, k: &str| {
        crovca(&[
            "query",
            "--db",
            &p(d, "db.cvcd"),
            "--queries",
            &p(d, "query.cvca"),
            "--model",
            &p(d, "model.cvck"),
            "--measure",
            measure,
            "--k",
            k,
        ])
    };
    assert_eq!(query("h", "0").status.code(), Some(2));
    let symbce = query("symbce", "5");
    assert_eq!(symbce.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&symbce.stderr).contains("capability"));

    ok(&[
        "encode",
        "--model",
        &p(d, "model.cvck"),
        "--input",
        &p(d, "db.cvca"),
        "--out",
        &p(d, "db.cvcd"),
        "--logits",
    ]);
    assert!(query("symbce", "5").status.success());

    let missing = crovca(&["stats", "--codes", &p(d, "nope.cvcd")]);
    assert_eq!(missing.status.code(), Some(2));
}
