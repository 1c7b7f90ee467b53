use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regionprompt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn metric<'a>(report: &'a str, name: &str, split: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| {
            let mut f = l.split('\t');
            (f.next() == Some(name) && f.next() == Some(split)).then(|| f.next().unwrap())
        })
        .unwrap_or_else(|| panic!("no {name} {split} in\n{report}"))
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = ok(&["synth", "--out", p(&data)]);
    assert_eq!(metric(&out, "records", "train"), "2000");
    assert_eq!(metric(&out, "records", "eval"), "2500");

    let ck1 = dir.path().join("a.ckpt");
    let ck2 = dir.path().join("b.ckpt");
    let train = ok(&["train", "--data", p(&data), "--out", p(&ck1)]);
    assert_eq!(train.lines().filter(|l| l.starts_with("final_loss")).count(), 5);
    ok(&["train", "--data", p(&data), "--out", p(&ck2)]);
    assert_eq!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap());

    let report = ok(&["eval", "--data", p(&data), "--checkpoint", p(&ck1)]);
    assert_eq!(metric(&report, "count", "novel"), "500");
    assert_eq!(metric(&report, "count", "negative"), "1000");
    assert_eq!(metric(&report, "config_hash", "all"), metric(&train, "config_hash", "all"));

    let emb = dir.path().join("emb.txt");
    let exp = ok(&["export", "--data", p(&data), "--checkpoint", p(&ck1), "--out", p(&emb)]);
    assert_eq!(metric(&exp, "classes", "all"), "30");
    let via = ok(&["eval", "--data", p(&data), "--embeddings", p(&emb)]);
    for (m, s) in [("top1", "base"), ("top1", "novel"), ("top5", "novel"), ("neg_max_prob", "negative")] {
        assert_eq!(metric(&via, m, s), metric(&report, m, s));
    }

    let novel = dir.path().join("novel.txt");
    let exp = ok(&["export", "--data", p(&data), "--checkpoint", p(&ck1), "--out", p(&novel), "--split", "novel"]);
    assert_eq!(metric(&exp, "classes", "novel"), "10");

    let rows = ok(&["ablate", "--data", p(&data), "--tables", "position,context_len"]);
    assert_eq!(rows.lines().count(), 1 + 6);
    assert!(rows.lines().all(|l| l.split('\t').count() == 9));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| run(args).status.code();
    assert_eq!(code(&["synth", "--out", p(dir.path()), "--set", "temperature=0"]), Some(2));
    assert_eq!(code(&["synth", "--out", p(dir.path()), "--set", "no_such_key=1"]), Some(2));
    assert_eq!(code(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&dir.path().join("x"))]), Some(3));
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"DPRO\x09\0\0\0").unwrap();
    std::fs::write(dir.path().join("tokens.txt"), "D_w 2\n").unwrap();
    std::fs::write(dir.path().join("eval.jsonl"), "").unwrap();
    assert_eq!(code(&["eval", "--data", p(dir.path()), "--checkpoint", p(&bad)]), Some(3));
    assert_eq!(
        code(&["eval", "--data", p(dir.path()), "--checkpoint", p(&bad), "--set", "lr=0.1"]),
        Some(2)
    );
    assert_eq!(code(&["ablate", "--data", p(dir.path()), "--tables", "nope"]), Some(2));
}

#[test]
fn gradcheck_passes_at_defaults() {
    let out = ok(&["gradcheck", "--instances", "3"]);
    assert_eq!(metric(&out, "passed", "all"), "true");
    assert_eq!(out.lines().filter(|l| l.starts_with("max_rel_error")).count(), 3);
}
