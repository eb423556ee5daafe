use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn dotnmt(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_dotnmt"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(stdin.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn noise_without_noise_is_identity() {
    let o = dotnmt(
        &["--seed", "1", "noise", "-wd", "0", "-wb", "0", "-sk", "1"],
        "a b c\n",
    );
    assert_eq!(stdout(&o), "a b c\n");
}

#[test]
fn noise_is_seeded_and_keeps_blank_lines() {
    let input = "the quick brown fox jumps over the lazy dog\n\none two three four five six\n";
    let a = stdout(&dotnmt(&["--seed", "3", "noise"], input));
    let b = stdout(&dotnmt(
        &["--seed", "3", "noise", "--word-dropout", "0.1"],
        input,
    ));
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 3);
    assert_eq!(a.lines().nth(1), Some(""));
    let c = stdout(&dotnmt(&["--seed", "4", "noise", "--mask", "MASK"], input));
    assert_ne!(a, c);
}

#[test]
fn omitted_seed_is_printed() {
    let o = dotnmt(&["noise"], "a b c\n");
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(o.status.success());
    assert!(err.lines().any(|l| l.starts_with("seed: ")), "{err}");
}

#[test]
fn bad_noise_flags_fail() {
    assert!(!dotnmt(&["noise", "-wd", "abc"], "").status.success());
    let o = dotnmt(&["noise", "-wd", "1.5"], "a\n");
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("wd"));
}

fn write_corpus(dir: &Path, n: usize) {
    let src: String = (0..n).map(|i| format!("s{i} a b c d\n")).collect();
    let tgt: String = (0..n).map(|i| format!("t{i} x y\n")).collect();
    fs::write(dir.join("c.src"), src).unwrap();
    fs::write(dir.join("c.tgt"), tgt).unwrap();
}

#[test]
fn build_doubles_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 10);
    let (src, tgt) = (dir.path().join("c.src"), dir.path().join("c.tgt"));
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = dotnmt(
            &[
                "--seed",
                "5",
                "build",
                "--source",
                p(&src),
                "--target",
                p(&tgt),
                "--out-dir",
                p(&out),
            ],
            "",
        );
        let manifest: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(manifest["pairs"], 10);
        assert_eq!(manifest["denoising_examples"], 20);
        outs.push(out);
    }
    for f in [
        "m_src.input",
        "m_src.output",
        "m_tgt.input",
        "manifest.json",
        "vocab.txt",
    ] {
        assert_eq!(
            fs::read(outs[0].join(f)).unwrap(),
            fs::read(outs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn build_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = dotnmt(
        &[
            "build",
            "--source",
            p(&missing),
            "--target",
            p(&missing),
            "--out-dir",
            p(dir.path()),
        ],
        "",
    );
    assert!(!o.status.success());
    fs::write(dir.path().join("a"), "1\n2\n3\n4\n5\n").unwrap();
    fs::write(dir.path().join("b"), "1\n2\n3\n4\n").unwrap();
    let o = dotnmt(
        &[
            "build",
            "--source",
            p(&dir.path().join("a")),
            "--target",
            p(&dir.path().join("b")),
            "--out-dir",
            p(dir.path()),
        ],
        "",
    );
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('5') && err.contains('4'), "{err}");
}

#[test]
fn bleu_of_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("h");
    fs::write(&f, "the cat sat on the mat\nhello there world again\n").unwrap();
    let out = stdout(&dotnmt(&["bleu", p(&f), p(&f)], ""));
    assert!(out.starts_with("BLEU = 100.00"), "{out}");
}

#[test]
fn bpe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = "lower lowest newer newest\nwider widest low new\n";
    let corpus = dir.path().join("corpus");
    let codes = dir.path().join("codes");
    fs::write(&corpus, text).unwrap();
    stdout(&dotnmt(
        &["bpe-learn", "--merges", "20", "-o", p(&codes), p(&corpus)],
        "",
    ));
    let seg = stdout(&dotnmt(&["bpe-apply", "--codes", p(&codes)], text));
    assert_ne!(seg, text);
    assert_eq!(stdout(&dotnmt(&["bpe-decode"], &seg)), text);
}

#[test]
fn signtest_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    fs::write(&a, "2\n2\n2\n2\n2\n2\n2\n2\n0\n0\n").unwrap();
    fs::write(&b, "1\n".repeat(10)).unwrap();
    let out = stdout(&dotnmt(&["signtest", p(&a), p(&b)], ""));
    assert!(out.contains("wins = 8, losses = 2"), "{out}");
    assert!(out.contains("p = 0.109375"), "{out}");
}

#[test]
fn train_rejects_too_few_steps() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 10);
    let data = dir.path().join("data");
    stdout(&dotnmt(
        &[
            "--seed",
            "1",
            "build",
            "--source",
            p(&dir.path().join("c.src")),
            "--target",
            p(&dir.path().join("c.tgt")),
            "--out-dir",
            p(&data),
        ],
        "",
    ));
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "total_steps = 2\n").unwrap();
    let o = dotnmt(
        &[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out-dir",
            p(&dir.path().join("run")),
        ],
        "",
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("total_steps"));
}

#[test]
fn baseline_training_skips_denoising_and_decodes() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 20);
    let data = dir.path().join("data");
    stdout(&dotnmt(
        &[
            "--seed",
            "2",
            "build",
            "--source",
            p(&dir.path().join("c.src")),
            "--target",
            p(&dir.path().join("c.tgt")),
            "--out-dir",
            p(&data),
        ],
        "",
    ));
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "# tiny\nseed = 3\ntotal_steps = 12\nmodel_dim = 8\nheads = 2\nffn_dim = 16\nlayers = 1\ncheckpoint_every = 4\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = stdout(&dotnmt(
        &[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out-dir",
            p(&run),
            "--mode",
            "baseline",
        ],
        "",
    ));
    assert!(out.starts_with("finished 12 steps"), "{out}");
    let log = fs::read_to_string(run.join("train.log.jsonl")).unwrap();
    let steps: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|r| r["event"] == "step")
        .collect();
    assert_eq!(steps.len(), 12);
    assert!(steps.iter().all(|r| r["phase"] == "finetune"));

    let decoded = stdout(&dotnmt(
        &[
            "decode",
            "--checkpoint",
            p(&run.join("final.ckpt")),
            "--vocab",
            p(&data.join("vocab.txt")),
            "--beam",
            "2",
        ],
        "s1 a b c d\ns2 a b\n",
    ));
    assert_eq!(decoded.lines().count(), 2);
}

#[test]
fn synth_writes_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("task");
    let o = dotnmt(
        &[
            "--seed",
            "1",
            "synth",
            "--out-dir",
            p(&out),
            "--train-pairs",
            "30",
            "--test-pairs",
            "5",
        ],
        "",
    );
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(out.join("train.src"))
            .unwrap()
            .lines()
            .count(),
        30
    );
    assert_eq!(
        fs::read_to_string(out.join("test.tgt"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}
