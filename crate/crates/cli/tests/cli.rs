//! End-to-end runs of the `gazecot` binary.

use std::path::Path;
use std::process::{Command, Output};

fn gazecot(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazecot"))
        .args(args)
        .env("GAZECOT_OUT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, scenario: &str, n: &str) {
    let o = gazecot(
        &[
            "generate",
            "--scenario",
            scenario,
            "--n",
            n,
            "--seed",
            "1",
            "--out",
            p(dir),
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_and_bad_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gazecot(&["--help"], tmp.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["preprocess", "train", "eval", "visualize", "generate"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    assert_eq!(code(&gazecot(&["train", "--bogus"], tmp.path())), 1);
    assert_eq!(
        code(&gazecot(
            &["generate", "--scenario", "spiral", "--n", "2", "--out", "x"],
            tmp.path()
        )),
        1
    );
}

#[test]
fn preprocess_counts_sessions_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    generate(&corpus, "separable", "6");
    let (a, b) = (tmp.path().join("a.jsonl"), tmp.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = gazecot(
            &[
                "preprocess",
                "--sessions",
                p(&corpus),
                "--out",
                p(out),
                "--grid-g",
                "8",
                "--k",
                "3",
            ],
            tmp.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("K histogram"));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn preprocess_fails_on_empty_dir_and_bad_session() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = tmp.path().join("s.jsonl");
    assert_eq!(
        code(&gazecot(
            &["preprocess", "--sessions", p(&empty), "--out", p(&out)],
            tmp.path()
        )),
        1
    );

    let corpus = tmp.path().join("corpus");
    generate(&corpus, "separable", "3");
    let victim = std::fs::read_dir(&corpus)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|d| d.is_dir())
        .unwrap();
    std::fs::write(
        victim.join("fixations.csv"),
        "t_start_ms,t_end_ms,x_norm,y_norm\n5,1,0.5,0.5\n",
    )
    .unwrap();
    let o = gazecot(
        &[
            "preprocess",
            "--sessions",
            p(&corpus),
            "--out",
            p(&out),
            "--grid-g",
            "8",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    generate(&corpus, "separable", "20");
    let sup = tmp.path().join("sup.jsonl");
    let o = gazecot(
        &[
            "preprocess",
            "--sessions",
            p(&corpus),
            "--out",
            p(&sup),
            "--grid-g",
            "8",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let cfg = tmp.path().join("train.toml");
    std::fs::write(
        &cfg,
        "batch_size = 2\nd_model = 16\nn_heads = 2\nd_ff = 32\nn_layers = 1\n",
    )
    .unwrap();

    let base = [
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&corpus),
        "--supervision",
        p(&sup),
        "--seed",
        "4",
    ];
    let stage1 = |out: &Path| {
        let mut args = base.to_vec();
        args.extend(["--stage", "1", "--steps", "3", "--out", p(out)]);
        gazecot(&args, tmp.path())
    };
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    assert_eq!(code(&stage1(&r1)), 0);
    assert_eq!(code(&stage1(&r2)), 0);
    let c1 = std::fs::read(r1.join("stage1.gzck")).unwrap();
    assert_eq!(c1, std::fs::read(r2.join("stage1.gzck")).unwrap());
    assert!(r1.join("metrics_stage1.jsonl").exists());

    let mut no_init = base.to_vec();
    no_init.extend(["--stage", "2", "--steps", "1"]);
    let o = gazecot(&no_init, tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage order"));

    // Stage 1 leaves the classifier head at zero, so every score is 0.5.
    let ckpt = r1.join("stage1.gzck");
    let eval = |out: &Path| {
        gazecot(
            &[
                "eval",
                "--ckpt",
                p(&ckpt),
                "--data",
                p(&corpus),
                "--split",
                "train",
                "--out",
                p(out),
            ],
            tmp.path(),
        )
    };
    let (e1, e2) = (tmp.path().join("e1.jsonl"), tmp.path().join("e2.jsonl"));
    assert_eq!(code(&eval(&e1)), 0);
    assert_eq!(code(&eval(&e2)), 0);
    let report = std::fs::read_to_string(&e1).unwrap();
    assert_eq!(report, std::fs::read_to_string(&e2).unwrap());
    let v: serde_json::Value = serde_json::from_str(report.trim()).unwrap();
    assert!((v["macro_auroc"].as_f64().unwrap() - 0.5).abs() <= 0.05);

    let mut s2 = base.to_vec();
    let out2 = tmp.path().join("s2");
    s2.extend([
        "--stage",
        "2",
        "--steps",
        "2",
        "--init-from",
        p(&ckpt),
        "--out",
        p(&out2),
    ]);
    assert_eq!(code(&gazecot(&s2, tmp.path())), 0);
    let o = gazecot(
        &[
            "eval",
            "--ckpt",
            p(&out2.join("stage2.gzck")),
            "--data",
            p(&corpus),
            "--mode",
            "parsed_text",
            "--variant",
            "original",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("eval_parsed_text.jsonl").exists());
    let o = gazecot(
        &[
            "eval",
            "--ckpt",
            p(&out2.join("stage2.gzck")),
            "--data",
            p(&corpus),
            "--variant",
            "random",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_rejects_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    generate(&corpus, "separable", "3");
    let o = gazecot(
        &["eval", "--ckpt", p(&tmp.path().join("nope.gzck")), "--data", p(&corpus)],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn visualize_writes_four_steps_and_a_strip() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    generate(&corpus, "order_sensitive", "2");
    let session = std::fs::read_dir(&corpus)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|d| d.is_dir())
        .unwrap();
    let (a, b) = (tmp.path().join("va"), tmp.path().join("vb"));
    for out in [&a, &b] {
        let o = gazecot(
            &["visualize", "--session", p(&session), "--out", p(out), "--grid-g", "8"],
            tmp.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["step_1.png", "step_2.png", "step_3.png", "step_4.png", "strip.png"]
    );
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap());
    }
}
