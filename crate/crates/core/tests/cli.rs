use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use counterbias::metrics::{aggregate_inputs, MismatchCount, TaskInput};
use counterbias::model::{seeded_rng, ClassifierParams, Model, Vocabulary};
use counterbias::training::init_model;
use counterbias::transform::{read_paired, write_paired, PairedSample};
use tempfile::TempDir;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_counterbias"))
        .args(args)
        .current_dir(cwd)
        .env_remove("COUNTERBIAS_DATA_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const GENDERED: &str = r#"{"id":"a","text":"dada khub bhalo","label":1}
{"id":"b","text":"ma Aamake bhalobaese","label":1}
{"id":"c","text":"Aapu raeg Aaech","label":0}
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_bundled_data() {
    let tmp = TempDir::new().unwrap();
    let o = bin(&["validate"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for line in [
        "terms\t1051",
        "names\t30 male, 30 female",
        "counterpart_only\t25",
        "asymmetric\t0",
        "gender_conflicts\t0",
        "names_in_lexicon\t5",
        "ok",
    ] {
        assert!(out.lines().any(|l| l == line), "missing `{line}` in\n{out}");
    }
}

#[test]
fn validate_failures() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "loop.tsv", "baba\tmale\tbaba\n");
    let o = bin(&["validate", "--lexicon", "loop.tsv"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("baba"), "{}", stderr(&o));

    write(
        tmp.path(),
        "conflict.tsv",
        "baba\tmale\tbap\nbap\tmale\tbaba\n",
    );
    let o = bin(&["validate", "--lexicon", "conflict.tsv"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("share a gender"));

    let o = bin(&["validate", "--lexicon", "missing.tsv"], tmp.path());
    assert_eq!(code(&o), 2);
    let o = bin(&["validate", "--gazetteer", "missing.tsv"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn data_dir_override() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "lexicon.tsv",
        "baba\tmale\tma\nma\tfemale\tbaba\n",
    );
    write(tmp.path(), "gazetteer.tsv", "kamal\tmale\nrupa\tfemale\n");
    let o = Command::new(env!("CARGO_BIN_EXE_counterbias"))
        .arg("validate")
        .env("COUNTERBIAS_DATA_DIR", tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().any(|l| l == "terms\t2"));
}

#[test]
fn transform_outputs_and_determinism() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.jsonl", GENDERED);
    let o = bin(&["transform", "c.jsonl", "--out", "t1"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read(tmp.path().join("t1/pairs.jsonl")).unwrap();
    let pairs = read_paired(&text[..]).unwrap();
    assert_eq!(pairs.len(), 3);
    assert!(pairs.iter().map(|p| p.variants.len()).sum::<usize>() >= 3);
    assert!(pairs.iter().all(|p| !p.variants.is_empty()));
    assert!(stderr(&o).contains("kept 3 originals"));

    let o = bin(&["transform", "c.jsonl", "--out", "t2"], tmp.path());
    assert_eq!(code(&o), 0);
    for f in ["pairs.jsonl", "manifest.json"] {
        assert_eq!(
            fs::read(tmp.path().join("t1").join(f)).unwrap(),
            fs::read(tmp.path().join("t2").join(f)).unwrap(),
            "{f}"
        );
    }
    let entries: Vec<_> = fs::read_dir(tmp.path().join("t1")).unwrap().collect();
    assert_eq!(entries.len(), 2);
    // input untouched
    assert_eq!(
        fs::read_to_string(tmp.path().join("c.jsonl")).unwrap(),
        GENDERED
    );
}

#[test]
fn transform_non_gendered_and_malformed() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "plain.jsonl",
        "{\"id\":\"1\",\"text\":\"Aaj brsiT hebe\",\"label\":0}\n",
    );
    let o = bin(&["transform", "plain.jsonl", "--out", "t"], tmp.path());
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("warning"));
    assert_eq!(fs::read(tmp.path().join("t/pairs.jsonl")).unwrap(), b"");

    write(
        tmp.path(),
        "bad.jsonl",
        "{\"id\":\"1\",\"text\":\"ma\",\"label\":0}\n{\"id\":\"2\",\"text\":\n",
    );
    let o = bin(&["transform", "bad.jsonl", "--out", "b"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = bin(&["transform", "absent.jsonl", "--out", "b"], tmp.path());
    assert_eq!(code(&o), 2);
}

fn transformed(tmp: &Path) {
    write(tmp, "c.jsonl", GENDERED);
    let o = bin(&["transform", "c.jsonl", "--out", "t"], tmp);
    assert_eq!(code(&o), 0);
}

fn loss_rows(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,ce,gb,joint"));
    lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn train_jlo_writes_epoch_rows() {
    let tmp = TempDir::new().unwrap();
    transformed(tmp.path());
    let o = bin(
        &["train", "t/pairs.jsonl", "--strategy", "jlo", "--out", "m"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = loss_rows(&tmp.path().join("m/loss.csv"));
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().any(|r| r[2] > 0.0));
    assert!(tmp.path().join("m/checkpoint.json").exists());
    assert!(tmp.path().join("m/manifest.json").exists());

    let o = bin(
        &[
            "train",
            "t/pairs.jsonl",
            "--strategy",
            "jlo",
            "--lambda",
            "0",
            "--epochs",
            "4",
            "--out",
            "m0",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let rows = loss_rows(&tmp.path().join("m0/loss.csv"));
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r[3], r[1]);
    }
}

#[test]
fn train_zero_shot_is_seeded_init() {
    let tmp = TempDir::new().unwrap();
    transformed(tmp.path());
    let o = bin(
        &[
            "train",
            "t/pairs.jsonl",
            "--strategy",
            "zero_shot",
            "--seed",
            "7",
            "--out",
            "z",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let saved = Model::load(tmp.path().join("z/checkpoint.json")).unwrap();
    let pairs = read_paired(&fs::read(tmp.path().join("t/pairs.jsonl")).unwrap()[..]).unwrap();
    let init = init_model(&pairs, 32, 2, 0.2, 7).unwrap();
    assert_eq!(saved.params, init.params);
    assert_eq!(saved.vocab, init.vocab);
    let rows = loss_rows(&tmp.path().join("z/loss.csv"));
    assert!(rows.is_empty());
}

#[test]
fn train_rejects_bad_config() {
    let tmp = TempDir::new().unwrap();
    transformed(tmp.path());
    let o = bin(
        &[
            "train",
            "t/pairs.jsonl",
            "--strategy",
            "bogus",
            "--out",
            "x",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus"));
    let o = bin(
        &[
            "train",
            "t/pairs.jsonl",
            "--strategy",
            "fod",
            "--batch-size",
            "0",
            "--out",
            "x",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    let o = bin(&["train", "t/pairs.jsonl", "--out", "x"], tmp.path());
    assert_eq!(code(&o), 1, "missing required flag is a usage error");
}

/// Two-token model: "pos" predicts class 1, "neg" class 0.
fn lookup_model() -> Model {
    let vocab = Vocabulary::from_tokens(["pos", "neg"]).unwrap();
    let mut params = ClassifierParams::init(vocab.len(), 2, 2, 0.0, &mut seeded_rng(0)).unwrap();
    params.embedding.data = vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    params.head_weights.data = vec![0.0, 1.0, 1.0, 0.0];
    params.head_bias = vec![0.0, 0.0];
    Model {
        vocab,
        params,
        seed: 0,
        strategy: Some("fod".into()),
    }
}

fn pairs_with(mismatches: usize, total: usize) -> Vec<PairedSample> {
    (0..total)
        .map(|i| PairedSample {
            pair_id: i.to_string(),
            label: 1,
            original: "pos".split(' ').collect(),
            variants: vec![if i < mismatches { "neg" } else { "pos" }
                .split(' ')
                .collect()],
            canonical_variant: 0,
        })
        .collect()
}

fn write_pairs(dir: &Path, name: &str, pairs: &[PairedSample]) {
    let mut buf = Vec::new();
    write_paired(&mut buf, pairs).unwrap();
    fs::write(dir.join(name), buf).unwrap();
}

fn report_cell(dir: &Path, column: &str) -> String {
    let text = fs::read_to_string(dir.join("report.csv")).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let idx = r
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == column)
        .unwrap();
    r.records().next().unwrap().unwrap()[idx].to_owned()
}

#[test]
fn evaluate_report_cells() {
    let tmp = TempDir::new().unwrap();
    lookup_model().save(tmp.path().join("ckpt.json")).unwrap();

    write_pairs(tmp.path(), "tox.jsonl", &pairs_with(528, 7057));
    let o = bin(
        &[
            "evaluate",
            "ckpt.json",
            "tox.jsonl",
            "--task",
            "toxicity",
            "--out",
            "e1",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        report_cell(&tmp.path().join("e1"), "bias_percentage"),
        "7.48"
    );
    assert_eq!(
        report_cell(&tmp.path().join("e1"), "normalized_bias_score"),
        ""
    );

    write_pairs(tmp.path(), "hate.jsonl", &pairs_with(36, 10034));
    let o = bin(
        &[
            "evaluate",
            "ckpt.json",
            "hate.jsonl",
            "--baseline-mismatches",
            "525",
            "--out",
            "e2",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        report_cell(&tmp.path().join("e2"), "normalized_bias_score"),
        "6.86"
    );
    assert_eq!(report_cell(&tmp.path().join("e2"), "task"), "hate");

    let o = bin(
        &[
            "evaluate",
            "ckpt.json",
            "hate.jsonl",
            "--baseline-mismatches",
            "0",
            "--out",
            "e3",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("zero mismatches"), "{}", stderr(&o));
}

#[test]
fn evaluate_against_baseline_run() {
    let tmp = TempDir::new().unwrap();
    lookup_model().save(tmp.path().join("ckpt.json")).unwrap();
    write_pairs(tmp.path(), "base.jsonl", &pairs_with(20, 50));
    write_pairs(tmp.path(), "mine.jsonl", &pairs_with(5, 50));
    let o = bin(
        &[
            "evaluate",
            "ckpt.json",
            "base.jsonl",
            "--task",
            "s",
            "--out",
            "zs",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let o = bin(
        &[
            "evaluate",
            "ckpt.json",
            "mine.jsonl",
            "--task",
            "s",
            "--baseline",
            "zs",
            "--out",
            "ev",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        report_cell(&tmp.path().join("ev"), "normalized_bias_score"),
        "25.00"
    );

    let o = bin(
        &[
            "evaluate",
            "ckpt.json",
            "mine.jsonl",
            "--task",
            "other",
            "--baseline",
            "zs",
            "--out",
            "ev2",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn evaluate_constant_model() {
    let tmp = TempDir::new().unwrap();
    let mut m = lookup_model();
    m.params.head_weights.data.iter_mut().for_each(|w| *w = 0.0);
    m.params.head_bias = vec![0.0, 1.0];
    m.save(tmp.path().join("ckpt.json")).unwrap();
    write_pairs(tmp.path(), "p.jsonl", &pairs_with(30, 40));
    let o = bin(
        &["evaluate", "ckpt.json", "p.jsonl", "--out", "e"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        report_cell(&tmp.path().join("e"), "bias_percentage"),
        "0.00"
    );
    assert_eq!(
        report_cell(&tmp.path().join("e"), "accuracy_average"),
        "100.00"
    );
}

fn save_report(dir: &Path, strategy: &str, rows: &[(&str, usize, usize, usize)]) {
    let inputs: Vec<TaskInput> = rows
        .iter()
        .map(|&(task, m, base, total)| TaskInput {
            task: task.into(),
            count: MismatchCount::new(m, total).unwrap(),
            baseline: Some(MismatchCount::new(base, total).unwrap()),
            accuracy_original: None,
            accuracy_swapped: None,
        })
        .collect();
    let r = aggregate_inputs(strategy, &inputs).unwrap();
    fs::create_dir_all(dir).unwrap();
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&r).unwrap(),
    )
    .unwrap();
}

#[test]
fn report_grid_and_conflicts() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let tasks = ["sentiment", "sarcasm", "toxicity", "hate"];
    let totals = [4857, 9589, 7057, 10034];
    let base = [218, 45, 528, 525];
    for (name, counts) in [
        ("fod", [30, 5, 55, 243]),
        ("tm", [0, 0, 0, 0]),
        ("jlo", [8, 5, 50, 119]),
        ("foa", [18, 4, 25, 36]),
    ] {
        // one run directory per (strategy, task)
        for i in 0..4 {
            save_report(
                &t.join(format!("{name}_{i}")),
                name,
                &[(tasks[i], counts[i], base[i], totals[i])],
            );
        }
    }
    let mut args: Vec<String> = vec!["report".into()];
    for name in ["fod", "tm", "jlo", "foa"] {
        for i in 0..4 {
            args.push(format!("{name}_{i}"));
        }
    }
    args.extend(["--out".into(), "r1".into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = bin(&argv, t);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(t.join("r1/bias_scores.csv")).unwrap();
    assert_eq!(
        csv,
        "strategy,sentiment,sarcasm,toxicity,hate,average\n\
         fod,13.76,11.11,10.42,46.29,20.39\n\
         tm,0.00,0.00,0.00,0.00,0.00\n\
         jlo,3.67,11.11,9.47,22.67,11.73\n\
         foa,8.26,8.89,4.73,6.86,7.18\n"
    );
    assert!(fs::read_to_string(t.join("r1/comparison.md"))
        .unwrap()
        .contains("| jlo |"));

    let mut argv2 = argv.clone();
    *argv2.last_mut().unwrap() = "r2";
    assert_eq!(code(&bin(&argv2, t)), 0);
    for f in [
        "bias_scores.csv",
        "accuracy.csv",
        "comparison.md",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(t.join("r1").join(f)).unwrap(),
            fs::read(t.join("r2").join(f)).unwrap()
        );
    }

    let o = bin(&["report", "jlo_0"], t);
    assert_eq!(code(&o), 0);
    let md = stdout(&o);
    assert!(md.contains("| jlo | 3.67 | 3.67 |"), "{md}");
    assert!(!md.contains("| fod |"));

    save_report(&t.join("clash"), "jlo", &[("sentiment", 9, 218, 4857)]);
    let o = bin(&["report", "jlo_0", "clash"], t);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("conflicting"));

    assert_eq!(code(&bin(&["report", "nowhere"], t)), 2);
}
