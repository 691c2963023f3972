use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use moener::corpus::{parse_conll, tags_to_spans, LabelSet, Layer};
use moener::eval::span_prf;
use moener_cli::commands::{CONFIG_FILE, HISTORY_FILE, MODEL_FILE};
use moener_cli::{run, Cli, CliError};

fn cli(args: &[&str]) -> Result<String, CliError> {
    let cli = Cli::try_parse_from(std::iter::once("moener").chain(args.iter().copied())).expect("arguments parse");
    let mut out = Vec::new();
    run(cli, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn labels() -> LabelSet {
    LabelSet::new(["PER", "LOC", "ORG"]).unwrap()
}

/// Small synthetic corpus; returns its directory.
fn synth(dir: &Path, noise: f64, seed: u64) -> PathBuf {
    let out = dir.join(format!("synth_{noise}_{seed}"));
    cli(&[
        "synth",
        "--out",
        s(&out),
        "--clusters",
        "2",
        "--docs-per-cluster",
        "10",
        "--noise",
        &noise.to_string(),
        "--seed",
        &seed.to_string(),
    ])
    .unwrap();
    out
}

fn quick() -> Vec<&'static str> {
    vec![
        "--set",
        "moe_rounds=2",
        "--set",
        "rounds=2",
        "--set",
        "emb_dim=8",
        "--set",
        "hidden_dim=8",
        "--set",
        "types=PER,LOC,ORG",
    ]
}

fn train(corpus: &Path, out: &Path, extra: &[&str]) -> Result<String, CliError> {
    let (distant, gold) = (corpus.join("distant.conll"), corpus.join("gold.conll"));
    let mut args = vec![
        "train",
        "--distant",
        s(&distant),
        "--gold",
        s(&gold),
        "--out",
        s(out),
        "--k",
        "2",
    ];
    args.extend(quick());
    args.extend(extra);
    cli(&args)
}

fn spans(text: &str) -> Vec<HashSet<moener::corpus::EntitySpan>> {
    let c = parse_conll(text, &labels()).unwrap();
    c.layer(Layer::Gold)
        .unwrap()
        .iter()
        .map(|t| tags_to_spans(t, &labels()).into_iter().collect())
        .collect()
}

#[test]
fn synth_is_deterministic_and_noise_free_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 0.0, 3);
    let b = dir.path().join("again");
    cli(&[
        "synth",
        "--out",
        s(&b),
        "--clusters",
        "2",
        "--docs-per-cluster",
        "10",
        "--noise",
        "0",
        "--seed",
        "3",
    ])
    .unwrap();
    for f in ["gold.conll", "distant.conll", "gazetteer.tsv", "clusters.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(
        fs::read(a.join("gold.conll")).unwrap(),
        fs::read(a.join("distant.conll")).unwrap()
    );
}

#[test]
fn full_noise_corrupts_every_entity() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 1.0, 5);
    let gold = spans(&fs::read_to_string(c.join("gold.conll")).unwrap());
    let distant = spans(&fs::read_to_string(c.join("distant.conll")).unwrap());
    let total: usize = gold.iter().map(HashSet::len).sum();
    assert!(total > 0);
    for (g, d) in gold.iter().zip(&distant) {
        assert!(g.is_disjoint(d));
    }
}

#[test]
fn impossible_synth_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = cli(&[
        "synth",
        "--out",
        s(dir.path()),
        "--set",
        "max_doc_len=2",
        "--set",
        "min_doc_len=2",
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn distant_label_with_full_gazetteer_recovers_gold() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 0.0, 1);
    let out1 = dir.path().join("dl1.conll");
    let out2 = dir.path().join("dl2.conll");
    let args = |o: &Path| {
        vec![
            "distant-label".to_string(),
            "--corpus".into(),
            s(&c.join("gold.conll")).into(),
            "--gazetteer".into(),
            s(&c.join("gazetteer.tsv")).into(),
            "--out".into(),
            s(o).into(),
        ]
    };
    let report = cli(&args(&out1).iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
    assert!(report.contains("coverage\t"));
    cli(&args(&out2).iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());

    let gold = spans(&fs::read_to_string(c.join("gold.conll")).unwrap());
    let labeled = spans(&fs::read_to_string(&out1).unwrap());
    for (g, d) in gold.iter().zip(&labeled) {
        let g: Vec<_> = g.iter().cloned().collect();
        let d: Vec<_> = d.iter().cloned().collect();
        let m = span_prf(&g, &d).unwrap();
        assert_eq!(m.fp + m.fn_, 0);
    }
}

#[test]
fn unmatched_gazetteer_gives_zero_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 0.0, 2);
    let gaz = dir.path().join("gaz.tsv");
    fs::write(&gaz, "nowhere to be found\tLOC\n").unwrap();
    let out = dir.path().join("dl.conll");
    let report = cli(&[
        "distant-label",
        "--corpus",
        s(&c.join("gold.conll")),
        "--gazetteer",
        s(&gaz),
        "--out",
        s(&out),
        "--set",
        "types=PER,LOC,ORG",
    ])
    .unwrap();
    assert!(report.contains("coverage\t0.000000"));
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 0.3, 7);
    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    let fair = dir.path().join("fair.tsv");
    let report = train(&c, &a, &["--dump-fair", s(&fair)]).unwrap();
    train(&c, &b, &[]).unwrap();
    for f in [
        MODEL_FILE,
        HISTORY_FILE,
        "stage1.tsv",
        "assignment.tsv",
        "histogram.txt",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(report.lines().any(|l| l.starts_with("gold\t")));
    assert!(fs::read_to_string(&fair).unwrap().starts_with("#iterations"));
    let history = moener::selftrain::parse_history(&fs::read_to_string(a.join(HISTORY_FILE)).unwrap()).unwrap();
    assert_eq!(history[0].round, 0);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 0.3, 8);
    let (a, b) = (dir.path().join("t1"), dir.path().join("t4"));
    train(&c, &a, &["--threads", "1"]).unwrap();
    train(&c, &b, &["--threads", "4"]).unwrap();
    assert_eq!(
        fs::read(a.join(MODEL_FILE)).unwrap(),
        fs::read(b.join(MODEL_FILE)).unwrap()
    );
    assert_eq!(
        fs::read(a.join(HISTORY_FILE)).unwrap(),
        fs::read(b.join(HISTORY_FILE)).unwrap()
    );
}

#[test]
fn ablation_flags() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 0.3, 9);
    let out = dir.path().join("stage1_only");
    let report = train(
        &c,
        &out,
        &["--no-self-train", "--no-fair", "--no-moe", "--mode", "hard"],
    )
    .unwrap();
    assert!(report.contains("best_round\tstage1"));
    assert_eq!(fs::read_to_string(out.join(HISTORY_FILE)).unwrap(), "");
    let config = fs::read_to_string(out.join(CONFIG_FILE)).unwrap();
    for line in ["k = 1", "fair = false", "rounds = 0", "mode = hard"] {
        assert!(config.lines().any(|l| l == line), "{line}");
    }
}

#[test]
fn single_expert_baseline_on_two_hundred_documents() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("big");
    cli(&["synth", "--out", s(&c), "--noise", "0.3"]).unwrap();
    let out = dir.path().join("baseline");
    let report = train(&c, &out, &["--no-moe", "--no-fair", "--mode", "soft"]).unwrap();
    assert!(report.contains("histogram\t[180]"));
}

#[test]
fn config_layers_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 0.0, 4);
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# layered\nk = 3\nseed = 11\nlearning_rate = 0.5\nepochs = 2\n").unwrap();
    let out = dir.path().join("layered");
    train(
        &c,
        &out,
        &["--config", s(&cfg), "--set", "learning_rate=0.25", "--seed", "12"],
    )
    .unwrap();
    let dumped = fs::read_to_string(out.join(CONFIG_FILE)).unwrap();
    // --k 2 from the train helper beats the file's k = 3
    for line in ["k = 2", "seed = 12", "learning_rate = 0.25", "epochs = 2"] {
        assert!(dumped.lines().any(|l| l == line), "{line}");
    }
    // the dump is itself a valid config file
    let again = dir.path().join("again");
    train(&c, &again, &["--config", s(&out.join(CONFIG_FILE))]).unwrap();
    assert_eq!(
        fs::read(out.join(MODEL_FILE)).unwrap(),
        fs::read(again.join(MODEL_FILE)).unwrap()
    );
}

/// Five short documents repeated so the held-out dev documents are copies of
/// training documents.
fn memorization_fixture(dir: &Path) -> PathBuf {
    let docs = [
        "alice met bob in paris",
        "acme hired carol",
        "dave flew to rome yesterday",
        "the city of paris is big",
        "bob works at acme",
    ];
    let tags = [
        "B-PER O B-PER O B-LOC",
        "B-ORG O B-PER",
        "B-PER O O B-LOC O",
        "O O O B-LOC O O",
        "B-PER O O B-ORG",
    ];
    let mut text = String::new();
    for _ in 0..4 {
        for (d, t) in docs.iter().zip(tags) {
            text.push_str("-DOCSTART- O\n\n");
            for (w, y) in d.split(' ').zip(t.split(' ')) {
                text.push_str(&format!("{w} {y}\n"));
            }
            text.push('\n');
        }
    }
    let path = dir.join("memo.conll");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn memorization_fixture_is_recovered_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = memorization_fixture(dir.path());
    let out = dir.path().join("memo");
    cli(&[
        "train",
        "--distant",
        s(&corpus),
        "--out",
        s(&out),
        "--no-moe",
        "--no-self-train",
        "--set",
        "epochs=30",
        "--set",
        "moe_rounds=3",
        "--set",
        "dev_fraction=0.1",
    ])
    .unwrap();
    let model = out.join(MODEL_FILE);
    let report = cli(&["eval", "--model", s(&model), "--gold", s(&corpus), "--per-type"]).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 4, "{report}");
    assert!(lines[0].starts_with("all\t1.000000\t1.000000\t1.000000"), "{report}");

    let pred = dir.path().join("pred.conll");
    cli(&[
        "predict",
        "--model",
        s(&model),
        "--input",
        s(&corpus),
        "--out",
        s(&pred),
    ])
    .unwrap();
    let text = fs::read_to_string(&pred).unwrap();
    let labels = LabelSet::infer_from_conll(&fs::read_to_string(&corpus).unwrap()).unwrap();
    let original = parse_conll(&fs::read_to_string(&corpus).unwrap(), &labels).unwrap();
    let reparsed = parse_conll(&text, &labels).unwrap();
    assert_eq!(
        reparsed.layer(Layer::Gold).unwrap(),
        original.layer(Layer::Gold).unwrap()
    );
    let pred2 = dir.path().join("pred2.conll");
    cli(&[
        "predict",
        "--model",
        s(&model),
        "--input",
        s(&corpus),
        "--out",
        s(&pred2),
    ])
    .unwrap();
    assert_eq!(fs::read(&pred).unwrap(), fs::read(&pred2).unwrap());
}

#[test]
fn per_type_on_two_types_prints_three_lines() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("two");
    cli(&[
        "synth",
        "--out",
        s(&c),
        "--clusters",
        "2",
        "--docs-per-cluster",
        "10",
        "--set",
        "entity_types=PER,LOC",
    ])
    .unwrap();
    let out = dir.path().join("run");
    cli(&[
        "train",
        "--distant",
        s(&c.join("distant.conll")),
        "--out",
        s(&out),
        "--set",
        "types=PER,LOC",
        "--set",
        "moe_rounds=1",
        "--no-self-train",
        "--k",
        "2",
    ])
    .unwrap();
    let report = cli(&[
        "eval",
        "--model",
        s(&out.join(MODEL_FILE)),
        "--gold",
        s(&c.join("gold.conll")),
        "--per-type",
    ])
    .unwrap();
    let names: Vec<&str> = report.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["all", "PER", "LOC"]);
}

#[test]
fn single_precision_models_round_trip_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 0.3, 6);
    let out = dir.path().join("f32");
    train(&c, &out, &["--set", "precision=f32", "--no-self-train"]).unwrap();
    let bytes = fs::read(out.join(MODEL_FILE)).unwrap();
    assert_eq!(moener::checkpoint::pool_scalar_width(&bytes).unwrap(), 4);
    let report = cli(&[
        "eval",
        "--model",
        s(&out.join(MODEL_FILE)),
        "--gold",
        s(&c.join("gold.conll")),
    ])
    .unwrap();
    assert!(report.starts_with("all\t"));
}

#[test]
fn missing_reference_layer_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 0.0, 2);
    let out = dir.path().join("run");
    train(&c, &out, &["--no-self-train"]).unwrap();
    let err = cli(&[
        "eval",
        "--model",
        s(&out.join(MODEL_FILE)),
        "--gold",
        s(&c.join("gold.conll")),
        "--reference",
        "distant",
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("distant"), "{err}");
}

#[test]
fn label_set_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(dir.path(), 0.0, 2);
    let out = dir.path().join("run");
    train(&c, &out, &["--no-self-train"]).unwrap();
    let other = dir.path().join("misc.conll");
    fs::write(&other, "-DOCSTART- O\n\nzurich B-MISC\nrocks O\n").unwrap();
    let err = cli(&["eval", "--model", s(&out.join(MODEL_FILE)), "--gold", s(&other)]).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(
        err.to_string().contains("misc.conll") && err.to_string().contains("B-MISC"),
        "{err}"
    );
}

fn binary(args: &[&str]) -> (i32, String) {
    let o = Process::new(env!("CARGO_BIN_EXE_moener")).args(args).output().unwrap();
    (
        o.status.code().unwrap(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(binary(&[]).0, 1);
    assert_eq!(binary(&["train", "--bogus"]).0, 1);
    assert_eq!(binary(&["--help"]).0, 0);
    assert_eq!(binary(&["synth", "--out", s(dir.path()), "--set", "nope=1"]).0, 1);

    let missing = dir.path().join("missing.conll");
    let (code, err) = binary(&["train", "--distant", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("missing.conll"), "{err}");

    let c = synth(dir.path(), 0.0, 1);
    let (code, err) = binary(&[
        "train",
        "--distant",
        s(&c.join("distant.conll")),
        "--out",
        s(&dir.path().join("boom")),
        "--set",
        "learning_rate=1e300",
        "--set",
        "moe_rounds=2",
    ]);
    assert_eq!(code, 3, "{err}");
    assert_eq!(
        binary(&["synth", "--out", s(&dir.path().join("ok")), "--docs-per-cluster", "2"]).0,
        0
    );
}
