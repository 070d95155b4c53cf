use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conceptkit::rerank::{corpus_wer, read_nbest};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conceptkit"))
        .args(["--seed", "7", "--workers", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn metrics(path: &str) -> BTreeMap<String, f64> {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(task: &str, size: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", task, "--out-dir", &p(dir.path(), ""), "--size", size]);
    dir
}

#[test]
fn help_documents_every_key() {
    let out = bin(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["seed", "embed.dims", "fnet.dims", "fnet.prototypes", "rerank.hidden", "rerank.lambda", "rerank.alpha", "tsa.dropout", "tsa.epochs"] {
        assert!(text.contains(key), "{key} missing from --help");
    }
}

#[test]
fn missing_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["embed-train", "--corpus", "/nonexistent/corpus.tsv", "--out", &p(dir.path(), "e.txt")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/corpus.tsv"));
    assert!(!dir.path().join("e.txt").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&bin(&["embed-train"])), 2);
    assert_eq!(code(&bin(&["no-such-command"])), 2);
}

#[test]
fn unknown_or_mistyped_config_rejected() {
    let dir = synth("ner", "20");
    let args = |extra: &[&str]| {
        let mut a = vec!["embed-train", "--corpus"];
        let c = p(dir.path(), "corpus.tsv");
        let o = p(dir.path(), "e.txt");
        a.extend(extra);
        let mut v: Vec<String> = a.iter().map(|s| s.to_string()).collect();
        v.insert(2, c);
        v.extend(["--out".to_string(), o]);
        v
    };
    let run = |v: Vec<String>| bin(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&run(args(&["--set", "embed.dimz=3"]))), 2);
    assert_eq!(code(&run(args(&["--set", "embed.dims=three"]))), 2);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "embed.dims = 8\nembed.window = wide\n").unwrap();
    let cfg = cfg.display().to_string();
    let out = run(args(&["--config", &cfg]));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.cfg:2"));
    assert!(!dir.path().join("e.txt").exists());
}

#[test]
fn flags_override_config_file() {
    let dir = synth("ner", "30");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 99\nembed.dims = 8\n").unwrap();
    let (c, cfg) = (p(dir.path(), "corpus.tsv"), cfg.display().to_string());
    // the leading --seed 7 wins over the file's seed
    ok(&["embed-train", "--corpus", &c, "--config", &cfg, "--out", &p(dir.path(), "a.txt")]);
    ok(&["embed-train", "--corpus", &c, "--set", "embed.dims=8", "--out", &p(dir.path(), "b.txt")]);
    let a = std::fs::read(dir.path().join("a.txt")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.txt")).unwrap());
    assert!(String::from_utf8_lossy(&a).lines().next().unwrap().ends_with(" 8"));
}

#[test]
fn embed_pipeline_is_seeded_and_rejects_oov() {
    let dir = synth("ner", "60");
    let c = p(dir.path(), "corpus.tsv");
    let t = p(dir.path(), "taxonomy.tsv");
    for name in ["a.txt", "b.txt"] {
        ok(&["embed-train", "--corpus", &c, "--taxonomy", &t, "--set", "embed.dims=10", "--out", &p(dir.path(), name)]);
    }
    let a = std::fs::read(dir.path().join("a.txt")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.txt")).unwrap());

    let emb = p(dir.path(), "a.txt");
    let out = ok(&["embed-query", "--emb", &emb, "--word", "personname0", "-k", "3"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
    assert_eq!(code(&bin(&["embed-query", "--emb", &emb, "--word", "zzz-not-a-word"])), 2);

    let feats = p(dir.path(), "crf.txt");
    ok(&["embed-crf-feats", "--corpus", &c, "--emb", &emb, "--set", "embed.clusters=3", "--out", &feats]);
    let text = std::fs::read_to_string(&feats).unwrap();
    assert!(text.contains("c3[0]="), "cluster feature missing");
}

#[test]
fn fixed_mode_keeps_label_embedding_bytes() {
    let dir = synth("fnet", "200");
    let d = dir.path();
    ok(&[
        "fnet-proto", "--mentions", &p(d, "train.jsonl"), "--hierarchy", &p(d, "hierarchy.txt"),
        "--emb", &p(d, "embeddings.txt"), "--label-emb-out", &p(d, "b.txt"), "--out", &p(d, "protos.tsv"),
    ]);
    ok(&[
        "fnet-train", "--train", &p(d, "train.jsonl"), "--hierarchy", &p(d, "hierarchy.txt"),
        "--label-emb-file", &p(d, "b.txt"), "--mode", "fixed", "--set", "fnet.epochs=2", "--out", &p(d, "model.txt"),
    ]);
    let b = std::fs::read_to_string(d.join("b.txt")).unwrap();
    let model = std::fs::read_to_string(d.join("model.txt")).unwrap();
    let (_, tail) = model.split_once("@B\n").expect("B block");
    assert_eq!(tail, b);
}

#[test]
fn gold_predictions_score_one() {
    let dir = synth("fnet", "100");
    let d = dir.path();
    ok(&[
        "fnet-eval", "--mentions", &p(d, "test.jsonl"), "--predictions", &p(d, "test.jsonl"),
        "--hierarchy", &p(d, "hierarchy.txt"), "--out", &p(d, "m.json"),
    ]);
    let m = metrics(&p(d, "m.json"));
    assert!(!m.is_empty());
    for (k, v) in m {
        assert_eq!(v, 1.0, "{k}");
    }
}

#[test]
fn zero_shot_drops_level2_training_labels() {
    let dir = synth("fnet", "300");
    let d = dir.path();
    let base = ["fnet-proto", "--zero-shot", "--out"];
    let (m, h, o) = (p(d, "train.jsonl"), p(d, "hierarchy.txt"), p(d, "protos.tsv"));
    let mut args: Vec<&str> = base.to_vec();
    args.extend([o.as_str(), "--mentions", &m, "--hierarchy", &h]);
    // unseen level-2 labels have no mentions left, so selection alone must fail
    let out = bin(&args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("manual"));
    let manual = p(d, "manual_prototypes.tsv");
    args.extend(["--manual", &manual]);
    ok(&args);
    let protos = std::fs::read_to_string(&o).unwrap();
    let manual = std::fs::read_to_string(&manual).unwrap();
    for line in protos.lines() {
        let label = line.split('\t').next().unwrap();
        if label.matches('/').count() == 2 {
            assert!(manual.lines().any(|l| l == line), "{line} not manual");
        }
    }
}

#[test]
fn zero_shot_reports_level2_precision() {
    let dir = synth("fnet", "300");
    let d = dir.path();
    ok(&[
        "fnet-train", "--train", &p(d, "train.jsonl"), "--hierarchy", &p(d, "hierarchy.txt"),
        "--label-emb", "hle", "--zero-shot", "--set", "fnet.epochs=2", "--out", &p(d, "model.txt"),
    ]);
    ok(&[
        "fnet-eval", "--model", &p(d, "model.txt"), "--mentions", &p(d, "test.jsonl"),
        "--hierarchy", &p(d, "hierarchy.txt"), "--out", &p(d, "m.json"),
    ]);
    let m = metrics(&p(d, "m.json"));
    assert!(m.contains_key("level2_precision"));
}

struct RerankRun {
    _dir: tempfile::TempDir,
    path: PathBuf,
}

fn rerank_models() -> RerankRun {
    let dir = synth("rerank", "100");
    let d = dir.path().to_path_buf();
    ok(&["rerank-pretrain", "--text", &p(&d, "text.txt"), "--nbest", &p(&d, "train.jsonl"), "--set", "rerank.hidden=16", "--out", &p(&d, "init.txt")]);
    ok(&[
        "rerank-train", "--nbest", &p(&d, "train.jsonl"), "--init", &p(&d, "init.txt"),
        "--gazetteer", &p(&d, "gazetteer.tsv"), "--set", "rerank.epochs=3",
        "--out", &p(&d, "drbm.txt"), "--slp-out", &p(&d, "slp.txt"),
    ]);
    RerankRun { _dir: dir, path: d }
}

fn rerank_eval(d: &Path, extra: &[&str], name: &str) -> BTreeMap<String, f64> {
    let out = p(d, name);
    let test = p(d, "test.jsonl");
    let mut args = vec!["rerank-eval", "--nbest", test.as_str(), "--out", out.as_str()];
    args.extend(extra);
    ok(&args);
    metrics(&out)
}

#[test]
fn rerank_reports_are_consistent() {
    let run = rerank_models();
    let d = run.path.as_path();
    let (m, s) = (p(d, "drbm.txt"), p(d, "slp.txt"));
    let zero = rerank_eval(d, &["--zero-model"], "zero.json");
    let asr = rerank_eval(d, &[], "asr.json");
    let oracle = rerank_eval(d, &["--oracle"], "oracle.json");
    let systems = [
        rerank_eval(d, &["--model", &m], "drbm.json"),
        rerank_eval(d, &["--slp", &s], "slp.json"),
        rerank_eval(d, &["--model", &m, "--slp", &s, "--fuse-slp", "1.0"], "fused.json"),
        asr.clone(),
    ];
    let lists = read_nbest(&d.join("test.jsonl")).unwrap();
    let first: Vec<Option<usize>> = lists.iter().map(|_| Some(0)).collect();
    assert_eq!(zero["wer"], corpus_wer(&lists, &first, None));
    assert_eq!(zero["wer"], asr["wer"]);
    for sys in &systems {
        assert!(sys.contains_key("wer") && sys.contains_key("weighted_wer"));
        assert!(oracle["wer"] <= sys["wer"], "{oracle:?} vs {sys:?}");
    }
}

#[test]
fn rerank_keyword_file_is_used() {
    let run = rerank_models();
    let d = run.path.as_path();
    let kw = d.join("kw.tsv");
    std::fs::write(&kw, "zzz\t1\n").unwrap();
    let kw = kw.display().to_string();
    let m = rerank_eval(d, &["--keywords", &kw], "kw.json");
    assert_eq!(m["weighted_wer"], 0.0);
    assert!(m["wer"] > 0.0);
}

#[test]
fn rerank_fusion_needs_both_models() {
    let run = rerank_models();
    let d = run.path.as_path();
    assert_eq!(code(&bin(&["rerank-eval", "--nbest", &p(d, "test.jsonl"), "--model", &p(d, "drbm.txt"), "--fuse-slp", "1"])), 2);
}

#[test]
fn failed_training_leaves_no_output() {
    let run = rerank_models();
    let d = run.path.as_path();
    let out = bin(&[
        "rerank-train", "--nbest", &p(d, "train.jsonl"), "--gazetteer", &p(d, "missing.tsv"),
        "--out", &p(d, "new.txt"), "--slp-out", &p(d, "new_slp.txt"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!d.join("new.txt").exists() && !d.join("new_slp.txt").exists());
    let out = bin(&["rerank-train", "--nbest", &p(d, "train.jsonl"), "--out", &p(d, "no/such/dir/m.txt")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_training_exits_3() {
    let run = rerank_models();
    let d = run.path.as_path();
    let out = bin(&[
        "rerank-train", "--nbest", &p(d, "train.jsonl"), "--set", "rerank.lr=1e308", "--set", "rerank.hidden=4",
        "--out", &p(d, "nan.txt"),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("nan.txt").exists());
}

fn tsa_small() -> [&'static str; 10] {
    [
        "--set", "tsa.word_dim=8", "--set", "tsa.hidden=4", "--set", "tsa.concept_dim=20", "--set", "tsa.attention=4", "--set",
        "tsa.epochs=2",
    ]
}

fn manifest_meta(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with('@'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn tsa_manifest_and_metric_keys() {
    let dir = synth("tsa", "60");
    let d = dir.path();
    let mut args = vec!["tsa-train".to_string(), "--train".into(), p(d, "train.jsonl"), "--dev".into(), p(d, "dev.jsonl")];
    args.extend(["--concepts".into(), p(d, "concepts.txt"), "--out".into(), p(d, "model.txt")]);
    args.extend(tsa_small().iter().map(|s| s.to_string()));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let meta = manifest_meta(&d.join("model.txt"));
    let best: usize = meta["best_epoch"].parse().unwrap();
    assert!((1..=2).contains(&best));

    ok(&["tsa-eval", "--model", &p(d, "model.txt"), "--data", &p(d, "test.jsonl"), "--concepts", &p(d, "concepts.txt"), "--out", &p(d, "m.json")]);
    let keys: Vec<String> = metrics(&p(d, "m.json")).into_keys().collect();
    assert_eq!(keys, ["macro_f1", "micro_f1", "sentiment_acc", "strict_acc"]);
}

#[test]
fn target_averaging_changes_only_the_flag() {
    let dir = synth("tsa", "40");
    let d = dir.path();
    for (name, extra) in [("plain.txt", None), ("avg.txt", Some("--target-averaging"))] {
        let mut args = vec!["tsa-train".to_string(), "--train".into(), p(d, "train.jsonl"), "--dev".into(), p(d, "dev.jsonl")];
        args.extend(["--classes".into(), "4".into(), "--out".into(), p(d, name)]);
        args.extend(tsa_small().iter().map(|s| s.to_string()));
        args.extend(extra.map(String::from));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let (mut a, mut b) = (manifest_meta(&d.join("plain.txt")), manifest_meta(&d.join("avg.txt")));
    assert_eq!(a.remove("target_averaging").as_deref(), Some("false"));
    assert_eq!(b.remove("target_averaging").as_deref(), Some("true"));
    assert_eq!(a["classes"], "4");
    for k in ["best_epoch", "best_dev_score"] {
        a.remove(k);
        b.remove(k);
    }
    assert_eq!(a, b);
}
