use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gapscope::stats::expected_agreement;
use gapscope::store::{write_dump, ActivationDump, DumpMode};
use sha2::{Digest, Sha256};

fn gapscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gapscope"))
        .args(args)
        .env_remove("GAPSCOPE_THREADS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Pair-mode dump whose correct rows are offset along the first axis.
fn separable_dump(n_questions: usize, n_layers: usize, seed: u64) -> ActivationDump {
    let d = 6;
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut noise = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let mut dump = ActivationDump::zeros(DumpMode::Pair, n_questions * 4, n_layers, d);
    dump.model_id = format!("fixture-{seed}");
    dump.training_tokens = 1000 * seed;
    for q in 0..n_questions {
        let correct = (q * 5 + 1) % 4;
        for c in 0..4 {
            dump.labels.push(u32::from(c == correct));
            dump.group_ids.push(format!("q{q}"));
            for l in 0..n_layers {
                // deeper layers separate better
                let sep = if c == correct { 0.3 * l as f64 } else { 0.0 };
                for (k, v) in dump.vector_mut(q * 4 + c, l).iter_mut().enumerate() {
                    *v = (k as f64 * 0.1 + if k == 0 { sep } else { 0.0 } + 0.2 * noise()) as f32;
                }
            }
        }
    }
    dump
}

fn sha256(path: &Path) -> String {
    hex(&Sha256::digest(fs::read(path).unwrap()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let (h, rows) = csv_rows(path);
    let i = h.iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.into_iter().map(|mut r| r.swap_remove(i)).collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.actd");
    write_dump(&separable_dump(3, 2, 1), &good).unwrap();
    let out = gapscope(&["validate", "--dump", s(&good)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().next(), Some("ok"));

    let bad = dir.path().join("bad.actd");
    let mut bytes = fs::read(&good).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&bad, bytes).unwrap();
    fs::copy(dir.path().join("good.actd.meta"), dir.path().join("bad.actd.meta")).unwrap();
    assert_eq!(gapscope(&["validate", "--dump", s(&bad)]).status.code(), Some(1));

    // two correct rows in one group: parses, fails validation
    let meta = dir.path().join("good.actd.meta");
    let text = fs::read_to_string(&meta).unwrap().replacen("0,q0", "1,q0", 1);
    fs::write(&meta, text).unwrap();
    let out = gapscope(&["validate", "--dump", s(&good)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("q0"));

    let missing = dir.path().join("absent.actd");
    assert_eq!(gapscope(&["validate", "--dump", s(&missing)]).status.code(), Some(2));
}

#[test]
fn usage_errors_get_their_own_code() {
    assert_eq!(gapscope(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(gapscope(&["probe", "--train-dump", "x"]).status.code(), Some(64));
    assert_eq!(gapscope(&["--help"]).status.code(), Some(0));
}

#[test]
fn probe_csv_max_matches_logged_score_and_manifest_digests() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = (dir.path().join("train.actd"), dir.path().join("test.actd"));
    write_dump(&separable_dump(40, 3, 2), &train).unwrap();
    write_dump(&separable_dump(40, 3, 3), &test).unwrap();
    let out_dir = dir.path().join("probe");
    let out = gapscope(&["probe", "--train-dump", s(&train), "--test-dump", s(&test), "--out", s(&out_dir), "--svm", "--layer", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let log = String::from_utf8_lossy(&out.stderr);
    let logged: f64 = log
        .split_whitespace()
        .find_map(|t| t.strip_prefix("cognitive_score="))
        .expect("score logged")
        .parse()
        .unwrap();
    let accs: Vec<f64> = column(&out_dir.join("layers.csv"), "accuracy").iter().map(|a| a.parse().unwrap()).collect();
    assert_eq!(accs.len(), 3);
    assert_eq!(accs.iter().copied().fold(f64::MIN, f64::max), logged);
    assert_eq!(json(&out_dir.join("summary.json"))["metrics"]["cognitive_score"].as_f64(), Some(logged));
    assert!(logged > 0.9);
    assert_eq!(column(&out_dir.join("projection.csv"), "pc1").len(), 160);

    let manifest = json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["command"], "probe");
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.len() >= 5);
    for o in outputs {
        let p = out_dir.join(o["path"].as_str().unwrap());
        assert_eq!(o["sha256"].as_str().unwrap(), sha256(&p));
    }
    let inputs: Vec<&str> = manifest["inputs"].as_array().unwrap().iter().map(|i| i["path"].as_str().unwrap()).collect();
    assert!(inputs.contains(&s(&train)) && inputs.iter().any(|p| p.ends_with("test.actd.meta")));
    // no temp files left behind
    assert!(fs::read_dir(&out_dir).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with(".gapscope-")));
}

#[test]
fn consistency_row_recomputes() {
    let dir = tempfile::tempdir().unwrap();
    let exp = dir.path().join("exp.csv");
    let cog = dir.path().join("cog.csv");
    let mut e = String::from("question_id,raw_output,correct\n");
    let mut c = String::from("question_id,correct\n");
    for i in 0..50 {
        e.push_str(&format!("q{i},out,{}\n", i % 3 == 0));
        // same ids, shuffled order
        c.push_str(&format!("q{},{}\n", 49 - i, (49 - i) % 2 == 0));
    }
    fs::write(&exp, e).unwrap();
    fs::write(&cog, c).unwrap();
    let out_dir = dir.path().join("cons");
    let out = gapscope(&["consistency", "--expressive", s(&exp), "--cognitive", s(&cog), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let path = out_dir.join("consistency.csv");
    let get = |n: &str| column(&path, n)[0].parse::<f64>().unwrap();
    assert_eq!(get("s"), 50.0);
    assert_eq!(get("a_exp"), 17.0 / 50.0);
    assert_eq!(get("a_cog"), 0.5);
    // agree: both correct (i % 6 == 0) or both wrong
    let agree = (0..50).filter(|i| (i % 3 == 0) == (i % 2 == 0)).count();
    assert_eq!(get("n_agree"), agree as f64);
    assert_eq!(get("p_expected"), expected_agreement(get("a_exp"), get("a_cog")).unwrap());
    assert!((0.0..=1.0).contains(&get("p_value")));

    fs::write(&cog, "question_id,correct\nq0,true\n").unwrap();
    let out = gapscope(&["consistency", "--expressive", s(&exp), "--cognitive", s(&cog), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inconsistency_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "question_id,parsed_index\nq0,1\nq1,2\nq2,\nq3,0\n").unwrap();
    fs::write(&b, "question_id,parsed_index\nq0,1\nq1,3\nq2,\nq3,\n").unwrap();
    let out_dir = dir.path().join("inc");
    let out = gapscope(&["inconsistency", "--answers", s(&a), s(&b), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(column(&out_dir.join("inconsistency.csv"), "inconsistency"), vec!["0.5"]);

    let s1 = dir.path().join("s1.json");
    let s2 = dir.path().join("s2.json");
    let s3 = dir.path().join("s3.json");
    fs::write(&s1, r#"{"command":"probe","model_id":"m2","stage":"sft","training_tokens":200,"metrics":{"cognitive_score":0.9}}"#).unwrap();
    fs::write(&s2, r#"{"command":"express","model_id":"m2","stage":"sft","training_tokens":200,"metrics":{"zero_shot":0.7}}"#).unwrap();
    fs::write(&s3, r#"{"command":"probe","model_id":"m1","stage":"pretrain","training_tokens":100,"metrics":{"cognitive_score":0.8}}"#).unwrap();
    let rep = dir.path().join("rep");
    let out = gapscope(&["report", "--input", s(&s1), s(&s2), s(&s3), "--out", s(&rep)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_rows(&rep.join("series.csv"));
    assert_eq!(header, ["training_tokens", "model_id", "stage", "cognitive_score", "zero_shot"]);
    assert_eq!(rows, vec![vec!["100", "m1", "pretrain", "0.8", ""], vec!["200", "m2", "sft", "0.9", "0.7"]]);
    assert_eq!(json(&rep.join("series.json"))[1]["metrics"]["zero_shot"].as_f64(), Some(0.7));

    let out = gapscope(&["report", "--input", s(&s1), s(&s1), "--out", s(&rep)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn transcript_replay() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.tsv");
    fs::write(&q, "a\tWhat?\tx\ty\tz\tw\t1\nb\tWhy?\tx\ty\tz\tw\t2\n").unwrap();
    let t = dir.path().join("t.tsv");
    fs::write(&t, "a\t0\t2. y\nb\t0\tno idea\n").unwrap();
    let out_dir = dir.path().join("ex");
    let out = gapscope(&["express", "--transcript", s(&t), "--questions", s(&q), "--out", s(&out_dir), "--model-id", "ext", "--training-tokens", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&out_dir.join("summary.json"));
    assert_eq!(summary["metrics"]["zero_shot"].as_f64(), Some(0.5));
    assert_eq!(summary["training_tokens"], 5);
    assert_eq!(column(&out_dir.join("records.csv"), "correct"), vec!["true", "false"]);
    // transcripts cannot score likelihoods
    let out = gapscope(&["express", "--transcript", s(&t), "--questions", s(&q), "--mode", "likelihood", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

fn run_ok(args: &[&str]) -> Output {
    let out = gapscope(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn toy_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let run: PathBuf = dir.path().join("run");
    run_ok(&["toy", "init", "--out", s(&run), "--hidden", "16", "--layers", "8", "--pretrain-steps", "8", "--tune-steps", "4"]);
    let config = run.join("config.json");
    assert_eq!(json(&config)["n_layers"], 8);
    run_ok(&["toy", "train", "--dir", s(&run)]);
    let ids = column(&run.join("checkpoints.csv"), "model_id");
    assert_eq!(ids, ["pretrain-2", "pretrain-4", "pretrain-6", "pretrain-8", "sft-9", "sft-10", "sft-11", "sft-12"]);
    let ck = |id: &str| run.join(format!("checkpoints/{id}.toyc"));

    let q = dir.path().join("q.tsv");
    run_ok(&["toy", "questions", "--config", s(&config), "--n", "6", "--out", s(&q)]);
    assert_eq!(fs::read_to_string(&q).unwrap().lines().count(), 6);
    assert!(dir.path().join("q.tsv.manifest.json").exists());

    let pair = dir.path().join("pair.actd");
    run_ok(&["toy", "dump", "--checkpoint", s(&ck("sft-12")), "--questions", s(&q), "--template", "a", "--out", s(&pair)]);
    let out = run_ok(&["validate", "--dump", s(&pair)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("24 examples x 8 layers x 16 dims"));

    let b1 = dir.path().join("b1.actd");
    let b2 = dir.path().join("b2.actd");
    run_ok(&["toy", "dump", "--checkpoint", s(&ck("pretrain-8")), "--questions", s(&q), "--template", "b", "--out", s(&b1)]);
    run_ok(&["toy", "dump", "--checkpoint", s(&ck("sft-12")), "--questions", s(&q), "--template", "b", "--out", s(&b2)]);
    let kl = dir.path().join("kl");
    run_ok(&["vocab-kl", "--model", s(&ck("pretrain-4")), s(&ck("pretrain-8")), s(&ck("sft-12")), "--dump", s(&b1), s(&b2), "--out", s(&kl)]);
    assert_eq!(column(&kl.join("kl.csv"), "to_model"), ["pretrain-8", "sft-12"]);

    let ex = dir.path().join("ex");
    run_ok(&["express", "--checkpoint", s(&ck("sft-12")), "--questions", s(&q), "--mode", "repeated", "--k", "3", "--max-tokens", "4", "--out", s(&ex)]);
    let curve: Vec<f64> = column(&ex.join("repeated.csv"), "accuracy").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(curve.len(), 3);
    assert!(curve.windows(2).all(|w| w[0] <= w[1]));

    let res = dir.path().join("res");
    run_ok(&["residual", "--checkpoint", s(&ck("init")), "--prompts", "10", "--gradients", "--out", s(&res)]);
    assert_eq!(column(&res.join("profile.csv"), "norm").len(), 9);
    assert!(json(&res.join("summary.json"))["metrics"]["loglog_slope"].is_f64());

    let pruned = dir.path().join("pruned.toyc");
    run_ok(&["toy", "delete-layer", "--checkpoint", s(&ck("sft-12")), "--layer", "3", "--questions", s(&q), "--out", s(&pruned)]);
    let d = json(&dir.path().join("pruned.toyc.deletion.json"));
    assert_eq!(d["layer"], 3);
    let out = gapscope(&["toy", "delete-layer", "--checkpoint", s(&ck("sft-12")), "--layer", "8", "--out", s(&pruned)]);
    assert_eq!(out.status.code(), Some(2));
}
