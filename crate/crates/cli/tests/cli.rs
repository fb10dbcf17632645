use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskinv_core::corpus::TokenSequence;
use maskinv_encoder::ToyEncoder;
use maskinv_eval::EvalReport;
use serde_json::Value;

const SMALL: &str = r#"{
  "corpus": {"V": 16, "n": 6, "count": 400, "order": 1},
  "encoder": {"d": 8},
  "model": {"layers": 1, "hidden": 16, "heads": 2, "ffn_dim": 32, "t_feature_dim": 8},
  "train": {"max_steps": 60, "warmup_steps": 10, "batch_size": 8, "lr": 0.003,
            "eval_every": 30, "val_limit": 20, "acc_samples": 20},
  "decode": [{"strategy": "euler"}, {"strategy": "confidence"}],
  "eval": {"samples": 20, "random_pairs": 100}
}"#;

struct Run {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        Self::with_config(SMALL)
    }

    fn with_config(text: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("config.json");
        std::fs::write(&config, text).unwrap();
        Self { _tmp: tmp, root, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn raw(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_maskinv"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.out(out))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> String {
        let o = self.raw(out, args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn code(&self, out: &str, args: &[&str]) -> i32 {
        self.raw(out, args).status.code().unwrap()
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn gen_data_is_reproducible_and_consistent() {
    let run = Run::new();
    run.ok("a", &["gen-data"]);
    run.ok("b", &["gen-data"]);
    for f in ["corpus.txt", "embeddings.bin", "embeddings.json", "data.json"] {
        assert_eq!(read(run.out("a/data").join(f)), read(run.out("b/data").join(f)), "{f}");
    }

    let corpus = String::from_utf8(read(run.out("a/data/corpus.txt"))).unwrap();
    let lines: Vec<&str> = corpus.lines().skip(1).collect();
    assert!(corpus.starts_with("#vocab=16 n=6"));
    assert_eq!(lines.len(), 400);
    let blob = read(run.out("a/data/embeddings.bin"));
    assert_eq!(blob.len() % (400 * 8), 0);
    let floats: Vec<f32> = blob[blob.len() - 400 * 8 * 4..]
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let enc = ToyEncoder::new(0, maskinv_core::corpus::VocabSpec::new(16).unwrap(), 6, 8).unwrap();
    for i in [0, 17, 399] {
        let seq = TokenSequence::parse_line(lines[i]).unwrap();
        assert_eq!(enc.encode(&seq).unwrap().values(), &floats[i * 8..(i + 1) * 8], "row {i}");
    }

    // a second gen-data into the same place needs --force
    assert_eq!(run.code("a", &["gen-data"]), 2);
    run.ok("a", &["--force", "gen-data"]);
}

#[test]
fn stale_data_is_refused() {
    let run = Run::new();
    run.ok("a", &["gen-data"]);
    let corpus = run.out("a/data/corpus.txt");
    let mut text = String::from_utf8(read(&corpus)).unwrap();
    // first token of the first sequence, just past the header line
    let at = text.find('\n').unwrap() + 1;
    let swapped = if &text[at..at + 1] == "3" { "4" } else { "3" };
    text.replace_range(at..at + 1, swapped);
    std::fs::write(&corpus, text).unwrap();
    assert_eq!(run.code("a", &["train"]), 3);

    // configuration no longer matching the generated data
    run.ok("b", &["gen-data"]);
    let other = Run::with_config(&SMALL.replace("\"count\": 400", "\"count\": 500"));
    let data = run.out("b/data");
    assert_eq!(other.code("x", &["train", "--data", data.to_str().unwrap()]), 3);
}

#[test]
fn bad_configs_exit_with_config_code() {
    let run = Run::with_config(r#"{"corpus": {"V": 16, "nope": 1}}"#);
    assert_eq!(run.code("a", &["gen-data"]), 2);
    let run = Run::with_config(r#"{"train": {"max_steps": 5, "warmup_steps": 10}}"#);
    assert_eq!(run.code("a", &["gen-data"]), 2);
    let run = Run::with_config(r#"{"model": {"hidden": 15, "heads": 2}}"#);
    assert_eq!(run.code("a", &["gen-data"]), 2);
}

#[test]
fn train_invert_eval_and_ablations() {
    let run = Run::new();
    run.ok("a", &["gen-data"]);
    run.ok("a", &["train"]);
    let metrics = String::from_utf8(read(run.out("a/train/metrics.csv"))).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    for d in ["best", "last"] {
        assert!(run.out("a/train").join(d).join("manifest.json").exists());
        assert!(run.out("a/train").join(d).join("tensors.bin").exists());
    }

    // same seed, same bytes; another seed, other bytes
    run.ok("b", &["gen-data"]);
    run.ok("b", &["train"]);
    assert_eq!(read(run.out("a/train/last/tensors.bin")), read(run.out("b/train/last/tensors.bin")));
    run.ok("c", &["--seed", "7", "gen-data"]);
    run.ok("c", &["--seed", "7", "train"]);
    assert_ne!(read(run.out("a/train/last/tensors.bin")), read(run.out("c/train/last/tensors.bin")));

    // invert
    let r: Value = serde_json::from_str(&run.ok("a", &["invert", "--from-cache", "3"])).unwrap();
    assert_eq!(r["forward_passes"], 8);
    assert_eq!(r["tokens"].as_array().unwrap().len(), 6);
    assert!(r["token_accuracy"].as_f64().unwrap() >= 0.0);
    let c = r["cosine_to_target"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&c));
    let r: Value = serde_json::from_str(&run.ok("a", &["invert", "--from-text", "1 2 3 4 5 6", "--strategy", "sequential"])).unwrap();
    assert_eq!(r["forward_passes"], 6);
    assert_eq!(r["gold"], serde_json::json!([1, 2, 3, 4, 5, 6]));

    let vec_file = run.out("vec.txt");
    std::fs::write(&vec_file, "0.1, 0.2 0.3 0.4 0.5 0.6 0.7 0.8\n").unwrap();
    let r: Value = serde_json::from_str(&run.ok("a", &["invert", "--from-file", vec_file.to_str().unwrap()])).unwrap();
    assert!(r["token_accuracy"].is_null());
    std::fs::write(&vec_file, "[0.1, 0.2, \"x\"]").unwrap();
    assert_eq!(run.code("a", &["invert", "--from-file", vec_file.to_str().unwrap()]), 3);
    std::fs::write(&vec_file, "0.1 0.2 0.3").unwrap();
    assert_ne!(run.code("a", &["invert", "--from-file", vec_file.to_str().unwrap()]), 0);
    assert_eq!(run.code("a", &["invert", "--from-cache", "400"]), 3);
    assert_eq!(run.code("a", &["invert", "--from-cache", "1", "--strategy", "bogus"]), 2);

    // eval and its report
    run.ok("a", &["train", "--unconditional"]);
    run.ok("a", &["eval"]);
    let report: EvalReport = serde_json::from_slice(&read(run.out("a/eval/report.json"))).unwrap();
    assert_eq!(report.strategies.len(), 2);
    assert_eq!(report.unconditional.len(), 2);
    assert!(report.unconditional_source.contains("train-unconditional"));
    let csv = run.ok("a", &["report", "--format", "csv"]);
    assert_eq!(csv, String::from_utf8(read(run.out("a/eval/report.csv"))).unwrap());
    assert_eq!(csv.lines().next().unwrap(), "method,token_acc,exact_match,cosine,bleu,forward_passes");
    let table = run.ok("a", &["report"]);
    assert!(table.contains("random"));
    let json: EvalReport = serde_json::from_str(&run.ok("a", &["report", "--format", "json"])).unwrap();
    assert_eq!(json, report);

    // remask sweep: tau = 0 reproduces the euler row of the evaluation
    let out = run.ok("a", &["ablate-remask"]);
    assert!(out.contains("highest token accuracy at tau="));
    let sweep = String::from_utf8(read(run.out("a/ablate-remask.csv"))).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "tau,token_acc,cosine,bleu");
    assert_eq!(lines.len(), 5);
    let first: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
    let euler = report.strategies.iter().find(|m| m.name.starts_with("euler")).unwrap();
    assert_eq!(first[0], 0.0);
    assert_eq!(first[1], euler.token_accuracy);
    assert_eq!(first[2], euler.mean_cosine);
    assert_eq!(first[3], euler.bleu);

    // mask-ratio ablation at toy scale
    run.ok("a", &["ablate-mask", "--seeds", "0", "--steps", "20"]);
    let table = String::from_utf8(read(run.out("a/ablate-mask.csv"))).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "arm,best_step,best_val_loss,final_train_acc");
    assert_eq!(lines.len(), 7);
    assert!(lines[6].starts_with("log_linear"));
    assert!(run.out("a/ablate-mask-runs.csv").exists());
}
