use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gaitscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaitscope"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_set(dir: &Path) -> String {
    let data = dir.join("data");
    let o = gaitscope(&[
        "synth", "--out", data.to_str().unwrap(), "--subjects", "4", "--views", "0,90",
        "--conditions", "nm", "--seqs", "2", "--frames", "20", "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    data.to_str().unwrap().to_string()
}

const TINY: [&str; 8] = [
    "--set", "train.iterations=3",
    "--set", "train.batch_p=2",
    "--set", "train.clip_len=6",
    "--set", "train.checkpoint_interval=2",
];

fn train(data: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--preset", "desk", "--data", data, "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    gaitscope(&args)
}

#[test]
fn help_documents_flags_and_exit_codes() {
    for sub in [vec!["--help"], vec!["synth", "--help"], vec!["train", "--help"], vec!["eval", "--help"], vec!["export", "--help"]] {
        let o = gaitscope(&sub);
        assert_eq!(o.status.code(), Some(0));
        let h = text(&o.stdout);
        assert!(h.contains("Exit codes") && h.contains("3  training diverged"), "{h}");
    }
    let h = text(&gaitscope(&["eval", "--help"]).stdout);
    for flag in ["--checkpoint", "--data", "--protocol", "--ranks", "--config"] {
        assert!(h.contains(flag), "missing {flag}");
    }
}

#[test]
fn synth_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = gaitscope(&["synth", "--out", out.to_str().unwrap(), "--subjects", "16", "--views", "0,30,60,90", "--seed", "7"]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 256);
    assert!(files(&a) == files(&b), "trees differ");
}

#[test]
fn synth_without_out_is_usage_error() {
    let o = gaitscope(&["synth", "--subjects", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("Usage"));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "train.not_a_key = 1\n").unwrap();
    let o = gaitscope(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
    let o = gaitscope(&["train", "--preset", "casia", "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_set(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "train.seed = 11\n").unwrap();
    let run = dir.path().join("run");
    let o = train(&data, &run, &["--config", cfg.to_str().unwrap(), "--seed", "5"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("override: train.seed = 5 (flag; was 11)"), "{}", text(&o.stderr));
    for f in ["final.ckpt", "iter-0000002.ckpt", "effective.toml", "train.jsonl"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let effective = std::fs::read_to_string(run.join("effective.toml")).unwrap();
    assert!(effective.contains("train.seed = 5"));

    // Re-running from the effective config reproduces the log exactly.
    let again = dir.path().join("again");
    let o = gaitscope(&["train", "--config", run.join("effective.toml").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(std::fs::read_to_string(again.join("train.jsonl")).unwrap(), log);

    let ckpt = run.join("final.ckpt");
    let o = gaitscope(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--protocol", "synthetic"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.contains("Rank-1 accuracy") && out.contains("Rank-20 accuracy"), "{out}");
    let json_at = out.find('{').unwrap();
    let table: serde_json::Value = serde_json::from_str(&out[json_at..]).unwrap();
    assert_eq!(table["ks"], serde_json::json!([1, 5, 10, 20]));

    let json = dir.path().join("t.json");
    let o = gaitscope(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--ranks", "1", "--json", json.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(!text(&o.stdout).contains("Rank-5"));
    let table: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(table["ks"], serde_json::json!([1]));

    // A config other than the one trained with is an artifact mismatch.
    let other = dir.path().join("other.toml");
    std::fs::write(&other, effective.replace("train.seed = 5", "train.seed = 6")).unwrap();
    let o = gaitscope(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--config", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o.stderr));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[12] ^= 0xff;
    let broken = dir.path().join("broken.ckpt");
    std::fs::write(&broken, bytes).unwrap();
    let o = gaitscope(&["eval", "--checkpoint", broken.to_str().unwrap(), "--data", &data]);
    assert_eq!(o.status.code(), Some(4));
    assert!(text(&o.stderr).contains("corrupted archive"), "{}", text(&o.stderr));

    let prefix = dir.path().join("feats");
    let o = gaitscope(&["export", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--out", prefix.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(prefix.with_extension("json")).unwrap()).unwrap();
    let (n, dim) = (side["n"].as_u64().unwrap(), side["dim"].as_u64().unwrap());
    assert_eq!(n, 8);
    assert_eq!(std::fs::metadata(prefix.with_extension("bin")).unwrap().len(), n * dim * 4);
}

#[test]
fn divergence_exits_3_with_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_set(dir.path());
    let run = dir.path().join("run");
    let o = train(&data, &run, &["--set", "train.base_lr=1e300", "--set", "train.lr_schedule=[]"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o.stderr));
    assert!(run.join("diverged.ckpt").is_file());
}
