use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oceanprompt::checkpoint::Checkpoint;
use serde_json::{json, Value};

fn tiny_config() -> Value {
    json!({
        "seed": 3,
        "dataset": {
            "synth": { "height": 16, "width": 16, "steps": 20 },
            "splits": { "train": 12, "val": 4, "test": 4 }
        },
        "model": { "base_channels": 4, "codebook_size": 3, "template_size": 4, "mixer_hidden": 8, "stages": 2 },
        "train": { "epochs": 2, "lr": 0.001, "batch_size": 4 },
        "eval": { "variants": ["full", "no_scp"] }
    })
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.json"), serde_json::to_string_pretty(config).unwrap()).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_oceanprompt"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    /// Runs a subcommand with `--config run.json` and requires success.
    fn ok(&self, sub: &str, extra: &[&str]) -> String {
        let mut args = vec![sub, "--config", "run.json"];
        args.extend_from_slice(extra);
        let out = self.run(&args);
        assert!(
            out.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn gen_is_deterministic_and_echoes_its_config() {
    let ws = Workspace::new(&tiny_config());
    ws.ok("gen", &["--out", "a"]);
    ws.ok("gen", &["--out", "b"]);
    ws.ok("gen", &["--out", "c", "--seed", "4"]);
    let a = read_dir_sorted(&ws.path("a"));
    assert_eq!(a, read_dir_sorted(&ws.path("b")));
    assert_ne!(a, read_dir_sorted(&ws.path("c")));
    let echoed: Value = serde_json::from_slice(&fs::read(ws.path("a/effective_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["dataset"]["synth"]["height"], 16);
}

#[test]
fn grid_not_divisible_by_the_pyramid_is_rejected() {
    let mut cfg = tiny_config();
    cfg["dataset"]["synth"]["height"] = json!(50);
    cfg["model"]["stages"] = json!(3);
    let ws = Workspace::new(&cfg);
    let out = ws.run(&["gen", "--config", "run.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("divisible by 2^stages"), "{err}");
    assert!(!ws.path("data").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let mut cfg = tiny_config();
    cfg["train"]["learning_rate"] = json!(0.1);
    let ws = Workspace::new(&cfg);
    let out = ws.run(&["gen", "--config", "run.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_checkpoint_exits_with_io_code() {
    let ws = Workspace::new(&tiny_config());
    ws.ok("gen", &[]);
    let out = ws.run(&["eval", "--config", "run.json", "--checkpoint", "nowhere.ckpt"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn train_eval_sweep_ablate_and_plot() {
    let ws = Workspace::new(&tiny_config());
    ws.ok("gen", &[]);
    ws.ok("train", &["--variants", "full,no_scp"]);
    for v in ["full", "no_scp"] {
        for f in ["last.ckpt", "best.ckpt", "log.jsonl", "effective_config.json"] {
            assert!(ws.path(&format!("runs/{v}/{f}")).exists(), "{v}/{f}");
        }
    }
    let log = fs::read_to_string(ws.path("runs/full/log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r["split"] == "val"));
    assert_eq!(records.iter().filter(|r| r["split"] == "train").count(), 2);

    ws.ok("eval", &["--dump-fields"]);
    let eval_rows = csv_rows(&ws.path("runs/full/eval/metrics.csv"));
    assert_eq!(eval_rows.len(), 9);
    assert!(ws.path("runs/full/eval/fields.json").exists());

    ws.ok("sweep", &["--masks", "SSH,SSH+U+V,SSH+U+V+B"]);
    let rows = csv_rows(&ws.path("runs/full/sweep/sweep.csv"));
    assert_eq!(rows.len(), 9);
    for mask in ["SSH", "SSH+U+V", "SSH+U+V+B"] {
        assert_eq!(rows.iter().filter(|r| r[1] == mask).count(), 3);
    }

    let table = ws.ok("ablate", &[]);
    assert!(table.contains("| full | no_scp |"), "{table}");
    assert!(table.contains("Incomplete Observation (SSH)"));
    let rows = csv_rows(&ws.path("runs/ablation/ablation.csv"));
    assert_eq!(rows.len(), 18);
    assert_eq!(rows.iter().filter(|r| r[0] == "no_scp").count(), 9);

    let out = ws.run(&[
        "plot",
        "--csv",
        "runs/full/sweep/sweep.csv",
        "--fields",
        "runs/full/eval/fields.json",
        "--out",
        "plots",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for chart in ["rmse.svg", "mae.svg", "pcc.svg"] {
        let svg = fs::read_to_string(ws.path(&format!("plots/{chart}"))).unwrap();
        assert!(svg.starts_with("<svg"), "{chart}");
    }
    let heatmaps: Vec<String> = fs::read_dir(ws.path("plots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    assert_eq!(heatmaps.len(), 9, "{heatmaps:?}");
    for name in &heatmaps {
        let bytes = fs::read(ws.path(&format!("plots/{name}"))).unwrap();
        assert_eq!(&bytes[..4], b"\x89PNG");
    }
}

#[test]
fn resume_matches_uninterrupted_training() {
    let mut cfg = tiny_config();
    cfg["train"]["epochs"] = json!(1);
    let ws = Workspace::new(&cfg);
    ws.ok("gen", &[]);
    ws.ok("train", &["--out", "half"]);

    cfg["train"]["epochs"] = json!(2);
    fs::write(ws.path("run.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    ws.ok("train", &["--out", "resumed", "--resume", "half/last.ckpt"]);
    ws.ok("train", &["--out", "straight"]);
    let resumed = Checkpoint::load(&ws.path("resumed/last.ckpt")).unwrap();
    let straight = Checkpoint::load(&ws.path("straight/last.ckpt")).unwrap();
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.adam_m, straight.adam_m);
    assert_eq!(resumed.adam_v, straight.adam_v);
    assert_eq!((resumed.epoch, resumed.step), (straight.epoch, straight.step));
    let strip = |p: &str| -> Vec<Value> {
        fs::read_to_string(ws.path(p))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_s");
                v
            })
            .collect()
    };
    assert_eq!(strip("resumed/log.jsonl"), strip("straight/log.jsonl"));
}

#[test]
fn zero_learning_rate_keeps_the_initial_parameters() {
    let mut cfg = tiny_config();
    cfg["train"]["lr"] = json!(0.0);
    cfg["train"]["epochs"] = json!(1);
    let ws = Workspace::new(&cfg);
    ws.ok("gen", &[]);
    ws.ok("train", &["--out", "a"]);
    cfg["train"]["epochs"] = json!(3);
    fs::write(ws.path("run.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    ws.ok("train", &["--out", "b"]);
    let val = |p: &str| -> Vec<f64> {
        fs::read_to_string(ws.path(p))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .filter(|v| v["split"] == "val")
            .map(|v| v["loss"].as_f64().unwrap())
            .collect()
    };
    let a = val("a/log.jsonl");
    let b = val("b/log.jsonl");
    assert_eq!(b.len(), 3);
    assert!(b.iter().all(|&v| v == a[0]));
}

#[test]
fn entropy_check_prints_counts() {
    let ws = Workspace::new(&tiny_config());
    let stdout = ws.ok("entropy-check", &["--trials", "20", "--out", "ent"]);
    assert!(stdout.contains("exact discrete             20/20 passed"), "{stdout}");
    assert!(stdout.contains("gaussian                   20/20 passed"), "{stdout}");
    let report: Value = serde_json::from_slice(&fs::read(ws.path("ent/entropy.json")).unwrap()).unwrap();
    assert_eq!(report["exact_discrete"]["trials"], 20);
}

#[test]
fn plotting_an_empty_csv_fails_without_writing() {
    let ws = Workspace::new(&tiny_config());
    fs::write(ws.path("empty.csv"), "variant,mask,depth,rmse,mae,pcc,n,pcc_skipped\n").unwrap();
    let out = ws.run(&["plot", "--csv", "empty.csv", "--out", "plots"]);
    assert!(!out.status.success());
    assert!(!ws.path("plots").exists());
}
