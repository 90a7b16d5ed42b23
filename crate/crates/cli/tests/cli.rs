use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn tipqc(dir: &Path, args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_tipqc")).current_dir(dir).args(args).output().unwrap();
    (out.status.success(), String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (success, stdout, stderr) = tipqc(dir, args);
    assert!(success, "tipqc {args:?} failed:\n{stderr}");
    stdout
}

fn json_lines(s: &str) -> Vec<Value> {
    s.lines().filter(|l| l.starts_with('{')).map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn end_to_end_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("train.toml"), "[features]\ngrid = [10, 4]\n[train]\nepochs = 60\n").unwrap();
    std::fs::write(d.join("pipeline.toml"), "data_dir = \"data\"\nmodel = \"model.json\"\nmanifest = \"data/manifest.jsonl\"\n").unwrap();

    ok(d, &["fixtures", "generate", "--n", "60", "--seed", "1", "--out-dir", "fx"]);
    let sidecar = std::fs::read_to_string(d.join("fx/ground_truth.tsv")).unwrap();
    assert_eq!(sidecar.lines().count(), 60);

    let reports = json_lines(&ok(d, &["gate", "check", "fx"]));
    assert_eq!(reports.len(), 60);
    assert!(reports.iter().all(|r| r["q"].as_f64().unwrap() >= 0.5), "clean fixtures pass the gate");

    let trained = json_lines(&ok(d, &["scorer", "train", "--listing", "fx/ground_truth.tsv", "--config", "train.toml", "--out", "model.json"]));
    assert!(trained[0]["train_accuracy"].as_f64().unwrap() > 0.9);
    let scored = json_lines(&ok(d, &["scorer", "score", "fx/fixture_000000.png", "--model", "model.json"]));
    let (f, c) = (scored[0]["f"].as_f64().unwrap(), scored[0]["c"].as_f64().unwrap());
    assert_eq!(c, f.max(1.0 - f));

    let ingested = json_lines(&ok(d, &["curate", "ingest", "fx", "--config", "pipeline.toml"]));
    assert_eq!(ingested.len(), 60);
    if let Some(r) = ingested.iter().find(|o| o["decision"] == "R") {
        let id = r["record_id"].as_str().unwrap();
        let rec = json_lines(&ok(d, &["curate", "label", id, "--label", "1", "--config", "pipeline.toml"]));
        assert_eq!(rec[0]["final_label"], 1);
    }

    ok(d, &["synth", "plan", "--n", "20", "--ref", "files/ref-1", "--seed", "3", "--out", "specs.jsonl"]);
    ok(d, &["synth", "build", "--specs", "specs.jsonl", "--out", "batch.jsonl"]);
    ok(d, &["synth", "run", "--batch", "batch.jsonl", "--out", "results.jsonl", "--width", "120", "--height", "300"]);
    let imported = json_lines(&ok(d, &["synth", "import", "--batch", "batch.jsonl", "--results", "results.jsonl", "--out-dir", "cands"]));
    assert_eq!(imported[0]["imported"], 20);
    let filtered = json_lines(&ok(d, &["synth", "filter", "--candidates", "cands/candidates.tsv", "--config", "pipeline.toml"]));
    assert_eq!(filtered[0]["stats"]["total"], 20);

    let stats: Value = serde_json::from_str(&ok(d, &["curate", "stats", "--config", "pipeline.toml"])).unwrap();
    assert_eq!(stats["real"], 60);
    assert_eq!(stats["virtual"], 20);
    let routes = &stats["routes"];
    assert_eq!(routes["A"].as_u64().unwrap() + routes["R"].as_u64().unwrap() + routes["D"].as_u64().unwrap(), 60);

    ok(d, &["curate", "split", "--config", "pipeline.toml", "--spec", "ratios:0.6,0.2,0.2", "--seed", "5"]);
    let mixed = json_lines(&ok(d, &["curate", "mix", "--config", "pipeline.toml", "--budget", "8", "--fraction", "0.25"]));
    assert_eq!((mixed[0]["syn"].as_u64(), mixed[0]["real"].as_u64()), (Some(2), Some(6)));
    let listing = ok(d, &["curate", "export", "--config", "pipeline.toml", "--split", "mix"]);
    assert_eq!(listing.lines().count(), 8);
    assert_eq!(listing.lines().filter(|l| l.contains("\tVIRTUAL\t")).count(), 2);

    let m = ok(d, &["eval", "metrics", "--manifest", "data/manifest.jsonl", "--split", "test", "--model", "model.json"]);
    let m = json_lines(&m);
    assert!(m[0]["metrics"]["n"].as_u64().unwrap() > 0);

    let cost = json_lines(&ok(d, &["eval", "cost", "--generated", "3600", "--kept", "3022", "--total-cost", "68"]));
    assert!((cost[0]["acceptance_rate"].as_f64().unwrap() - 0.839).abs() < 1e-3);

    let replayed = json_lines(&ok(d, &["curate", "replay", "--config", "pipeline.toml"]));
    assert_eq!(replayed[0]["matches_open"], true);

    let (success, _, stderr) = tipqc(d, &["curate", "split", "--config", "pipeline.toml", "--spec", "counts:900/900,1/1,1/1"]);
    assert!(!success);
    assert!(stderr.contains("need"), "{stderr}");
}

#[test]
fn standardize_and_augment_keep_the_target_size() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let img = image::RgbImage::from_fn(300, 800, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
    img.save(d.join("small.png")).unwrap();
    ok(d, &["curate", "standardize", "small.png", "--out", "std.png"]);
    let out = image::open(d.join("std.png")).unwrap();
    assert_eq!((out.width(), out.height()), (600, 1500));
    let lines = ok(d, &["curate", "augment", "std.png", "--out-dir", "aug", "--copies", "2", "--seed", "9"]);
    assert_eq!(lines.lines().count(), 2);
    let a = image::open(d.join("aug/std_aug1.png")).unwrap();
    assert_eq!((a.width(), a.height()), (600, 1500));
}
