use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3

[structure]
n_layers = 1
channels = [4]
kernel_sizes = [3]
embed_dim = 6
pool_bins = 4

[fit]
steps = 4

[subtype]
k = 2

[encoder]
e2n_channels = 4
n2g_dim = 8
embed_dim = 4

[trainer]
epochs = 3
batch_size = 4
queue_capacity = 16

[eval]
folds = 2

[synth]
n_per_class = 8
k_true = 2
m_rois = 6
t_len = 24
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_brainscl"))
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

fn run(cfg: &Path, wd: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(cfg).arg("--workdir").arg(wd).arg("--single-thread").args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn print_defaults_parses_back() {
    let out = bin().args(["config", "--print-defaults"]).output().unwrap();
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[trainer]"));
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("d.toml");
    fs::write(&p, &text).unwrap();
    ok(&bin().arg("--config").arg(&p).arg("config").output().unwrap());
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = bin().arg("ingest").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("bad.toml");
    fs::write(&p, "[trainer]\nnot_a_key = 1\n").unwrap();
    let out = bin().arg("--config").arg(&p).arg("--workdir").arg(tmp.path()).arg("ingest").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ingest_accepts_synth_and_reports_missing_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path());
    let wd = tmp.path().join("wd");
    ok(&run(&cfg, &wd, &["synth"]));
    let manifest = wd.join("synth/manifest.json");
    assert!(manifest.is_file());

    let with_manifest = tmp.path().join("m.toml");
    fs::write(&with_manifest, format!("{SMALL}\n[paths]\nmanifest = {:?}\n", manifest.display().to_string())).unwrap();
    let wd2 = tmp.path().join("wd2");
    ok(&run(&with_manifest, &wd2, &["ingest"]));
    assert!(wd2.join("cohort/summary.json").is_file());

    // Remove one subject's series file.
    let entries: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let victim = &entries[2];
    let id = victim["id"].as_str().unwrap().to_string();
    fs::remove_file(wd.join("synth").join(victim["series_path"].as_str().unwrap())).unwrap();
    let out = run(&with_manifest, &tmp.path().join("wd3"), &["ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&id));
}

#[test]
fn pipeline_is_deterministic_and_resumable() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&run(&cfg, &a, &["pipeline"]));
    ok(&run(&cfg, &b, &["pipeline"]));
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(ma.clone()).unwrap();
    assert!(text.starts_with("variant,k,seed,fold,acc,auc,sen,spec"));
    assert!(text.lines().any(|l| l.contains(",mean,")));

    // Rerunning reuses every stage and reproduces the metrics.
    let stamp = fs::metadata(a.join("stages/train.json")).unwrap().modified().unwrap();
    ok(&run(&cfg, &a, &["pipeline"]));
    assert_eq!(fs::metadata(a.join("stages/train.json")).unwrap().modified().unwrap(), stamp);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), ma);

    // Stage-by-stage execution matches the one-shot run.
    let c = tmp.path().join("c");
    for stage in ["ingest", "structures", "views", "fuse", "subtype", "prototype", "train", "evaluate"] {
        ok(&run(&cfg, &c, &[stage]));
    }
    assert_eq!(fs::read(c.join("metrics.csv")).unwrap(), ma);

    // A forced rerun recomputes and still matches.
    ok(&run(&cfg, &a, &["--force", "train"]));
    ok(&run(&cfg, &a, &["evaluate"]));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), ma);
}

#[test]
fn supervised_variant_has_no_contrastive_artifacts() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("s.toml");
    fs::write(&p, format!("{SMALL}\n[run]\nvariant = \"s\"\n")).unwrap();
    let wd = tmp.path().join("wd");
    ok(&run(&p, &wd, &["pipeline"]));
    let fold = wd.join("runs/seed-3/fold-0");
    let ckpt = fold.join("train/checkpoint");
    assert!(ckpt.join("state.json").is_file());
    assert!(!ckpt.join("queues").exists());
    assert!(!ckpt.join("prototype_embeddings.csv").exists());
    assert!(!fold.join("prototype/prototypes.json").exists());
    let text = fs::read_to_string(wd.join("metrics.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.starts_with("s,")));
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("a.toml");
    fs::write(&p, format!("{SMALL}\n[ablation]\nvariants = [\"s\", \"cl\", \"full\"]\nseeds = [0]\n")).unwrap();
    let wd = tmp.path().join("wd");
    ok(&run(&p, &wd, &["ablate"]));
    let table = fs::read_to_string(wd.join("ablation/table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert!(rows[0].starts_with("method,k,acc_mean"));
    assert_eq!(rows.len(), 4);

    let p = tmp.path().join("k.toml");
    fs::write(&p, format!("{SMALL}\n[ablation]\nvariants = [\"full\"]\nk_sweep = [2, 3, 4]\nseeds = [0]\n")).unwrap();
    let wd = tmp.path().join("wdk");
    ok(&run(&p, &wd, &["ablate"]));
    let table = fs::read_to_string(wd.join("ablation/table.csv")).unwrap();
    let ks: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ks, vec!["2", "3", "4"]);

    let p = tmp.path().join("e.toml");
    fs::write(&p, format!("{SMALL}\n[ablation]\nvariants = []\n")).unwrap();
    let out = run(&p, &tmp.path().join("wde"), &["ablate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_needs_upstream_and_writes_top_regions() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("r.toml");
    fs::write(&p, format!("{SMALL}\n[report]\ntop_n = 4\n")).unwrap();
    let wd = tmp.path().join("wd");
    let out = run(&p, &wd, &["report"]);
    assert_eq!(out.status.code(), Some(2));
    ok(&run(&p, &wd, &["pipeline"]));
    ok(&run(&p, &wd, &["report"]));
    let dir = wd.join("report/seed-3/fold-0/top_regions");
    let files: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!files.is_empty());
    for f in files {
        let text = fs::read_to_string(&f).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "rank,roi_index,roi_name,network,strength");
        assert_eq!(lines.len(), 5, "{}", f.display());
    }
    assert!(wd.join("report/seed-3/fold-0/loss/train.csv").is_file());
}
