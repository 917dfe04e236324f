use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bimodal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bimodal"))
        .args(args)
        .env_remove("BIMODAL_MANIFEST")
        .env_remove("BIMODAL_VOCAB")
        .env_remove("BIMODAL_CHECKPOINT_DIR")
        .env_remove("BIMODAL_LOG_DIR")
        .env_remove("BIMODAL_INIT_CHECKPOINT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bimodal(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        Self { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_string_lossy().into_owned()
    }

    /// Overrides shared by every config-driven command: tiny model, few steps.
    fn sets(&self, extra: &[String]) -> Vec<String> {
        let mut kv = vec![
            format!("manifest={}", self.path("toy/manifest.tsv")),
            format!("vocab={}", self.path("vocab.json")),
            format!("checkpoint_dir={}", self.path("ckpt")),
            format!("log_dir={}", self.path("logs")),
            "vocab_size=300".into(),
            "vision_layers=1".into(),
            "text_layers=1".into(),
            "batch_size=8".into(),
            "steps=4".into(),
            "warmup_steps=1".into(),
        ];
        kv.extend_from_slice(extra);
        kv.into_iter().flat_map(|s| ["--set".to_string(), s]).collect()
    }

    fn run(&self, cmd: &str, extra: &[String]) -> Output {
        let mut args = vec![cmd.to_string()];
        args.extend(self.sets(extra));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        bimodal(&refs)
    }

    fn run_ok(&self, cmd: &str, extra: &[String]) {
        let out = self.run(cmd, extra);
        assert!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn prepare(&self) {
        ok(&["gen-toy-data", "--out", &self.path("toy"), "--concepts", "4", "--samples", "4"]);
        self.run_ok("tokenizer-train", &[]);
        self.run_ok("pretrain-mae", &[]);
    }

    fn train(&self, extra: &[String]) {
        let mut kv = vec![format!("init_checkpoint={}", self.path("ckpt/mae_export.ckpt"))];
        kv.extend_from_slice(extra);
        self.run_ok("train", &kv);
    }
}

fn final_loss(path: &Path) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    let last = text.lines().last().expect("metrics written");
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    v["loss"].as_f64().unwrap()
}

#[test]
fn misspelled_key_is_a_config_error() {
    let ws = Workspace::new();
    let cfg = ws.root.join("bad.toml");
    fs::write(&cfg, "phase = \"contrastive\"\nlearning_rte = 0.001\n").unwrap();
    let out = bimodal(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rte"));

    let out = bimodal(&["pretrain-mae", "--set", "mask_ratoi=0.5"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask_ratoi"));
}

#[test]
fn config_phase_must_match_command() {
    let ws = Workspace::new();
    let cfg = ws.root.join("mae.toml");
    fs::write(&cfg, "phase = \"mae\"\n").unwrap();
    let out = bimodal(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let ws = Workspace::new();
    let out = ws.run("pretrain-mae", &[]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_end_to_end() {
    let ws = Workspace::new();
    ws.prepare();

    // A vision-only export is not a contrastive model.
    let out = bimodal(&[
        "eval-zeroshot",
        "--checkpoint",
        &ws.path("ckpt/mae_export.ckpt"),
        "--vocab",
        &ws.path("vocab.json"),
        "--manifest",
        &ws.path("toy/manifest.tsv"),
        "--language",
        "synthetic-A",
        "--out",
        &ws.path("zs.json"),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    ws.train(&[]);
    let ck = ws.path("ckpt/contrastive.ckpt");
    let vocab = ws.path("vocab.json");
    let manifest = ws.path("toy/manifest.tsv");
    assert!(ws.root.join("ckpt/run_manifest.train.json").exists());

    ok(&[
        "eval-zeroshot", "--checkpoint", &ck, "--vocab", &vocab, "--manifest", &manifest, "--language", "synthetic-B",
        "--out", &ws.path("eval/zs.json"),
    ]);
    let zs: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.root.join("eval/zs.json")).unwrap()).unwrap();
    assert_eq!(zs["task"], "zeroshot");
    assert!(zs["metrics"]["top1"].as_f64().unwrap() >= 0.0);

    ok(&[
        "eval-retrieval", "--checkpoint", &ck, "--vocab", &vocab, "--manifest", &manifest, "--ks", "1,5",
        "--out", &ws.path("eval/ret.json"),
    ]);
    let ret: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.root.join("eval/ret.json")).unwrap()).unwrap();
    for key in ["i2t_r@1", "i2t_r@5", "t2i_r@1", "t2i_r@5"] {
        let r = ret["metrics"][key].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&r), "{key} = {r}");
    }

    let rows = ws.root.join("rows.txt");
    let cols = ws.root.join("cols.txt");
    fs::write(&rows, "red circle\nblue square\n").unwrap();
    fs::write(&cols, "rot kreis\nblau quadrat\n").unwrap();
    ok(&[
        "heatmap", "--checkpoint", &ck, "--vocab", &vocab, "--rows", rows.to_str().unwrap(), "--cols",
        cols.to_str().unwrap(), "--out", &ws.path("eval/heat.csv"),
    ]);
    let csv = fs::read_to_string(ws.root.join("eval/heat.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 3);

    let image = ws.path("toy/images/c00_0000.png");
    let index = ws.path("eval/gallery.ckpt");
    ok(&[
        "analogy", "--checkpoint", &ck, "--vocab", &vocab, "--gallery", &manifest, "--save-index", &index,
        "--image", &image, "--text", "blue", "--weight", "2", "--k", "3", "--out", &ws.path("eval/analogy.json"),
    ]);
    let hits: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.root.join("eval/analogy.json")).unwrap()).unwrap();
    assert_eq!(hits.as_array().unwrap().len(), 3);

    ok(&[
        "sweep-w", "--checkpoint", &ck, "--vocab", &vocab, "--index", &index, "--image", &image, "--text", "blue",
        "--weights", "1,3", "--k", "2", "--out", &ws.path("eval/sweep.json"),
    ]);
    let sweep: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.root.join("eval/sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep.as_array().unwrap().len(), 2);

    let scores = ws.root.join("scores.tsv");
    let records = fs::read_to_string(&manifest).unwrap();
    let mut table = String::new();
    for (i, line) in records.lines().enumerate() {
        let image_ref = line.split('\t').next().unwrap();
        let sim = if i % 3 == 0 { 0.1 } else { 0.5 };
        table.push_str(&format!("{image_ref}\t{sim}\t0.0\n"));
    }
    fs::write(&scores, table).unwrap();
    let summary = ok(&[
        "filter-corpus", "--manifest", &manifest, "--scores", scores.to_str().unwrap(), "--out-dir", &ws.path("clean"),
    ]);
    assert!(summary.contains("low_similarity") && !summary.contains("low_similarity 0 "));
    assert!(ws.root.join("clean/filter_report.jsonl").exists());
    ok(&[
        "filter-corpus", "--manifest", &manifest, "--checkpoint", &ck, "--vocab", &vocab, "--out-dir", &ws.path("clean2"),
    ]);
    assert!(ws.root.join("clean2/manifest.tsv").exists());
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let ws = Workspace::new();
    ws.prepare();
    let metrics = ws.root.join("logs/train_metrics.jsonl");
    ws.train(&["seed=5".into()]);
    let a = final_loss(&metrics);
    ws.train(&["seed=5".into()]);
    let b = final_loss(&metrics);
    assert_eq!(a.to_bits(), b.to_bits());
    ws.train(&["seed=5".into(), "workers=2".into()]);
    let c = final_loss(&metrics);
    assert!(c.is_finite());
}
