use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
    "seed": 3,
    "text_sim": {"channels": 8, "max_tokens": 6, "global_max_tokens": 8, "max_instances": 2},
    "ide": {"s": 2, "n_layers": 1, "heads": 2, "time_dim": 8},
    "dfm": {"n_freqs": 2, "heads": 2},
    "diffusion": {"grid_h": 4, "grid_w": 4, "patch": 2, "d_model": 8, "blocks": 1, "heads": 2, "t_max": 4, "beta_end": 0.3},
    "train": {"pretrain_steps": 3, "steps": 3, "batch_size": 2},
    "bench": {"min_instances": 2, "max_instances": 2, "person_fraction": 0.0,
              "object_level_weights": [1.0, 0.0, 0.0, 0.0], "snap": 8, "resolution": 8},
    "experiment": {"train_scenes": 4, "eval_scenes": 2, "s_sweep": [1, 2]}
}"#;

fn deig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deig"))
        .args(args)
        .env_remove("DEIG_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(deig(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(deig(&["sample"]).status.code(), Some(1));
    assert_eq!(deig(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "ide": {"depth": 3}}"#).unwrap();
    let out = deig(&["gen-bench", "--config", p(&bad), "--out", p(&dir.path().join("b"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));
}

#[test]
fn gradcheck_passes_and_names_corrupted_op() {
    let ok = deig(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.lines().filter(|l| l.ends_with("PASS")).count() >= 20, "{text}");
    let bad = deig(&["gradcheck", "--corrupt", "layer_norm"]);
    assert_eq!(bad.status.code(), Some(3));
    let text = String::from_utf8_lossy(&bad.stdout);
    let failed: Vec<&str> = text.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert!(failed.iter().any(|l| l.starts_with("layer_norm")), "{text}");
}

#[test]
fn ground_truth_bench_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    let out = deig(&["gen-bench", "--out", p(&bench), "--count", "12"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = dir.path().join("report.json");
    let out = deig(&["eval", "--bench", p(&bench), "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(json["miou"].as_f64().unwrap() >= 0.95);
    for (_, v) in json["levels"].as_object().unwrap() {
        assert_eq!(v["maa"].as_f64(), Some(1.0));
    }
    assert!(bench.join("config.json").exists());
}

#[test]
fn train_sample_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = dir.path().join("run").join("model.ckpt");
    let out = deig(&["train", "--config", p(&cfg), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run").join("loss.csv").exists());
    assert!(dir.path().join("run").join("config.json").exists());

    let bench = dir.path().join("bench");
    assert!(deig(&["gen-bench", "--config", p(&cfg), "--out", p(&bench), "--count", "1"]).status.success());
    let scene = bench.join("scene_00000.json");
    let img = dir.path().join("s.ppm");
    assert!(deig(&["sample", "--ckpt", p(&ckpt), "--scene", p(&scene), "--seed", "4", "--out", p(&img)]).status.success());
    assert!(std::fs::read(&img).unwrap().starts_with(b"P6\n8 8\n255\n"));

    let attn = dir.path().join("attn.csv");
    assert!(deig(&["dump-attn", "--ckpt", p(&ckpt), "--scene", p(&scene), "--t", "2", "--out", p(&attn)]).status.success());
    let csv = std::fs::read_to_string(&attn).unwrap();
    assert!(csv.starts_with("module,layer,instance,head,query,key,weight\n"));
    assert!(csv.contains("\nide,0,1,") && csv.contains("\ndfm,0,,"));

    let masks = dir.path().join("mask");
    assert!(deig(&["dump-mask", "--config", p(&cfg), "--scene", p(&scene), "--out", p(&masks)]).status.success());
    // 16 visual tokens plus two instances of S = 2
    assert!(std::fs::read(masks.join("mask.pgm")).unwrap().starts_with(b"P5\n20 20\n255\n"));
}

#[test]
fn seed_override_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let train = |name: &str, seed: Option<&str>| {
        let ckpt = dir.path().join(name).join("model.ckpt");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_deig"));
        cmd.args(["train", "--config", p(&cfg), "--out", p(&ckpt)]).env_remove("DEIG_SEED");
        if let Some(s) = seed {
            cmd.env("DEIG_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(ckpt).unwrap()
    };
    let a = train("a", None);
    assert_eq!(a, train("b", None));
    assert_ne!(a, train("c", Some("99")));
    let echoed = std::fs::read_to_string(dir.path().join("c").join("config.json")).unwrap();
    assert!(echoed.contains("\"seed\": 99"));
}

#[test]
fn corrupted_checkpoint_is_a_contract_violation() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"DEIGCKPT but not really").unwrap();
    let scene = dir.path().join("scene.json");
    std::fs::write(&scene, "{}").unwrap();
    let out = deig(&["sample", "--ckpt", p(&ckpt), "--scene", p(&scene), "--out", p(&dir.path().join("x.ppm"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablation_writes_arms_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("abl");
    let out = deig(&["ablate", "--what", "mask", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let on = std::fs::read_to_string(out_dir.join("mask_on").join("config.json")).unwrap();
    let off = std::fs::read_to_string(out_dir.join("mask_off").join("config.json")).unwrap();
    let changed: Vec<(&str, &str)> = on.lines().zip(off.lines()).filter(|(a, b)| a != b).collect();
    assert_eq!(changed, [("    \"mask\": \"instance\",", "    \"mask\": \"none\",")]);
}
