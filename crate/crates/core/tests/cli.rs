use std::path::Path;
use std::process::{Command, Output};

use ctrl_core::config::RunConfig;
use ctrl_core::encoders::TextConfig;

fn ctrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrl")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ctrl(args);
    assert!(
        out.status.success(),
        "ctrl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ctrl(args).status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.collab.embed_dim = 4;
    cfg.collab.attention_heads = 1;
    cfg.collab.head_dim = 4;
    cfg.text = TextConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        ff_dim: 16,
        max_len: 64,
    };
    cfg.align.proj_dim = 16;
    cfg.align.batch_size = 16;
    cfg.finetune.batch_size = 64;
    cfg.finetune.max_epochs = 2;
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let cfg = small_config(tmp.path());

    ok(&["gen-synthetic", "--out", &p("raw"), "--fields", "4", "--vocab", "5", "--rows", "300", "--rule", "xor", "--noise", "0.1"]);
    assert!(tmp.path().join("raw/schema.json").exists());
    let csv = p("raw/data.csv");

    ok(&["--config", &cfg, "prepare", "--data", &csv, "--out", &p("prep"), "--emit-prompts"]);
    let prompts = std::fs::read_to_string(tmp.path().join("prep/prompts_train.txt")).unwrap();
    assert!(prompts.lines().next().unwrap().starts_with("This is a user, "));

    let stdout = ok(&["--config", &cfg, "align", "--data", &p("prep"), "--out", &p("align.ckpt")]);
    assert!(stdout.contains("loss"));
    let curve = std::fs::read_to_string(p("align.ckpt.loss.csv")).unwrap();
    assert!(curve.lines().count() > 1);

    ok(&["--config", &cfg, "finetune", "--data", &p("prep"), "--init", &p("align.ckpt"), "--out", &p("ctr.ckpt")]);
    assert!(tmp.path().join("ctr.ckpt.report.json").exists());

    ok(&["evaluate", "--data", &p("prep"), "--checkpoint", &p("ctr.ckpt"), "--out", &p("eval.json")]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("eval.json")).unwrap()).unwrap();
    assert_eq!(report["split"], "test");
    assert!(report["auc"].as_f64().unwrap() > 0.0);

    let stdout = ok(&["--config", &cfg, "dump-embeddings", "--data", &p("prep"), "--checkpoint", &p("align.ckpt"), "--out", &p("emb.csv")]);
    assert!(stdout.contains("gap"));
    ok(&["project2d", "--data", &p("emb.csv"), "--out", &p("proj.csv")]);
    let proj = std::fs::read_to_string(p("proj.csv")).unwrap();
    assert!(proj.starts_with("row_id,modality,x,y"));

    ok(&["--config", &cfg, "ablate", "--data", &p("prep"), "--arms", "ctrl,no_align", "--out", &p("ablation")]);
    let table = std::fs::read_to_string(tmp.path().join("ablation/ablation.txt")).unwrap();
    assert!(table.contains("ctrl") && table.contains("no_align"));

    ok(&["--config", &cfg, "sweep", "--data", &p("prep"), "--temperatures", "0.5,1.0", "--batch-sizes", "16", "--out", &p("sweep")]);
    let sweep = std::fs::read_to_string(tmp.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["--prompt-variant", "7", "prepare", "--data", "x.csv", "--out", "y"]), 1);
    assert_eq!(code(&["align", "--data", &p("missing"), "--out", &p("a.ckpt")]), 2);

    std::fs::write(p("bad.json"), r#"{"version": 1, "colab": {}}"#).unwrap();
    assert_eq!(code(&["--config", &p("bad.json"), "prepare", "--data", "x.csv", "--out", "y"]), 1);
    std::fs::write(p("old.json"), r#"{"version": 9}"#).unwrap();
    assert_eq!(code(&["--config", &p("old.json"), "prepare", "--data", "x.csv", "--out", "y"]), 1);

    ok(&["gen-synthetic", "--out", &p("raw"), "--fields", "3", "--rows", "120", "--vocab", "4"]);
    let cfg = small_config(tmp.path());
    ok(&["--config", &cfg, "prepare", "--data", &p("raw/data.csv"), "--out", &p("prep")]);
    assert_eq!(code(&["ablate", "--data", &p("prep"), "--arms", "ctrl,bogus", "--out", &p("abl")]), 1);

    std::fs::write(p("junk.ckpt"), b"CTRLCKPT not really").unwrap();
    assert_eq!(code(&["evaluate", "--data", &p("prep"), "--checkpoint", &p("junk.ckpt")]), 2);
    assert_eq!(code(&["project2d", "--data", &p("absent.csv"), "--out", &p("o.csv")]), 2);
}

#[test]
fn help_exits_zero() {
    let out = ctrl(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["prepare", "align", "finetune", "evaluate", "ablate", "sweep", "dump-embeddings", "project2d", "gen-synthetic"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}
