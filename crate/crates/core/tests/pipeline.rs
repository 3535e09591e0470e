use ctrl_core::config::RunConfig;
use ctrl_core::experiment::{evaluate, run_ablation, run_finetune, Arm, Prepared};
use ctrl_core::metrics::auc;
use ctrl_core::synthetic::{gen_synthetic, LabelRule, SyntheticSpec};

#[test]
fn separable_labels_are_learned() {
    let spec = SyntheticSpec::uniform(4, 4, 4000, LabelRule::Xor, 0.0, 1);
    let data = gen_synthetic(&spec).unwrap();
    assert_eq!(data.bayes_auc, 1.0);
    let mut cfg = RunConfig::default();
    cfg.finetune.batch_size = 128;
    cfg.finetune.max_epochs = 20;
    let prep = Prepared::build(&data.rows, &data.schema, &cfg).unwrap();
    let (model, report) = run_finetune(&prep, &cfg, None).unwrap();
    assert!(report.epochs.len() <= 20);
    let (rows, _) = prep.split("train").unwrap();
    let scores = model.predict(&prep.schema, rows, 1024).unwrap();
    let labels: Vec<f64> = rows.iter().map(|r| f64::from(r.label)).collect();
    let train_auc = auc(&scores, &labels).unwrap();
    assert!(train_auc > 0.99, "train auc {train_auc}");
    let test = evaluate(&prep, &model, "mlp", "test", cfg.seed).unwrap();
    assert!(test.auc > 0.99, "test auc {}", test.auc);
}

fn small_run(seed: u64) -> String {
    let data = gen_synthetic(&SyntheticSpec::uniform(4, 5, 200, LabelRule::Xor, 0.1, 3)).unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.collab.embed_dim = 4;
    cfg.collab.attention_heads = 1;
    cfg.collab.head_dim = 4;
    cfg.text.dim = 8;
    cfg.text.ff_dim = 16;
    cfg.text.layers = 1;
    cfg.align.proj_dim = 16;
    cfg.align.batch_size = 16;
    cfg.finetune.batch_size = 32;
    cfg.finetune.max_epochs = 2;
    let prep = Prepared::build(&data.rows, &data.schema, &cfg).unwrap();
    let results = run_ablation(&prep, &cfg, &Arm::ALL).unwrap();
    assert_eq!(results.len(), 4);
    assert!(results.windows(2).all(|w| w[0].stage2_hash == w[1].stage2_hash));
    serde_json::to_string(&results).unwrap()
}

#[test]
fn ablation_is_reproducible() {
    let a = small_run(4);
    assert_eq!(a, small_run(4));
    assert_ne!(a, small_run(5));
}
