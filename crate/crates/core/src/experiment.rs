//! Run orchestration: prepared datasets, the two training stages, the
//! ablation arms and the temperature/batch sweep.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{align_train, write_loss_curve, AlignData, AlignReport, AlignmentModel, Similarity};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::config::RunConfig;
use crate::data::{read_raw_csv, FeatureSchema, PreparedData, RawRow, TabularInstance};
use crate::error::{CtrlError, Result};
use crate::finetune::{end_to_end_train, finetune, CtrModel, FinetuneReport, JointModel, TrainSet};
use crate::metrics::{format_table, EvalReport};
use crate::prompt::{build_prompt, Encoded, PromptTemplate, Tokenizer};
use crate::viz::{embedding_records, EmbeddingRecord};

/// Rows per chunk when projecting or scoring without gradients.
const EVAL_CHUNK: usize = 256;

/// Fitted schema, encoded splits and the prompts of every row.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub schema: FeatureSchema,
    pub data: PreparedData,
    pub template: PromptTemplate,
    /// Fitted on the training prompts only.
    pub tokenizer: Tokenizer,
    pub train_prompts: Vec<Encoded>,
    pub val_prompts: Vec<Encoded>,
    pub test_prompts: Vec<Encoded>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreparedMeta {
    prompt_variant: PromptTemplate,
    schema_hash: String,
    rows: [usize; 3],
}

impl Prepared {
    /// Splits by time, fits vocabularies and the tokenizer on train, renders
    /// every prompt.
    pub fn build(raw: &[RawRow], schema: &FeatureSchema, cfg: &RunConfig) -> Result<Self> {
        let (schema, data) = PreparedData::from_raw(raw, schema, &cfg.split)?;
        Self::from_parts(schema, data, cfg)
    }

    pub fn from_csv(data: &Path, schema: &Path, cfg: &RunConfig) -> Result<Self> {
        let schema = FeatureSchema::load(schema)?;
        let raw = read_raw_csv(data, &schema)?;
        Self::build(&raw, &schema, cfg)
    }

    fn from_parts(schema: FeatureSchema, data: PreparedData, cfg: &RunConfig) -> Result<Self> {
        let template = cfg.prompt_variant;
        let render = |rows: &[TabularInstance]| -> Result<Vec<String>> {
            rows.iter().map(|r| build_prompt(r, &schema, template)).collect()
        };
        let train_text = render(&data.train)?;
        let tokenizer = Tokenizer::fit(&train_text, cfg.tokenizer)?;
        let encode = |texts: Vec<String>| texts.iter().map(|t| tokenizer.encode(t)).collect::<Vec<_>>();
        let train_prompts = encode(train_text);
        let val_prompts = encode(render(&data.val)?);
        let test_prompts = encode(render(&data.test)?);
        Ok(Self {
            schema,
            data,
            template,
            tokenizer,
            train_prompts,
            val_prompts,
            test_prompts,
        })
    }

    /// Re-renders prompts when `cfg` asks for another template.
    pub fn with_config(self, cfg: &RunConfig) -> Result<Self> {
        if cfg.prompt_variant == self.template {
            return Ok(self);
        }
        Self::from_parts(self.schema, self.data, cfg)
    }

    pub fn split(&self, name: &str) -> Result<(&[TabularInstance], &[Encoded])> {
        let rows = self.data.split(name)?;
        let prompts = match name {
            "train" => &self.train_prompts,
            "test" => &self.test_prompts,
            _ => &self.val_prompts,
        };
        Ok((rows, prompts))
    }

    pub fn align_data(&self, split: &str) -> Result<AlignData<'_>> {
        let (rows, prompts) = self.split(split)?;
        Ok(AlignData {
            schema: &self.schema,
            rows,
            prompts,
        })
    }

    pub fn train_set(&self) -> TrainSet<'_> {
        TrainSet {
            schema: &self.schema,
            train: &self.data.train,
            val: &self.data.val,
        }
    }

    /// Writes `schema.json`, `splits.json`, `tokenizer.json` and
    /// `prepared.json`; with `emit_prompts` also `prompts_{split}.txt`, one
    /// prompt per line in row order.
    pub fn save(&self, dir: &Path, emit_prompts: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CtrlError::io(dir, e))?;
        self.schema.save(&dir.join("schema.json"))?;
        self.data.save(&dir.join("splits.json"))?;
        write_json(&dir.join("tokenizer.json"), &self.tokenizer)?;
        let meta = PreparedMeta {
            prompt_variant: self.template,
            schema_hash: self.schema.hash(),
            rows: [self.data.train.len(), self.data.val.len(), self.data.test.len()],
        };
        write_json(&dir.join("prepared.json"), &meta)?;
        if emit_prompts {
            for split in ["train", "val", "test"] {
                let rows = self.data.split(split)?;
                let mut text = String::new();
                for r in rows {
                    text.push_str(&build_prompt(r, &self.schema, self.template)?);
                    text.push('\n');
                }
                let path = dir.join(format!("prompts_{split}.txt"));
                fs::write(&path, text).map_err(|e| CtrlError::io(path, e))?;
            }
        }
        Ok(())
    }

    /// Reloads a prepared directory. Prompts are re-rendered with the
    /// stored template and encoded with the stored tokenizer.
    pub fn load(dir: &Path) -> Result<Self> {
        let schema = FeatureSchema::load(&dir.join("schema.json"))?;
        let data = PreparedData::load(&dir.join("splits.json"))?;
        let tokenizer = read_json::<Tokenizer>(&dir.join("tokenizer.json"))?.reindex();
        let meta: PreparedMeta = read_json(&dir.join("prepared.json"))?;
        if meta.schema_hash != schema.hash() {
            return Err(CtrlError::Schema(format!(
                "{} does not match the schema recorded at preparation",
                dir.join("schema.json").display()
            )));
        }
        let render = |rows: &[TabularInstance]| -> Result<Vec<Encoded>> {
            rows.iter()
                .map(|r| Ok(tokenizer.encode(&build_prompt(r, &schema, meta.prompt_variant)?)))
                .collect()
        };
        Ok(Self {
            train_prompts: render(&data.train)?,
            val_prompts: render(&data.val)?,
            test_prompts: render(&data.test)?,
            template: meta.prompt_variant,
            schema,
            data,
            tokenizer,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| CtrlError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CtrlError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Untrained stage-1 model for `prep`.
pub fn new_alignment_model(prep: &Prepared, cfg: &RunConfig) -> Result<AlignmentModel> {
    AlignmentModel::new(&prep.schema, prep.tokenizer.vocab_size(), &cfg.collab, &cfg.text, &cfg.align, cfg.seed)
}

/// Stage 1 on the training split.
pub fn run_align(prep: &Prepared, cfg: &RunConfig) -> Result<(AlignmentModel, AlignReport)> {
    let mut model = new_alignment_model(prep, cfg)?;
    let report = align_train(&mut model, &prep.align_data("train")?, cfg.seed)?;
    Ok((model, report))
}

/// Stage 2, from the aligned tower when `aligned` is given.
pub fn run_finetune(prep: &Prepared, cfg: &RunConfig, aligned: Option<&AlignmentModel>) -> Result<(CtrModel, FinetuneReport)> {
    let mut model = match aligned {
        Some(a) => CtrModel::from_aligned(&prep.schema, a, cfg.seed)?,
        None => CtrModel::new(&prep.schema, &cfg.collab, cfg.seed)?,
    };
    let report = finetune(&mut model, prep.train_set(), &cfg.finetune, cfg.seed)?;
    Ok((model, report))
}

/// Single-stage training on `L_ctr + lambda * L_ccl`.
pub fn run_end_to_end(prep: &Prepared, cfg: &RunConfig) -> Result<(CtrModel, FinetuneReport)> {
    let mut joint = JointModel::new(
        &prep.schema,
        prep.tokenizer.vocab_size(),
        &cfg.collab,
        &cfg.text,
        &cfg.align,
        cfg.seed,
    )?;
    let report = end_to_end_train(
        &mut joint,
        prep.train_set(),
        &prep.train_prompts,
        &cfg.finetune,
        &cfg.end_to_end,
        cfg.seed,
    )?;
    Ok((joint.to_ctr_model(&prep.schema, cfg.seed)?, report))
}

pub fn evaluate(prep: &Prepared, model: &CtrModel, name: &str, split: &str, seed: u64) -> Result<EvalReport> {
    model.evaluate(name, split, &prep.schema, prep.data.split(split)?, seed)
}

/// Representations of both towers in the shared similarity space (see
/// [`AlignmentModel::shared_rows`]) for every row of `split`,
/// tagged by modality. Row ids index the split.
pub fn dump_embeddings(prep: &Prepared, model: &AlignmentModel, split: &str) -> Result<Vec<EmbeddingRecord>> {
    let data = prep.align_data(split)?;
    let (tab, text) = model.shared_rows(&data, EVAL_CHUNK)?;
    let ids: Vec<usize> = (0..data.len()).collect();
    embedding_records(&ids, &tab, &text)
}

pub fn align_checkpoint(prep: &Prepared, cfg: &RunConfig, model: &AlignmentModel, report: Option<&AlignReport>) -> Checkpoint {
    Checkpoint::capture(
        ModelKind::Align,
        &prep.schema.hash(),
        prep.tokenizer.vocab_size(),
        cfg,
        &model.store,
        report.map(|r| &r.optimizer),
    )
}

pub fn ctr_checkpoint(prep: &Prepared, cfg: &RunConfig, model: &CtrModel) -> Checkpoint {
    Checkpoint::capture(ModelKind::Ctr, &prep.schema.hash(), prep.tokenizer.vocab_size(), cfg, &model.store, None)
}

/// Rebuilds a stage-1 model from its checkpoint.
pub fn load_alignment_model(prep: &Prepared, ckpt: &Checkpoint) -> Result<AlignmentModel> {
    expect_kind(ckpt, ModelKind::Align)?;
    ckpt.check_schema(&prep.schema.hash())?;
    let c = &ckpt.config;
    let mut model = AlignmentModel::new(&prep.schema, ckpt.text_vocab, &c.collab, &c.text, &c.align, c.seed)?;
    ckpt.restore(&mut model.store)?;
    Ok(model)
}

/// Rebuilds a stage-2 model from its checkpoint.
pub fn load_ctr_model(prep: &Prepared, ckpt: &Checkpoint) -> Result<CtrModel> {
    expect_kind(ckpt, ModelKind::Ctr)?;
    ckpt.check_schema(&prep.schema.hash())?;
    let mut model = CtrModel::new(&prep.schema, &ckpt.config.collab, ckpt.config.seed)?;
    ckpt.restore(&mut model.store)?;
    Ok(model)
}

fn expect_kind(ckpt: &Checkpoint, kind: ModelKind) -> Result<()> {
    if ckpt.kind != kind {
        return Err(CtrlError::Config(format!(
            "expected a {kind:?} checkpoint, got {:?}",
            ckpt.kind
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Maxsim alignment, then fine-tuning.
    Ctrl,
    /// Cosine alignment, then fine-tuning.
    CosineSim,
    /// Fine-tuning only.
    NoAlign,
    /// One stage on the summed objectives.
    EndToEnd,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Ctrl, Arm::CosineSim, Arm::NoAlign, Arm::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ctrl => "ctrl",
            Self::CosineSim => "cosine_sim",
            Self::NoAlign => "no_align",
            Self::EndToEnd => "end_to_end",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = CtrlError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CtrlError::Config(format!("unknown arm `{s}` (expected ctrl, cosine_sim, no_align or end_to_end)")))
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub val: EvalReport,
    pub test: EvalReport,
    pub finetune: FinetuneReport,
    /// Hash of the stage-2 settings; equal across arms of one ablation.
    pub stage2_hash: String,
}

/// Digest of everything stage 2 depends on apart from initialization.
pub fn stage2_hash(cfg: &RunConfig) -> String {
    let text = serde_json::to_string(&(&cfg.finetune, &cfg.collab, cfg.seed)).expect("serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn run_arm(prep: &Prepared, cfg: &RunConfig, arm: Arm) -> Result<ArmResult> {
    let (model, finetune) = match arm {
        Arm::Ctrl | Arm::CosineSim => {
            let mut c = cfg.clone();
            c.align.similarity = if arm == Arm::Ctrl { Similarity::MaxSim } else { Similarity::Cosine };
            let (aligned, _) = run_align(prep, &c)?;
            run_finetune(prep, &c, Some(&aligned))?
        }
        Arm::NoAlign => run_finetune(prep, cfg, None)?,
        Arm::EndToEnd => run_end_to_end(prep, cfg)?,
    };
    Ok(ArmResult {
        arm,
        val: evaluate(prep, &model, arm.name(), "val", cfg.seed)?,
        test: evaluate(prep, &model, arm.name(), "test", cfg.seed)?,
        finetune,
        stage2_hash: stage2_hash(cfg),
    })
}

/// Trains each arm under the same seed and stage-2 settings. Reports carry
/// RelaImpr against `no_align` when that arm is present.
pub fn run_ablation(prep: &Prepared, cfg: &RunConfig, arms: &[Arm]) -> Result<Vec<ArmResult>> {
    if arms.is_empty() {
        return Err(CtrlError::Config("ablation needs at least one arm".into()));
    }
    let mut seen = HashSet::new();
    let arms: Vec<Arm> = arms.iter().copied().filter(|a| seen.insert(*a)).collect();
    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        log::info!("ablation arm {arm}");
        results.push(run_arm(prep, cfg, arm)?);
    }
    if let Some(base) = results.iter().find(|r| r.arm == Arm::NoAlign).cloned() {
        for r in &mut results {
            for (report, base) in [(&mut r.val, &base.val), (&mut r.test, &base.test)] {
                match report.clone().with_base(base) {
                    Ok(with) => *report = with,
                    Err(e) => log::warn!("no RelaImpr for {}: {e}", report.name),
                }
            }
        }
    }
    Ok(results)
}

/// Table of the test-split reports of an ablation.
pub fn ablation_table(results: &[ArmResult]) -> String {
    let reports: Vec<EvalReport> = results.iter().map(|r| r.test.clone()).collect();
    format_table(&reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub batch_size: usize,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    /// Failure message of a cell that did not finish.
    pub error: Option<String>,
}

/// Cross product of the grids with duplicates removed (first wins).
pub fn sweep_cells(temperatures: &[f64], batch_sizes: &[usize]) -> Vec<(f64, usize)> {
    let mut seen = HashSet::new();
    let mut cells = Vec::new();
    for &t in temperatures {
        for &b in batch_sizes {
            if seen.insert((t.to_bits(), b)) {
                cells.push((t, b));
            } else {
                log::warn!("duplicate sweep cell tau={t} batch={b} skipped");
            }
        }
    }
    cells
}

/// One align, finetune and test-evaluate run per `(tau, batch)` cell, with
/// up to `parallel` cells at a time. A failing cell is recorded and the
/// sweep continues. With `out_dir`, each cell writes its loss curve and
/// report into its own subdirectory.
pub fn run_sweep(
    prep: &Prepared,
    cfg: &RunConfig,
    temperatures: &[f64],
    batch_sizes: &[usize],
    parallel: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let cells = sweep_cells(temperatures, batch_sizes);
    if cells.is_empty() {
        return Err(CtrlError::Config("sweep grid is empty".into()));
    }
    let run_cell = |i: usize| -> SweepRow {
        let (temperature, batch_size) = cells[i];
        let dir = out_dir.map(|d| d.join(format!("cell{i:02}_tau{temperature}_b{batch_size}")));
        let outcome = (|| -> Result<EvalReport> {
            let mut c = cfg.clone();
            c.align.temperature = temperature;
            c.align.batch_size = batch_size;
            c.validate()?;
            let (aligned, curve) = run_align(prep, &c)?;
            let (model, _) = run_finetune(prep, &c, Some(&aligned))?;
            let report = evaluate(prep, &model, &format!("tau{temperature}_b{batch_size}"), "test", c.seed)?;
            if let Some(dir) = &dir {
                fs::create_dir_all(dir).map_err(|e| CtrlError::io(dir, e))?;
                write_loss_curve(&dir.join("loss_curve.csv"), &curve.curve)?;
                write_json(&dir.join("report.json"), &report)?;
                c.save(&dir.join("config.json"))?;
            }
            Ok(report)
        })();
        match outcome {
            Ok(r) => SweepRow {
                temperature,
                batch_size,
                auc: Some(r.auc),
                logloss: Some(r.logloss),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep cell tau={temperature} batch={batch_size} failed: {e}");
                SweepRow {
                    temperature,
                    batch_size,
                    auc: None,
                    logloss: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let workers = parallel.clamp(1, cells.len());
    if workers == 1 {
        return Ok((0..cells.len()).map(run_cell).collect());
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let row = run_cell(i);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(row);
            });
        }
    });
    Ok(slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CtrlError::data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CtrlError::data(format!("{}: {e}", path.display()));
    w.write_record(["temperature", "batch_size", "auc", "logloss", "error"]).map_err(err)?;
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            r.temperature.to_string(),
            r.batch_size.to_string(),
            opt(r.auc),
            opt(r.logloss),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CtrlError::io(path, e))
}

/// Output path next to `base` with `suffix` appended to its file name.
pub fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    base.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignConfig;
    use crate::encoders::{Backbone, CollabConfig, TextConfig};
    use crate::finetune::FinetuneConfig;
    use crate::synthetic::{gen_synthetic, LabelRule, SyntheticSpec};

    fn small_cfg() -> RunConfig {
        RunConfig {
            seed: 3,
            collab: CollabConfig {
                backbone: Backbone::Mlp,
                embed_dim: 4,
                hidden: vec![8],
                ..CollabConfig::default()
            },
            text: TextConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                ff_dim: 8,
                max_len: 64,
            },
            align: AlignConfig {
                batch_size: 8,
                proj_dim: 8,
                subspaces: 2,
                ..AlignConfig::default()
            },
            finetune: FinetuneConfig {
                batch_size: 32,
                max_epochs: 2,
                ..FinetuneConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn small_prep(cfg: &RunConfig) -> Prepared {
        let spec = SyntheticSpec::uniform(
            4,
            5,
            120,
            LabelRule::Logistic {
                interactions: 1,
                scale: 3.0,
            },
            0.0,
            5,
        );
        let d = gen_synthetic(&spec).unwrap();
        Prepared::build(&d.rows, &d.schema, cfg).unwrap()
    }

    #[test]
    fn prepared_round_trips_through_a_directory() {
        let cfg = small_cfg();
        let prep = small_prep(&cfg);
        let dir = tempfile::tempdir().unwrap();
        prep.save(dir.path(), true).unwrap();
        let back = Prepared::load(dir.path()).unwrap();
        assert_eq!(back.schema, prep.schema);
        assert_eq!(back.train_prompts, prep.train_prompts);
        assert_eq!(back.test_prompts, prep.test_prompts);
        let lines = fs::read_to_string(dir.path().join("prompts_train.txt")).unwrap();
        assert_eq!(lines.lines().count(), prep.data.train.len());
        assert!(lines.starts_with("This is a user, gender is gender"));
    }

    #[test]
    fn other_template_refits_the_tokenizer() {
        let cfg = small_cfg();
        let prep = small_prep(&cfg);
        let colon = RunConfig {
            prompt_variant: PromptTemplate::Colon,
            ..cfg.clone()
        };
        let re = prep.clone().with_config(&colon).unwrap();
        assert_eq!(re.template, PromptTemplate::Colon);
        assert_ne!(re.train_prompts, prep.train_prompts);
    }

    #[test]
    fn ablation_arms_share_stage2_settings() {
        let cfg = small_cfg();
        let prep = small_prep(&cfg);
        let res = run_ablation(&prep, &cfg, &[Arm::Ctrl, Arm::NoAlign]).unwrap();
        assert_eq!(res.len(), 2);
        assert_eq!(res[0].stage2_hash, res[1].stage2_hash);
        if res[1].test.auc > 0.5 {
            assert!(res[0].test.relaimpr.is_some());
            assert_eq!(res[1].test.relaimpr, Some(0.0));
        }
        assert!(ablation_table(&res).lines().count() == 3);
        assert!("mystery".parse::<Arm>().is_err());
    }

    #[test]
    fn sweep_dedups_and_records_failures() {
        let cfg = small_cfg();
        let prep = small_prep(&cfg);
        assert_eq!(sweep_cells(&[0.3, 0.7, 0.3], &[64]).len(), 2);
        // batch 500 exceeds the training split, batch 0 is invalid
        let rows = run_sweep(&prep, &cfg, &[0.7], &[8, 500, 0], 2, None).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].auc.is_some() && rows[0].error.is_none());
        assert!(rows[1].error.is_some() && rows[2].error.is_some());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &rows).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 4);
    }

    #[test]
    fn checkpoints_rebuild_both_models() {
        let cfg = small_cfg();
        let prep = small_prep(&cfg);
        let (aligned, report) = run_align(&prep, &cfg).unwrap();
        let ckpt = align_checkpoint(&prep, &cfg, &aligned, Some(&report));
        let back = load_alignment_model(&prep, &Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.store, aligned.store);
        let (model, _) = run_finetune(&prep, &cfg, Some(&aligned)).unwrap();
        let ckpt = ctr_checkpoint(&prep, &cfg, &model);
        let back = load_ctr_model(&prep, &ckpt).unwrap();
        assert_eq!(
            evaluate(&prep, &back, "x", "test", 0).unwrap(),
            evaluate(&prep, &model, "x", "test", 0).unwrap()
        );
        assert!(load_alignment_model(&prep, &ckpt).is_err());
        assert_eq!(dump_embeddings(&prep, &aligned, "test").unwrap().len(), 2 * prep.data.test.len());
    }

    #[test]
    fn sibling_appends_to_the_file_name() {
        assert_eq!(sibling(Path::new("out/a.ckpt"), ".loss.csv"), PathBuf::from("out/a.ckpt.loss.csv"));
    }
}
