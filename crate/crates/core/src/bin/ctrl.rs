use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ctrl_core::align::{write_loss_curve, Similarity};
use ctrl_core::checkpoint::{Checkpoint, ModelKind};
use ctrl_core::config::RunConfig;
use ctrl_core::encoders::Backbone;
use ctrl_core::experiment::{
    ablation_table, align_checkpoint, ctr_checkpoint, dump_embeddings, evaluate, load_alignment_model, load_ctr_model,
    new_alignment_model, run_ablation, run_align, run_finetune, run_sweep, sibling, write_json, write_sweep_csv, Arm,
    Prepared,
};
use ctrl_core::metrics::format_table;
use ctrl_core::prompt::PromptTemplate;
use ctrl_core::synthetic::{gen_synthetic, LabelRule, SyntheticSpec};
use ctrl_core::viz::{project_2d, read_embeddings_csv, records_gap, write_embeddings_csv, write_projection_csv};
use ctrl_core::CtrlError;

/// Tabular/text contrastive alignment followed by CTR fine-tuning.
#[derive(Parser)]
#[command(name = "ctrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

/// Settings that override the config file.
#[derive(Args)]
struct Overrides {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    backbone: Option<Backbone>,
    /// Prompt template, 1 to 5.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=5))]
    prompt_variant: Option<u8>,
    #[arg(long, global = true)]
    similarity: Option<Similarity>,
}

#[derive(Subcommand)]
enum Command {
    /// Split a raw CSV by time, fit vocabularies and the tokenizer.
    Prepare {
        /// Raw CSV with one column per field plus label and timestamp.
        #[arg(long)]
        data: PathBuf,
        /// Unfitted schema; defaults to schema.json beside the data.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write one prompt per line for every split.
        #[arg(long)]
        emit_prompts: bool,
    },
    /// Stage 1: contrastive alignment of both towers.
    Align {
        /// Prepared directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the loss curve goes to `<out>.loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: CTR fine-tuning, from an aligned checkpoint when given.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint path; the report goes to `<out>.report.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fine-tuned checkpoint on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare ablation arms under one seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = ["ctrl".to_string(), "cosine_sim".into(), "no_align".into(), "end_to_end".into()])]
        arms: Vec<String>,
        /// Directory for ablation.json and ablation.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Align, fine-tune and evaluate over a temperature and batch grid.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.7, 1.0, 2.0])]
        temperatures: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [32, 128])]
        batch_sizes: Vec<usize>,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Directory for sweep.csv and per-cell outputs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write both towers' representations of one split as CSV.
    DumpEmbeddings {
        #[arg(long)]
        data: PathBuf,
        /// Aligned checkpoint; omit to dump an untrained model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA of an embedding dump to two dimensions.
    Project2d {
        /// Embedding CSV from dump-embeddings.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic dataset with its schema.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// JSON spec; the flags below are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        fields: usize,
        #[arg(long, default_value_t = 50)]
        vocab: usize,
        #[arg(long, default_value_t = 20_000)]
        rows: usize,
        #[arg(long, value_enum, default_value_t = RuleKind::Logistic)]
        rule: RuleKind,
        #[arg(long, default_value_t = 10)]
        interactions: usize,
        #[arg(long, default_value_t = 4.0)]
        scale: f64,
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        /// Data seed (the global --seed is the model seed).
        #[arg(long, default_value_t = 2024)]
        data_seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleKind {
    Xor,
    Logistic,
}

impl Overrides {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.backbone {
            cfg.collab.backbone = b;
        }
        if let Some(v) = self.prompt_variant {
            cfg.prompt_variant = PromptTemplate::try_from(v)?;
        }
        if let Some(s) = self.similarity {
            cfg.align.similarity = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_prepared(dir: &Path, cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let prep = Prepared::load(dir).with_context(|| format!("loading prepared data from {}", dir.display()))?;
    Ok(prep.with_config(cfg)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.overrides.config()?;
    match cli.command {
        Command::Prepare {
            data,
            schema,
            out,
            emit_prompts,
        } => {
            let schema = schema.unwrap_or_else(|| data.with_file_name("schema.json"));
            let prep = Prepared::from_csv(&data, &schema, &cfg)?;
            prep.save(&out, emit_prompts)?;
            cfg.save(&out.join("config.json"))?;
            println!(
                "prepared {} / {} / {} rows, {} prompt tokens, into {}",
                prep.data.train.len(),
                prep.data.val.len(),
                prep.data.test.len(),
                prep.tokenizer.vocab_size(),
                out.display()
            );
        }
        Command::Align { data, out } => {
            let prep = load_prepared(&data, &cfg)?;
            let (model, report) = run_align(&prep, &cfg)?;
            align_checkpoint(&prep, &cfg, &model, Some(&report)).save(&out)?;
            let curve = sibling(&out, ".loss.csv");
            write_loss_curve(&curve, &report.curve)?;
            let (first, last) = (report.curve.first(), report.curve.last());
            if let (Some(a), Some(b)) = (first, last) {
                println!("{} steps, loss {:.4} -> {:.4}", report.curve.len(), a.loss, b.loss);
            }
            println!("wrote {} and {}", out.display(), curve.display());
        }
        Command::Finetune { data, init, out } => {
            let prep = load_prepared(&data, &cfg)?;
            let aligned = match &init {
                Some(p) => Some(load_alignment_model(&prep, &Checkpoint::load(p)?)?),
                None => None,
            };
            let (model, report) = run_finetune(&prep, &cfg, aligned.as_ref())?;
            ctr_checkpoint(&prep, &cfg, &model).save(&out)?;
            write_json(&sibling(&out, ".report.json"), &report)?;
            let val = evaluate(&prep, &model, "finetune", "val", cfg.seed)?;
            print!("{}", format_table(&[val]));
            println!("best epoch {} of {}", report.best_epoch, report.epochs.len());
        }
        Command::Evaluate {
            data,
            checkpoint,
            split,
            out,
        } => {
            let prep = load_prepared(&data, &cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            if ckpt.kind != ModelKind::Ctr {
                bail!(CtrlError::Config("evaluate needs a fine-tuned checkpoint".into()));
            }
            let model = load_ctr_model(&prep, &ckpt)?;
            let name = checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            let report = evaluate(&prep, &model, &name, &split, ckpt.config.seed)?;
            print!("{}", format_table(std::slice::from_ref(&report)));
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
        }
        Command::Ablate { data, arms, out } => {
            let arms = arms.iter().map(|a| a.parse::<Arm>()).collect::<Result<Vec<_>, _>>()?;
            let prep = load_prepared(&data, &cfg)?;
            let results = run_ablation(&prep, &cfg, &arms)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_json(&out.join("ablation.json"), &results)?;
            let table = ablation_table(&results);
            std::fs::write(out.join("ablation.txt"), &table).with_context(|| format!("writing into {}", out.display()))?;
            print!("{table}");
        }
        Command::Sweep {
            data,
            temperatures,
            batch_sizes,
            parallel,
            out,
        } => {
            if parallel == 0 {
                bail!(CtrlError::Config("--parallel must be at least 1".into()));
            }
            let prep = load_prepared(&data, &cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let rows = run_sweep(&prep, &cfg, &temperatures, &batch_sizes, parallel, Some(&out))?;
            write_sweep_csv(&out.join("sweep.csv"), &rows)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} cells, {failed} failed, wrote {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::DumpEmbeddings {
            data,
            checkpoint,
            split,
            out,
        } => {
            let prep = load_prepared(&data, &cfg)?;
            let model = match &checkpoint {
                Some(p) => load_alignment_model(&prep, &Checkpoint::load(p)?)?,
                None => new_alignment_model(&prep, &cfg)?,
            };
            let records = dump_embeddings(&prep, &model, &split)?;
            write_embeddings_csv(&out, &records)?;
            let gap = records_gap(&records)?;
            println!(
                "{} records, paired cosine {:.4}, unpaired {:.4}, gap {:.4}",
                records.len(),
                gap.paired,
                gap.unpaired,
                gap.gap
            );
        }
        Command::Project2d { data, out } => {
            let records = read_embeddings_csv(&data)?;
            let points: Vec<Vec<f64>> = records.iter().map(|r| r.values.clone()).collect();
            let proj = project_2d(&points)?;
            write_projection_csv(&out, &records, &proj)?;
            println!(
                "explained variance {:.4} / {:.4}{}",
                proj.explained[0],
                proj.explained[1],
                if proj.rank_deficient { " (rank deficient)" } else { "" }
            );
        }
        Command::GenSynthetic {
            out,
            spec,
            fields,
            vocab,
            rows,
            rule,
            interactions,
            scale,
            noise,
            data_seed,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).map_err(|e| CtrlError::Config(format!("{}: {e}", p.display())))?
                }
                None => {
                    let rule = match rule {
                        RuleKind::Xor => LabelRule::Xor,
                        RuleKind::Logistic => LabelRule::Logistic { interactions, scale },
                    };
                    SyntheticSpec::uniform(fields, vocab, rows, rule, noise, data_seed)
                }
            };
            let data = gen_synthetic(&spec)?;
            data.save(&out, &spec)?;
            println!("wrote {} rows into {}, Bayes AUC {:.4}", data.rows.len(), out.display(), data.bayes_auc);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<CtrlError>()).map_or(2, CtrlError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
