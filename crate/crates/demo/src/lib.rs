//! Browser demo: prompt rendering, a contrastive-loss explorer and a small
//! alignment run whose embeddings are projected to 2-D after every step.
//!
//! The logic lives in plain functions so it can be tested natively; the
//! `#[wasm_bindgen]` items only convert errors and arrays.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ctrl_core::align::{alignment_gap, ccl_combine, infonce_tab2text, infonce_text2tab, AlignmentModel};
use ctrl_core::autodiff::{derive_seed, AdamW, Tape, Tensor, WarmupSchedule};
use ctrl_core::config::RunConfig;
use ctrl_core::data::{batch_indices, BatchMode, FeatureSchema, FieldKind, FieldSpec, Side, TabularInstance};
use ctrl_core::encoders::TextConfig;
use ctrl_core::experiment::{new_alignment_model, Prepared};
use ctrl_core::prompt::{build_prompt, PromptTemplate};
use ctrl_core::synthetic::{gen_synthetic, LabelRule, SyntheticSpec};
use ctrl_core::viz::project_2d;

/// Parses `name=value` lines; `|` separates the values of a sequence field
/// and `name (phrase)=value` replaces "name is" with the phrase.
fn parse_side(text: &str, side: Side) -> Result<Vec<(FieldSpec, Vec<String>)>, String> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (name, value) = line
            .split_once('=')
            .ok_or_else(|| format!("expected name=value, got `{line}`"))?;
        let values: Vec<String> = value.split('|').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        let kind = if values.len() > 1 { FieldKind::Sequence } else { FieldKind::Categorical };
        let name = name.trim();
        let spec = match name.strip_suffix(')').and_then(|n| n.split_once('(')) {
            Some((field, phrase)) => FieldSpec::new(field.trim(), kind, side).with_phrase(phrase.trim()),
            None => FieldSpec::new(name, kind, side),
        };
        out.push((spec, values));
    }
    Ok(out)
}

/// Renders user and item fields given as `name=value` lines.
pub fn prompt_for(user: &str, item: &str, item_noun: &str, variant: u8) -> Result<String, String> {
    let template = PromptTemplate::try_from(variant).map_err(|e| e.to_string())?;
    let mut fields = parse_side(user, Side::User)?;
    fields.extend(parse_side(item, Side::Item)?);
    let (specs, raw): (Vec<FieldSpec>, Vec<Vec<String>>) = fields.into_iter().unzip();
    let mut schema = FeatureSchema::new(specs).map_err(|e| e.to_string())?;
    if !item_noun.trim().is_empty() {
        schema.item_noun = item_noun.trim().to_string();
    }
    let instance = TabularInstance {
        values: raw.iter().map(|v| vec![0; v.len()]).collect(),
        raw,
        label: 0,
        timestamp: 0,
    };
    build_prompt(&instance, &schema, template).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct LossBreakdown {
    pub text2tab: f64,
    pub tab2text: f64,
    pub ccl: f64,
    /// Row-wise softmax of `S / tau`; the diagonal holds the positives.
    pub softmax: Vec<Vec<f64>>,
}

/// Parses a square matrix, one row per line, entries split by commas or
/// whitespace.
fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows.len()) {
        return Err("similarity matrix must be square".into());
    }
    Ok(rows)
}

/// Both directional losses of a text-by-table similarity matrix.
pub fn loss_for(matrix: &str, tau: f64) -> Result<LossBreakdown, String> {
    let rows = parse_matrix(matrix)?;
    let n = rows.len();
    let run = || -> ctrl_core::Result<LossBreakdown> {
        let mut tape = Tape::new(false, 0);
        let s = tape.constant(Tensor::from_rows(&rows)?, "s")?;
        let st = tape.transpose(s)?;
        let a = infonce_text2tab(&mut tape, s, tau)?;
        let b = infonce_tab2text(&mut tape, st, tau)?;
        let terms = ccl_combine(&mut tape, a, b)?;
        let scaled = tape.scale(s, 1.0 / tau)?;
        let soft = tape.softmax(scaled, 1)?;
        Ok(LossBreakdown {
            text2tab: tape.value(a).item(),
            tab2text: tape.value(b).item(),
            ccl: tape.value(terms.loss).item(),
            softmax: tape.data(soft).chunks(n).map(<[f64]>::to_vec).collect(),
        })
    };
    run().map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct Snapshot {
    pub step: u64,
    pub loss: Option<f64>,
    pub gap: f64,
    pub paired: f64,
    pub unpaired: f64,
    /// `x, y` pairs, tabular rows first, then their prompts.
    pub points: Vec<[f64; 2]>,
}

/// A few hundred synthetic rows aligned one batch per call.
pub struct AlignRun {
    prep: Prepared,
    model: AlignmentModel,
    opt: AdamW,
    seed: u64,
    step: u64,
    queue: Vec<Vec<usize>>,
    epoch: u64,
    last_loss: Option<f64>,
}

fn demo_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.collab.embed_dim = 8;
    cfg.collab.head_dim = 8;
    cfg.text = TextConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        max_len: 96,
    };
    cfg.align.proj_dim = 32;
    cfg.align.batch_size = 32;
    cfg.align.schedule = WarmupSchedule {
        start_lr: 1e-4,
        peak_lr: 3e-3,
        warmup_steps: 10,
    };
    cfg
}

impl AlignRun {
    pub fn new(seed: u64) -> Result<Self, String> {
        let run = || -> ctrl_core::Result<Self> {
            let spec = SyntheticSpec::uniform(6, 6, 320, LabelRule::Logistic { interactions: 3, scale: 3.0 }, 0.1, seed);
            let data = gen_synthetic(&spec)?;
            let cfg = demo_config(seed);
            let prep = Prepared::build(&data.rows, &data.schema, &cfg)?;
            let model = new_alignment_model(&prep, &cfg)?;
            Ok(Self {
                prep,
                opt: AdamW::new(cfg.align.optimizer),
                model,
                seed,
                step: 0,
                queue: Vec::new(),
                epoch: 0,
                last_loss: None,
            })
        };
        run().map_err(|e| e.to_string())
    }

    /// One optimizer step on the next training batch.
    pub fn step(&mut self) -> Result<f64, String> {
        self.try_step().map_err(|e| e.to_string())
    }

    fn try_step(&mut self) -> ctrl_core::Result<f64> {
        let data = self.prep.align_data("train")?;
        let cfg = self.model.config().clone();
        if self.queue.is_empty() {
            let seed = derive_seed(self.seed, "align.shuffle", self.epoch);
            self.queue = batch_indices(data.len(), cfg.batch_size, BatchMode::Align, seed)?;
            self.queue.reverse();
            self.epoch += 1;
        }
        let ids = self.queue.pop().expect("refilled above");
        let (batch, tokens) = data.batch(&ids)?;
        let mut tape = Tape::new(true, derive_seed(self.seed, "align.tape", self.step));
        let terms = self.model.ccl(&mut tape, &batch, &tokens)?;
        let loss = tape.value(terms.loss).item();
        let grads = tape.backward(terms.loss)?.params(&tape);
        self.opt.step(&mut self.model.store, &grads, cfg.schedule.lr_at(self.step))?;
        self.model.store.apply_buffer_updates(tape.take_buffer_updates());
        self.step += 1;
        self.last_loss = Some(loss);
        Ok(loss)
    }

    /// Held-out rows and prompts in the shared space, projected to 2-D.
    pub fn snapshot(&self) -> Result<Snapshot, String> {
        let run = || -> ctrl_core::Result<Snapshot> {
            let data = self.prep.align_data("test")?;
            let (tab, text) = self.model.shared_rows(&data, 256)?;
            let gap = alignment_gap(&tab, &text)?;
            let rows = |t: &Tensor| -> Vec<Vec<f64>> { t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect() };
            let mut all = rows(&tab);
            all.extend(rows(&text));
            let proj = project_2d(&all)?;
            Ok(Snapshot {
                step: self.step,
                loss: self.last_loss,
                gap: gap.gap,
                paired: gap.paired,
                unpaired: gap.unpaired,
                points: proj.points.iter().map(|p| [p[0], p[1]]).collect(),
            })
        };
        run().map_err(|e| e.to_string())
    }
}

fn to_js<T: Serialize>(value: &T) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

/// Prompt for `name=value` lines of the user and item sides.
#[wasm_bindgen(js_name = renderPrompt)]
pub fn render_prompt(user: &str, item: &str, item_noun: &str, variant: u8) -> Result<String, JsError> {
    prompt_for(user, item, item_noun, variant).map_err(|e| JsError::new(&e))
}

/// JSON `{text2tab, tab2text, ccl, softmax}` for a similarity matrix.
#[wasm_bindgen(js_name = contrastiveLoss)]
pub fn contrastive_loss(matrix: &str, tau: f64) -> Result<String, JsError> {
    let out = loss_for(matrix, tau).map_err(|e| JsError::new(&e))?;
    to_js(&out)
}

#[wasm_bindgen]
pub struct AlignDemo {
    inner: AlignRun,
}

#[wasm_bindgen]
impl AlignDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<AlignDemo, JsError> {
        Ok(Self {
            inner: AlignRun::new(u64::from(seed)).map_err(|e| JsError::new(&e))?,
        })
    }

    /// Runs `steps` optimizer steps and returns the last loss.
    pub fn train(&mut self, steps: u32) -> Result<f64, JsError> {
        let mut loss = f64::NAN;
        for _ in 0..steps {
            loss = self.inner.step().map_err(|e| JsError::new(&e))?;
        }
        Ok(loss)
    }

    /// JSON snapshot: step, loss, gap and 2-D points.
    pub fn snapshot(&self) -> Result<String, JsError> {
        let snap = self.inner.snapshot().map_err(|e| JsError::new(&e))?;
        to_js(&snap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_descriptive_and_masked() {
        let user = "gender=female\nage=18\nhistory (who has recently watched)=Titanic|Avatar";
        let item = "title=The Terminator\ngenre=Sci-FI";
        let p = prompt_for(user, item, "movie", 1).unwrap();
        assert!(p.starts_with("This is a user, gender is female, age is 18, "));
        assert!(p.ends_with("This is a movie, title is The Terminator, genre is Sci-FI."));
        assert!(p.contains(", who has recently watched Titanic|Avatar. "));
        let masked = prompt_for(user, item, "movie", 4).unwrap();
        assert_eq!(masked.matches("Field").count(), 5);
        assert!(prompt_for(user, item, "movie", 9).is_err());
        assert!(prompt_for("gender female", item, "movie", 1).is_err());
    }

    #[test]
    fn identity_matrix_loss() {
        let out = loss_for("1 0\n0 1", 1.0).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.ccl - want).abs() < 1e-12);
        assert!((out.text2tab - out.tab2text).abs() < 1e-15);
        for row in &out.softmax {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(loss_for("1 0 0\n0 1", 1.0).is_err());
        assert!(loss_for("1 x\n0 1", 1.0).is_err());
    }

    #[test]
    fn alignment_steps_reduce_loss_and_project() {
        let mut run = AlignRun::new(3).unwrap();
        let before = run.snapshot().unwrap();
        assert_eq!(before.step, 0);
        assert!(before.loss.is_none());
        let first = run.step().unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = run.step().unwrap();
        }
        assert!(last < first, "{first} -> {last}");
        let after = run.snapshot().unwrap();
        assert_eq!(after.step, 41);
        assert_eq!(after.points.len(), before.points.len());
        assert!(after.points.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
        assert!(after.gap > before.gap);
    }
}
