//! Stage 2: supervised fine-tuning of the collaborative tower with a fresh
//! output layer, and the single-stage joint objective used as an ablation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{diverged, grads_finite, AlignConfig, AlignNet, AlignmentModel};
use crate::autodiff::{component_rng, derive_seed, AdamW, AdamWConfig, ParamGrads, ParamStore, Tape, Var};
use crate::data::{batch_indices, Batch, BatchMode, FeatureSchema, TabularInstance};
use crate::encoders::{CollabConfig, CollaborativeEncoder, Linear, TextConfig};
use crate::error::{CtrlError, Result};
use crate::metrics::{auc, logloss, EvalReport};
use crate::parallel::{map_chunks, worker_threads};
use crate::prompt::{pad_batch, Encoded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
    pub eval_batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2048,
            max_epochs: 20,
            patience: 3,
            eval_batch_size: 4096,
            optimizer: AdamWConfig::adam(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CtrlError::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.batch_size < 2 || self.eval_batch_size == 0 {
            return Err(CtrlError::Config("batch sizes must be at least 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(CtrlError::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Output layer `D_col -> 1` followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct CtrHead {
    pub linear: Linear,
}

impl CtrHead {
    pub const NAME: &'static str = "ctr.head";

    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, in_dim: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, Self::NAME, in_dim, 1),
        }
    }

    /// `[N]` click probabilities.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, repr: Var) -> Result<Var> {
        let logits = self.linear.forward(tape, store, repr)?;
        let p = tape.sigmoid(logits)?;
        let n = tape.shape(p)[0];
        Ok(tape.reshape(p, &[n])?)
    }
}

/// Binary cross-entropy of `[N]` probabilities against labels.
pub fn bce_loss(tape: &mut Tape, preds: Var, labels: &[f64]) -> Result<Var> {
    Ok(tape.bce(preds, labels)?)
}

/// The deployable model: collaborative tower plus output layer.
#[derive(Clone, Debug)]
pub struct CtrModel {
    pub store: ParamStore,
    pub collab: CollaborativeEncoder,
    pub head: CtrHead,
}

impl CtrModel {
    /// Fresh initialization. The tower draws from the same stream as the
    /// tower of an [`AlignmentModel`] built with the same seed.
    pub fn new(schema: &FeatureSchema, config: &CollabConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let collab = CollaborativeEncoder::new(schema, config, &mut store, &mut component_rng(seed, "collab"))?;
        let head = CtrHead::new(&mut store, &mut component_rng(seed, "ctr.head"), collab.out_dim());
        Ok(Self { store, collab, head })
    }

    /// Fresh head on top of the aligned collaborative tower; projection and
    /// sub-space heads and the text tower are dropped.
    pub fn from_aligned(schema: &FeatureSchema, aligned: &AlignmentModel, seed: u64) -> Result<Self> {
        let mut model = Self::new(schema, &aligned.net.collab.config, seed)?;
        model.inherit(&aligned.store)?;
        Ok(model)
    }

    /// Copies every collaborative-tower tensor (buffers included) from
    /// `source` by name.
    pub fn inherit(&mut self, source: &ParamStore) -> Result<()> {
        let ids: Vec<_> = self.store.ids_with_prefix(CollaborativeEncoder::PREFIX).collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            let src = source
                .find(&name)
                .ok_or_else(|| CtrlError::Config(format!("aligned model lacks `{name}`")))?;
            let value = source.get(src).value.clone();
            if value.shape() != self.store.get(id).value.shape() {
                return Err(CtrlError::Config(format!("`{name}` changed shape between stages")));
            }
            self.store.set(id, value);
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let repr = self.collab.forward(tape, &self.store, batch)?;
        self.head.forward(tape, &self.store, repr)
    }

    /// Eval-mode probabilities for every row.
    pub fn predict(&self, schema: &FeatureSchema, rows: &[TabularInstance], chunk: usize) -> Result<Vec<f64>> {
        predict_with(&self.store, &self.collab, &self.head, schema, rows, chunk)
    }

    pub fn evaluate(&self, name: &str, split: &str, schema: &FeatureSchema, rows: &[TabularInstance], seed: u64) -> Result<EvalReport> {
        let scores = self.predict(schema, rows, 4096)?;
        EvalReport::new(name, split, &scores, &labels(rows), seed)
    }
}

fn predict_with(
    store: &ParamStore,
    collab: &CollaborativeEncoder,
    head: &CtrHead,
    schema: &FeatureSchema,
    rows: &[TabularInstance],
    chunk: usize,
) -> Result<Vec<f64>> {
    let parts = map_chunks(rows.len(), chunk, worker_threads(), |r| {
        let ids: Vec<usize> = r.collect();
        let batch = Batch::gather(schema, rows, &ids)?;
        let mut tape = Tape::new(false, 0);
        let repr = collab.forward(&mut tape, store, &batch)?;
        let p = head.forward(&mut tape, store, repr)?;
        Ok(tape.data(p).to_vec())
    })?;
    Ok(parts.concat())
}

pub fn labels(rows: &[TabularInstance]) -> Vec<f64> {
    rows.iter().map(|r| f64::from(r.label)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub ctr: f64,
    /// Alignment term of the joint objective; zero for plain fine-tuning.
    pub ccl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Validation AUC before the first update.
    pub init_val_auc: f64,
    pub epochs: Vec<EpochStats>,
    pub steps: Vec<StepLoss>,
    /// 1-based epoch whose parameters were kept; 0 if no epoch improved on
    /// the initial model.
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

/// Training and validation rows for stage 2.
#[derive(Clone, Copy)]
pub struct TrainSet<'a> {
    pub schema: &'a FeatureSchema,
    pub train: &'a [TabularInstance],
    pub val: &'a [TabularInstance],
}

/// Adam on BCE over every tower and head parameter, early stopping on
/// validation AUC. The best parameters are restored at the end.
pub fn finetune(model: &mut CtrModel, data: TrainSet<'_>, config: &FinetuneConfig, seed: u64) -> Result<FinetuneReport> {
    let CtrModel { store, collab, head } = model;
    train_loop(store, collab, head, data, config, seed, |_, _, _, _| Ok(None))
}

/// Collaborative tower, text tower and all heads trained together on
/// `L_ctr + lambda * L_ccl`.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub store: ParamStore,
    pub net: AlignNet,
    pub head: CtrHead,
}

impl JointModel {
    pub fn new(schema: &FeatureSchema, text_vocab: usize, collab: &CollabConfig, text: &TextConfig, align: &AlignConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = AlignNet::new(&mut store, schema, text_vocab, collab, text, align, seed)?;
        let head = CtrHead::new(&mut store, &mut component_rng(seed, "ctr.head"), net.collab.out_dim());
        Ok(Self { store, net, head })
    }

    /// The deployable part: tower and head.
    pub fn to_ctr_model(&self, schema: &FeatureSchema, seed: u64) -> Result<CtrModel> {
        let mut model = CtrModel::new(schema, &self.net.collab.config, seed)?;
        model.inherit(&self.store)?;
        for id in [model.head.linear.weight, model.head.linear.bias] {
            let name = model.store.get(id).name.clone();
            let src = self.store.find(&name).expect("joint model owns the head");
            model.store.set(id, self.store.get(src).value.clone());
        }
        Ok(model)
    }
}

/// Settings of the single-stage ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndToEndConfig {
    /// Weight of the alignment term.
    pub lambda: f64,
    /// Alignment-sized chunks of each stage-2 batch that enter the alignment
    /// term. The batch is shuffled, so the leading chunks are a random sample.
    pub ccl_chunks: usize,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ccl_chunks: 1,
        }
    }
}

impl EndToEndConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CtrlError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.ccl_chunks == 0 {
            return Err(CtrlError::Config("ccl_chunks must be at least 1".into()));
        }
        Ok(())
    }
}

/// The alignment term over up to `max_chunks` consecutive chunks of
/// `align.batch_size` rows of a stage-2 batch, averaged. A trailing chunk of
/// one row is skipped.
fn chunked_ccl(
    net: &AlignNet,
    tape: &mut Tape,
    store: &ParamStore,
    repr: Var,
    ids: &[usize],
    prompts: &[Encoded],
    max_chunks: usize,
) -> Result<Option<Var>> {
    let chunk = net.config.batch_size;
    let h_tab_all = net.tab_proj.project(tape, store, repr)?;
    let mut terms = Vec::new();
    let mut start = 0;
    while start + 1 < ids.len() && terms.len() < max_chunks {
        let len = chunk.min(ids.len() - start);
        let h_tab = tape.slice(h_tab_all, 0, start, len)?;
        let encoded: Vec<Encoded> = ids[start..start + len].iter().map(|&i| prompts[i].clone()).collect();
        let h_text = net.project_text(tape, store, &pad_batch(&encoded))?;
        terms.push(net.ccl_projected(tape, store, h_tab, h_text)?.loss);
        start += len;
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len();
    let stacked = tape.concat(&terms, 0)?;
    let total = tape.sum_all(stacked)?;
    Ok(Some(tape.scale(total, 1.0 / n as f64)?))
}

/// Single-stage ablation: minimizes `L_ctr + lambda * L_ccl` with the
/// stage-2 optimizer and early stopping. With `lambda = 0` the collaborative
/// tower and head follow plain fine-tuning exactly.
pub fn end_to_end_train(
    model: &mut JointModel,
    data: TrainSet<'_>,
    prompts: &[Encoded],
    config: &FinetuneConfig,
    joint: &EndToEndConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    joint.validate()?;
    let EndToEndConfig { lambda, ccl_chunks } = *joint;
    if prompts.len() != data.train.len() {
        return Err(CtrlError::data(format!("{} prompts for {} training rows", prompts.len(), data.train.len())));
    }
    let JointModel { store, net, head } = model;
    let net = &*net;
    train_loop(store, &net.collab, head, data, config, seed, |tape, store, repr, ids| {
        Ok(chunked_ccl(net, tape, store, repr, ids, prompts, ccl_chunks)?.map(|ccl| (ccl, lambda)))
    })
}

/// Gradient norms of `L_ctr` and of `lambda * L_ccl` with respect to the
/// collaborative tower on one batch.
pub fn joint_grad_norms(model: &JointModel, schema: &FeatureSchema, rows: &[TabularInstance], prompts: &[Encoded], joint: &EndToEndConfig, seed: u64) -> Result<(f64, f64)> {
    joint.validate()?;
    let ids: Vec<usize> = (0..rows.len()).collect();
    let batch = Batch::gather(schema, rows, &ids)?;
    let store = &model.store;
    let norm = |ctr: bool| -> Result<f64> {
        let mut tape = Tape::new(true, seed);
        let repr = model.net.collab.forward(&mut tape, store, &batch)?;
        let loss = if ctr {
            let p = model.head.forward(&mut tape, store, repr)?;
            bce_loss(&mut tape, p, &batch.labels)?
        } else {
            let ccl = chunked_ccl(&model.net, &mut tape, store, repr, &ids, prompts, joint.ccl_chunks)?
                .ok_or_else(|| CtrlError::data("batch too small for the alignment term"))?;
            tape.scale(ccl, joint.lambda)?
        };
        let grads = tape.backward(loss)?.params(&tape);
        Ok(tower_norm(&grads, store))
    };
    Ok((norm(true)?, norm(false)?))
}

fn tower_norm(grads: &ParamGrads, store: &ParamStore) -> f64 {
    store
        .ids_with_prefix(CollaborativeEncoder::PREFIX)
        .filter(|&id| store.get(id).trainable)
        .map(|id| grads.norm(id).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn train_loop<F>(
    store: &mut ParamStore,
    collab: &CollaborativeEncoder,
    head: &CtrHead,
    data: TrainSet<'_>,
    config: &FinetuneConfig,
    seed: u64,
    extra: F,
) -> Result<FinetuneReport>
where
    F: Fn(&mut Tape, &ParamStore, Var, &[usize]) -> Result<Option<(Var, f64)>>,
{
    config.validate()?;
    if data.train.len() < 2 {
        return Err(CtrlError::data("fine-tuning needs at least 2 training rows"));
    }
    let val_labels = labels(data.val);
    let val_auc = |store: &ParamStore| -> Result<(f64, f64)> {
        let scores = predict_with(store, collab, head, data.schema, data.val, config.eval_batch_size)?;
        Ok((auc(&scores, &val_labels)?, logloss(&scores, &val_labels)?))
    };
    let mut report = FinetuneReport {
        init_val_auc: val_auc(store)?.0,
        ..FinetuneReport::default()
    };
    report.best_val_auc = report.init_val_auc;
    let mut best = store.clone();
    let mut opt = AdamW::new(config.optimizer);
    let mut step = 0u64;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let batches = batch_indices(data.train.len(), config.batch_size, BatchMode::Train, derive_seed(seed, "finetune.shuffle", epoch as u64))?;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for ids in batches {
            if ids.len() < 2 {
                log::debug!("skipping a trailing batch of one row");
                continue;
            }
            let batch = Batch::gather(data.schema, data.train, &ids)?;
            let mut tape = Tape::new(true, derive_seed(seed, "finetune.tape", step));
            let run = |tape: &mut Tape| -> Result<(Var, Var, Option<Var>)> {
                let repr = collab.forward(tape, store, &batch)?;
                let p = head.forward(tape, store, repr)?;
                let ctr = bce_loss(tape, p, &batch.labels)?;
                match extra(tape, store, repr, &ids)? {
                    Some((ccl, lambda)) => {
                        let weighted = tape.scale(ccl, lambda)?;
                        Ok((tape.add(ctr, weighted)?, ctr, Some(ccl)))
                    }
                    None => Ok((ctr, ctr, None)),
                }
            };
            let (loss, ctr, ccl) = run(&mut tape).map_err(|e| diverged(e, step))?;
            let grads = tape.backward(loss).map_err(|e| diverged(e.into(), step))?.params(&tape);
            if !grads_finite(&grads, store) {
                *store = best;
                return Err(CtrlError::Diverged {
                    step: step as usize,
                    msg: "non-finite gradient".into(),
                });
            }
            opt.step(store, &grads, config.lr)?;
            store.apply_buffer_updates(tape.take_buffer_updates());
            let ctr = tape.value(ctr).item();
            report.steps.push(StepLoss {
                step,
                ctr,
                ccl: ccl.map_or(0.0, |c| tape.value(c).item()),
            });
            loss_sum += ctr * ids.len() as f64;
            seen += ids.len();
            step += 1;
        }
        let (auc, ll) = val_auc(store)?;
        report.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_auc: auc,
            val_logloss: ll,
        });
        log::info!("epoch {epoch}: val auc {auc:.4} logloss {ll:.4}");
        if auc > report.best_val_auc {
            report.best_val_auc = auc;
            report.best_epoch = epoch;
            best = store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    *store = best;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::align::{align_train, AlignData, Similarity};
    use crate::autodiff::WarmupSchedule;
    use crate::encoders::Backbone;
    use crate::fixtures::{tiny, Tiny};

    fn collab(batch_norm: bool) -> CollabConfig {
        CollabConfig {
            backbone: Backbone::Mlp,
            embed_dim: 4,
            hidden: vec![16, 8],
            batch_norm,
            dropout: 0.1,
            ..CollabConfig::default()
        }
    }

    fn text() -> TextConfig {
        TextConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            max_len: 32,
        }
    }

    fn align_cfg() -> AlignConfig {
        AlignConfig {
            batch_size: 8,
            proj_dim: 8,
            subspaces: 2,
            similarity: Similarity::MaxSim,
            schedule: WarmupSchedule::constant(1e-3),
            ..AlignConfig::default()
        }
    }

    fn ft_cfg() -> FinetuneConfig {
        FinetuneConfig {
            lr: 1e-2,
            batch_size: 32,
            max_epochs: 4,
            patience: 10,
            eval_batch_size: 64,
            ..FinetuneConfig::default()
        }
    }

    fn split(d: &Tiny) -> TrainSet<'_> {
        TrainSet {
            schema: &d.schema,
            train: &d.rows[..160],
            val: &d.rows[160..],
        }
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new(false, 0);
        let p = tape.constant(crate::autodiff::Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(), "p").unwrap();
        let l = bce_loss(&mut tape, p, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 2f64.ln(), epsilon = 1e-12);
        let q = tape.constant(crate::autodiff::Tensor::new(vec![1], vec![0.25]).unwrap(), "q").unwrap();
        let l = bce_loss(&mut tape, q, &[1.0]).unwrap();
        assert_abs_diff_eq!(tape.value(l).item(), 4f64.ln(), epsilon = 1e-12);
        let bad = tape.constant(crate::autodiff::Tensor::new(vec![1], vec![1.25]).unwrap(), "b").unwrap();
        assert!(bce_loss(&mut tape, bad, &[1.0]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_validation_auc() {
        let d = tiny(4, 4, 200, 1);
        let mut model = CtrModel::new(&d.schema, &collab(false), 0).unwrap();
        let cfg = FinetuneConfig { lr: 0.0, ..ft_cfg() };
        let report = finetune(&mut model, split(&d), &cfg, 0).unwrap();
        for e in &report.epochs {
            assert_eq!(e.val_auc, report.init_val_auc);
        }
    }

    #[test]
    fn fine_tuning_is_deterministic() {
        let d = tiny(4, 4, 200, 1);
        let run = || {
            let mut model = CtrModel::new(&d.schema, &collab(true), 3).unwrap();
            finetune(&mut model, split(&d), &ft_cfg(), 3).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn early_stopping_restores_the_best_epoch() {
        let d = tiny(4, 4, 200, 2);
        let mut model = CtrModel::new(&d.schema, &collab(true), 1).unwrap();
        let cfg = FinetuneConfig {
            lr: 0.05,
            max_epochs: 12,
            patience: 2,
            ..ft_cfg()
        };
        let report = finetune(&mut model, split(&d), &cfg, 1).unwrap();
        let final_auc = auc(&model.predict(&d.schema, split(&d).val, 64).unwrap(), &labels(split(&d).val)).unwrap();
        assert_eq!(final_auc, report.best_val_auc);
        assert!(report.epochs.len() <= 12);
    }

    #[test]
    fn aligned_tower_is_inherited() {
        let d = tiny(4, 4, 64, 3);
        let mut aligned = AlignmentModel::new(&d.schema, d.tokenizer.vocab_size(), &collab(true), &text(), &align_cfg(), 5).unwrap();
        let data = AlignData {
            schema: &d.schema,
            rows: &d.rows,
            prompts: &d.prompts,
        };
        align_train(&mut aligned, &data, 5).unwrap();
        let fresh = CtrModel::new(&d.schema, &collab(true), 5).unwrap();
        let model = CtrModel::from_aligned(&d.schema, &aligned, 5).unwrap();
        for (id, p) in model.store.iter() {
            if p.name.starts_with("col.") {
                let src = aligned.store.find(&p.name).unwrap();
                assert_eq!(p.value, aligned.store.get(src).value);
            } else {
                assert_eq!(p.value, fresh.store.get(id).value, "{}", p.name);
            }
        }
        assert!(model.store.find("align.tab_proj.w").is_none());
    }

    #[test]
    fn joint_objective_without_alignment_is_fine_tuning() {
        let d = tiny(4, 4, 200, 4);
        let mut plain = CtrModel::new(&d.schema, &collab(true), 9).unwrap();
        let a = finetune(&mut plain, split(&d), &ft_cfg(), 9).unwrap();
        let mut joint = JointModel::new(&d.schema, d.tokenizer.vocab_size(), &collab(true), &text(), &align_cfg(), 9).unwrap();
        let b = end_to_end_train(&mut joint, split(&d), &d.prompts[..160], &ft_cfg(), &EndToEndConfig { lambda: 0.0, ccl_chunks: 2 }, 9).unwrap();
        assert_eq!(a.steps.len(), b.steps.len());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_abs_diff_eq!(x.ctr, y.ctr, epsilon = 1e-10);
            assert!(y.ccl > 0.0);
        }
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn large_lambda_dominates_tower_gradients() {
        let d = tiny(4, 4, 32, 6);
        let joint = JointModel::new(&d.schema, d.tokenizer.vocab_size(), &collab(true), &text(), &align_cfg(), 2).unwrap();
        let (ctr, ccl) = joint_grad_norms(&joint, &d.schema, &d.rows, &d.prompts, &EndToEndConfig { lambda: 100.0, ccl_chunks: 1 }, 0).unwrap();
        assert!(ccl / ctr > 10.0, "ctr {ctr} ccl {ccl}");
    }
}
