//! Stage 1: contrastive alignment of the collaborative and text towers.
//!
//! Both towers are projected to a shared width. In maxsim mode each
//! projection is further split into `M` sub-representations and the
//! similarity of two rows is the sum over one side's sub-representations of
//! the best match on the other side. The loss averages InfoNCE in both
//! directions, so every step updates both towers.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    component_rng, derive_seed, AdamW, AdamWConfig, OptimizerState, ParamStore, Tape, Tensor, TensorError, Var,
    WarmupSchedule,
};
use crate::data::{batch_indices, Batch, BatchMode, FeatureSchema, TabularInstance};
use crate::encoders::{CollabConfig, CollaborativeEncoder, Linear, TextConfig, TextEncoder};
use crate::error::{CtrlError, Result};
use crate::parallel::{map_chunks, worker_threads};
use crate::prompt::{pad_batch, Encoded, TokenBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    MaxSim,
    Cosine,
}

impl std::str::FromStr for Similarity {
    type Err = CtrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxsim" => Ok(Self::MaxSim),
            "cosine" => Ok(Self::Cosine),
            other => Err(CtrlError::Config(format!("unknown similarity `{other}`"))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MaxSim => "maxsim",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub similarity: Similarity,
    pub epochs: usize,
    /// Number of sub-spaces `M` in maxsim mode.
    pub subspaces: usize,
    pub proj_dim: usize,
    /// Unit-normalize sub-representations before their inner products.
    pub normalize_subreps: bool,
    pub schedule: WarmupSchedule,
    pub optimizer: AdamWConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            batch_size: 64,
            similarity: Similarity::MaxSim,
            epochs: 1,
            subspaces: 4,
            proj_dim: 128,
            normalize_subreps: true,
            schedule: WarmupSchedule {
                start_lr: 1e-5,
                peak_lr: 5e-4,
                warmup_steps: 100,
            },
            optimizer: AdamWConfig::default(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CtrlError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(CtrlError::Config(format!("alignment batch must be at least 2, got {}", self.batch_size)));
        }
        if self.proj_dim == 0 {
            return Err(CtrlError::Config("proj_dim must be positive".into()));
        }
        if self.similarity == Similarity::MaxSim && (self.subspaces == 0 || self.proj_dim % self.subspaces != 0) {
            return Err(CtrlError::Config(format!(
                "subspaces {} must be at least 1 and divide proj_dim {}",
                self.subspaces, self.proj_dim
            )));
        }
        if self.schedule.start_lr < 0.0 || self.schedule.peak_lr < 0.0 {
            return Err(CtrlError::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Affine map from a tower's output to the shared width.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub linear: Linear,
}

impl ProjectionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, proj_dim: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, name, in_dim, proj_dim),
        }
    }

    pub fn project(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.linear.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                lhs: shape.to_vec(),
                rhs: vec![self.linear.in_dim, self.linear.out_dim],
            }
            .into());
        }
        self.linear.forward(tape, store, x)
    }
}

/// `M` affine maps of width `proj_dim / M`, stored as one block weight.
#[derive(Clone, Debug)]
pub struct SubspaceHead {
    pub linear: Linear,
    pub subspaces: usize,
    pub normalize: bool,
}

impl SubspaceHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        proj_dim: usize,
        subspaces: usize,
        normalize: bool,
    ) -> Result<Self> {
        if subspaces == 0 || proj_dim % subspaces != 0 {
            return Err(CtrlError::Config(format!("{subspaces} subspaces do not divide width {proj_dim}")));
        }
        Ok(Self {
            linear: Linear::new(store, rng, name, proj_dim, proj_dim),
            subspaces,
            normalize,
        })
    }

    pub fn sub_dim(&self) -> usize {
        self.linear.out_dim / self.subspaces
    }

    /// `[N, M, d_sub]` sub-representations.
    pub fn subspaces(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.linear.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "subspaces",
                lhs: shape,
                rhs: vec![self.linear.in_dim],
            }
            .into());
        }
        let out = self.linear.forward(tape, store, h)?;
        let out = tape.reshape(out, &[shape[0], self.subspaces, self.sub_dim()])?;
        if self.normalize {
            Ok(tape.l2_normalize(out, 2)?)
        } else {
            Ok(out)
        }
    }
}

/// `S[i][j] = sum_m max_m' <a[i,m], b[j,m']>` for `[N, M, d]` inputs.
pub fn maxsim_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[1] != sb[1] || sa[2] != sb[2] {
        return Err(TensorError::ShapeMismatch {
            op: "maxsim",
            lhs: sa,
            rhs: sb,
        }
        .into());
    }
    let (na, nb, m, d) = (sa[0], sb[0], sa[1], sa[2]);
    let a2 = tape.reshape(a, &[na * m, d])?;
    let b2 = tape.reshape(b, &[nb * m, d])?;
    let bt = tape.transpose(b2)?;
    let dots = tape.matmul(a2, bt)?;
    let dots = tape.reshape(dots, &[na, m, nb, m])?;
    let best = tape.max(dots, 3)?;
    Ok(tape.sum(best, 1)?)
}

/// `S[i][j] = cos(a[i], b[j])`; zero rows give zero similarity.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.l2_normalize(a, 1)?;
    let bn = tape.l2_normalize(b, 1)?;
    let bt = tape.transpose(bn)?;
    Ok(tape.matmul(an, bt)?)
}

/// Late-interaction score of two sets of sub-representations.
pub fn maxsim(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .map(|u| {
            b.iter()
                .map(|v| dot(u, v))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Cosine similarity; a zero vector scores 0 with a warning.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero vector");
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over rows of `-log softmax(S / tau)[k][k]`.
pub fn infonce(tape: &mut Tape, s: Var, tau: f64) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(TensorError::Invalid {
            op: "infonce",
            msg: format!("similarity matrix must be square, got {shape:?}"),
        }
        .into());
    }
    if !(tau > 0.0) {
        return Err(CtrlError::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = shape[0];
    let scaled = tape.scale(s, 1.0 / tau)?;
    let lsm = tape.log_softmax(scaled, 1)?;
    let eye = tape.constant(Tensor::identity(n), "identity")?;
    let diag = tape.mul(lsm, eye)?;
    let total = tape.sum_all(diag)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Text-to-tabular direction: rows of `s` are prompts, columns are rows of
/// the table.
pub fn infonce_text2tab(tape: &mut Tape, s: Var, tau: f64) -> Result<Var> {
    infonce(tape, s, tau)
}

/// Tabular-to-text direction: rows of `s` are table rows, columns prompts.
pub fn infonce_tab2text(tape: &mut Tape, s: Var, tau: f64) -> Result<Var> {
    infonce(tape, s, tau)
}

/// Both directional losses and their mean.
#[derive(Clone, Copy, Debug)]
pub struct CclTerms {
    pub loss: Var,
    pub text2tab: Var,
    pub tab2text: Var,
}

/// Averages two directional losses into the alignment loss.
pub fn ccl_combine(tape: &mut Tape, text2tab: Var, tab2text: Var) -> Result<CclTerms> {
    let sum = tape.add(text2tab, tab2text)?;
    let loss = tape.scale(sum, 0.5)?;
    Ok(CclTerms { loss, text2tab, tab2text })
}

/// Rows and prompts used for stage 1; `prompts[i]` describes `rows[i]`.
#[derive(Clone, Copy)]
pub struct AlignData<'a> {
    pub schema: &'a FeatureSchema,
    pub rows: &'a [TabularInstance],
    pub prompts: &'a [Encoded],
}

impl AlignData<'_> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn batch(&self, ids: &[usize]) -> Result<(Batch, TokenBatch)> {
        if self.prompts.len() != self.rows.len() {
            return Err(CtrlError::data(format!(
                "{} rows but {} prompts",
                self.rows.len(),
                self.prompts.len()
            )));
        }
        let batch = Batch::gather(self.schema, self.rows, ids)?;
        let encoded: Vec<Encoded> = ids.iter().map(|&i| self.prompts[i].clone()).collect();
        Ok((batch, pad_batch(&encoded)))
    }
}

/// Both towers with their projection and sub-space heads. Parameters live
/// in a separate [`ParamStore`] so several objectives can share them.
#[derive(Clone, Debug)]
pub struct AlignNet {
    pub collab: CollaborativeEncoder,
    pub text: TextEncoder,
    pub tab_proj: ProjectionHead,
    pub text_proj: ProjectionHead,
    /// `(tabular, text)` heads, present in maxsim mode only.
    pub subspace_heads: Option<(SubspaceHead, SubspaceHead)>,
    pub config: AlignConfig,
}

impl AlignNet {
    pub fn new(
        store: &mut ParamStore,
        schema: &FeatureSchema,
        text_vocab: usize,
        collab: &CollabConfig,
        text: &TextConfig,
        config: &AlignConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let collab = CollaborativeEncoder::new(schema, collab, store, &mut component_rng(seed, "collab"))?;
        let text = TextEncoder::new(text_vocab, text, store, &mut component_rng(seed, "text"))?;
        let mut rng = component_rng(seed, "align.heads");
        let tab_proj = ProjectionHead::new(store, &mut rng, "align.tab_proj", collab.out_dim(), config.proj_dim);
        let text_proj = ProjectionHead::new(store, &mut rng, "align.text_proj", text.out_dim(), config.proj_dim);
        let subspace_heads = match config.similarity {
            Similarity::MaxSim => Some((
                SubspaceHead::new(store, &mut rng, "align.tab_sub", config.proj_dim, config.subspaces, config.normalize_subreps)?,
                SubspaceHead::new(store, &mut rng, "align.text_sub", config.proj_dim, config.subspaces, config.normalize_subreps)?,
            )),
            Similarity::Cosine => None,
        };
        Ok(Self {
            collab,
            text,
            tab_proj,
            text_proj,
            subspace_heads,
            config: config.clone(),
        })
    }

    /// Projected `(h_tab, h_text)`, each `[N, proj_dim]`.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, tokens: &TokenBatch) -> Result<(Var, Var)> {
        let col = self.collab.forward(tape, store, batch)?;
        let h_tab = self.tab_proj.project(tape, store, col)?;
        let h_text = self.project_text(tape, store, tokens)?;
        Ok((h_tab, h_text))
    }

    pub fn project_text(&self, tape: &mut Tape, store: &ParamStore, tokens: &TokenBatch) -> Result<Var> {
        let sem = self.text.forward(tape, store, tokens)?;
        self.text_proj.project(tape, store, sem)
    }

    /// Direction-specific similarity matrices `(S_text_rows, S_tab_rows)`.
    pub fn similarities(&self, tape: &mut Tape, store: &ParamStore, h_tab: Var, h_text: Var) -> Result<(Var, Var)> {
        match &self.subspace_heads {
            Some((tab_sub, text_sub)) => {
                let a = text_sub.subspaces(tape, store, h_text)?;
                let b = tab_sub.subspaces(tape, store, h_tab)?;
                let s_text = maxsim_matrix(tape, a, b)?;
                let s_tab = maxsim_matrix(tape, b, a)?;
                Ok((s_text, s_tab))
            }
            None => {
                let s_text = cosine_matrix(tape, h_text, h_tab)?;
                let s_tab = tape.transpose(s_text)?;
                Ok((s_text, s_tab))
            }
        }
    }

    /// Alignment loss from already projected representations.
    pub fn ccl_projected(&self, tape: &mut Tape, store: &ParamStore, h_tab: Var, h_text: Var) -> Result<CclTerms> {
        let (s_text, s_tab) = self.similarities(tape, store, h_tab, h_text)?;
        let tau = self.config.temperature;
        let t2t = infonce_text2tab(tape, s_text, tau)?;
        let tab2text = infonce_tab2text(tape, s_tab, tau)?;
        ccl_combine(tape, t2t, tab2text)
    }

    pub fn ccl(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, tokens: &TokenBatch) -> Result<CclTerms> {
        if batch.len() < 2 {
            return Err(CtrlError::Config("alignment needs at least 2 rows per batch".into()));
        }
        let (h_tab, h_text) = self.project(tape, store, batch, tokens)?;
        self.ccl_projected(tape, store, h_tab, h_text)
    }

    /// Eval-mode projections of every row, `([N, D], [N, D])`.
    pub fn project_rows(&self, store: &ParamStore, data: &AlignData<'_>, chunk: usize) -> Result<(Tensor, Tensor)> {
        self.rows_in(store, data, chunk, false)
    }

    /// Eval-mode representations in the space the similarity is computed
    /// in: the projections in cosine mode, the flattened unit
    /// sub-representations `[N, M * d_sub]` in maxsim mode.
    pub fn shared_rows(&self, store: &ParamStore, data: &AlignData<'_>, chunk: usize) -> Result<(Tensor, Tensor)> {
        self.rows_in(store, data, chunk, true)
    }

    fn rows_in(&self, store: &ParamStore, data: &AlignData<'_>, chunk: usize, shared: bool) -> Result<(Tensor, Tensor)> {
        let parts = map_chunks(data.len(), chunk, worker_threads(), |r| {
            let ids: Vec<usize> = r.collect();
            let (batch, tokens) = data.batch(&ids)?;
            let mut tape = Tape::new(false, 0);
            let (mut h_tab, mut h_text) = self.project(&mut tape, store, &batch, &tokens)?;
            if let (true, Some((tab_sub, text_sub))) = (shared, &self.subspace_heads) {
                h_tab = tab_sub.subspaces(&mut tape, store, h_tab)?;
                h_text = text_sub.subspaces(&mut tape, store, h_text)?;
            }
            Ok((tape.value(h_tab).data().to_vec(), tape.value(h_text).data().to_vec()))
        })?;
        let d = self.config.proj_dim;
        let (mut tab, mut text) = (Vec::new(), Vec::new());
        for (a, b) in parts {
            tab.extend(a);
            text.extend(b);
        }
        Ok((Tensor::new(vec![data.len(), d], tab)?, Tensor::new(vec![data.len(), d], text)?))
    }
}

/// Stage-1 model: network plus its parameters.
#[derive(Clone, Debug)]
pub struct AlignmentModel {
    pub store: ParamStore,
    pub net: AlignNet,
}

impl AlignmentModel {
    pub fn new(
        schema: &FeatureSchema,
        text_vocab: usize,
        collab: &CollabConfig,
        text: &TextConfig,
        config: &AlignConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = AlignNet::new(&mut store, schema, text_vocab, collab, text, config, seed)?;
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &AlignConfig {
        &self.net.config
    }

    pub fn ccl(&self, tape: &mut Tape, batch: &Batch, tokens: &TokenBatch) -> Result<CclTerms> {
        self.net.ccl(tape, &self.store, batch, tokens)
    }

    pub fn ccl_projected(&self, tape: &mut Tape, h_tab: Var, h_text: Var) -> Result<CclTerms> {
        self.net.ccl_projected(tape, &self.store, h_tab, h_text)
    }

    pub fn similarities(&self, tape: &mut Tape, h_tab: Var, h_text: Var) -> Result<(Var, Var)> {
        self.net.similarities(tape, &self.store, h_tab, h_text)
    }

    pub fn project_rows(&self, data: &AlignData<'_>, chunk: usize) -> Result<(Tensor, Tensor)> {
        self.net.project_rows(&self.store, data, chunk)
    }

    pub fn shared_rows(&self, data: &AlignData<'_>, chunk: usize) -> Result<(Tensor, Tensor)> {
        self.net.shared_rows(&self.store, data, chunk)
    }
}

/// One optimizer step of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_t2t: f64,
    pub l_tab2text: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AlignReport {
    pub curve: Vec<LossPoint>,
    pub optimizer: OptimizerState,
}

pub fn write_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut out = String::from("step,lr,loss,l_t2t,l_tab2text\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{},{}\n", p.step, p.lr, p.loss, p.l_t2t, p.l_tab2text));
    }
    let mut f = std::fs::File::create(path).map_err(|e| CtrlError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| CtrlError::io(path, e))
}

/// Minimizes the alignment loss over all parameters of both towers and
/// heads. On a non-finite loss or gradient the run stops with
/// [`CtrlError::Diverged`] and `model` keeps its last finite parameters.
pub fn align_train(model: &mut AlignmentModel, data: &AlignData<'_>, seed: u64) -> Result<AlignReport> {
    let cfg = model.net.config.clone();
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(CtrlError::data(format!(
            "{} rows cannot fill one alignment batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut opt = AdamW::new(cfg.optimizer);
    let mut curve = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let batches = batch_indices(data.len(), cfg.batch_size, BatchMode::Align, derive_seed(seed, "align.shuffle", epoch as u64))?;
        for ids in batches {
            let (batch, tokens) = data.batch(&ids)?;
            let lr = cfg.schedule.lr_at(step);
            let mut tape = Tape::new(true, derive_seed(seed, "align.tape", step));
            let terms = model.net.ccl(&mut tape, &model.store, &batch, &tokens).map_err(|e| diverged(e, step))?;
            let point = LossPoint {
                step,
                lr,
                loss: tape.value(terms.loss).item(),
                l_t2t: tape.value(terms.text2tab).item(),
                l_tab2text: tape.value(terms.tab2text).item(),
            };
            let grads = tape.backward(terms.loss).map_err(|e| diverged(e.into(), step))?.params(&tape);
            if !grads_finite(&grads, &model.store) {
                return Err(CtrlError::Diverged {
                    step: step as usize,
                    msg: "non-finite gradient".into(),
                });
            }
            opt.step(&mut model.store, &grads, lr)?;
            model.store.apply_buffer_updates(tape.take_buffer_updates());
            log::debug!("align step {step}: loss {:.6}", point.loss);
            curve.push(point);
            step += 1;
        }
    }
    Ok(AlignReport {
        curve,
        optimizer: opt.state,
    })
}

pub(crate) fn grads_finite(grads: &crate::autodiff::ParamGrads, store: &ParamStore) -> bool {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .all(|(id, _)| grads.get(id).is_none_or(|g| g.iter().all(|v| v.is_finite())))
}

pub(crate) fn diverged(e: CtrlError, step: u64) -> CtrlError {
    match e {
        CtrlError::Tensor(TensorError::NonFinite { name }) => CtrlError::Diverged {
            step: step as usize,
            msg: format!("non-finite value in `{name}`"),
        },
        other => other,
    }
}

/// Mean cosine of matched `(tab_i, text_i)` pairs against all mismatched
/// `(tab_i, text_j)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentGap {
    pub paired: f64,
    pub unpaired: f64,
    pub gap: f64,
}

pub fn alignment_gap(tab: &Tensor, text: &Tensor) -> Result<AlignmentGap> {
    if tab.shape() != text.shape() || tab.shape().len() != 2 || tab.shape()[0] < 2 {
        return Err(CtrlError::Metric(format!(
            "alignment gap needs two equal [N>=2, D] sets, got {:?} and {:?}",
            tab.shape(),
            text.shape()
        )));
    }
    let unit = |t: &Tensor| -> Vec<Vec<f64>> {
        (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                let n = dot(r, r).sqrt();
                if n == 0.0 {
                    vec![0.0; r.len()]
                } else {
                    r.iter().map(|v| v / n).collect()
                }
            })
            .collect()
    };
    let (a, b) = (unit(tab), unit(text));
    let n = a.len();
    let (mut paired, mut unpaired) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let c = dot(&a[i], &b[j]);
            if i == j {
                paired += c;
            } else {
                unpaired += c;
            }
        }
    }
    let paired = paired / n as f64;
    let unpaired = unpaired / (n * (n - 1)) as f64;
    Ok(AlignmentGap {
        paired,
        unpaired,
        gap: paired - unpaired,
    })
}

#[cfg(test)]
mod tests;
