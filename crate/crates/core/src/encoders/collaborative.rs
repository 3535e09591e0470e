use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Mlp;
use crate::autodiff::{normal, xavier, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{Batch, FeatureSchema, FieldColumn, FieldKind};
use crate::error::{CtrlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Multi-head self-attention over field embeddings.
    AutoInt,
    /// Cross network in parallel with a deep MLP.
    Dcn,
    /// Deep MLP over concatenated embeddings.
    Mlp,
}

impl std::str::FromStr for Backbone {
    type Err = CtrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoint" => Ok(Self::AutoInt),
            "dcn" => Ok(Self::Dcn),
            "mlp" => Ok(Self::Mlp),
            other => Err(CtrlError::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AutoInt => "autoint",
            Self::Dcn => "dcn",
            Self::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollabConfig {
    pub backbone: Backbone,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub attention_layers: usize,
    pub attention_heads: usize,
    pub head_dim: usize,
    pub cross_layers: usize,
    pub batch_norm: bool,
    pub dropout: f64,
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::AutoInt,
            embed_dim: 32,
            hidden: vec![256, 128, 64],
            attention_layers: 2,
            attention_heads: 2,
            head_dim: 16,
            cross_layers: 3,
            batch_norm: true,
            dropout: 0.1,
        }
    }
}

impl CollabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(CtrlError::Config("embed_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CtrlError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.backbone == Backbone::AutoInt && (self.attention_heads == 0 || self.head_dim == 0) {
            return Err(CtrlError::Config("attention needs heads and head_dim".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(CtrlError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AttentionLayer {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    residual: ParamId,
}

#[derive(Clone, Debug)]
struct CrossLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
enum Interaction {
    AutoInt(Vec<AttentionLayer>),
    Dcn { cross: Vec<CrossLayer>, deep: Mlp },
    Mlp(Mlp),
}

/// Collaborative tower: one embedding table per field, then a feature
/// interaction backbone. Sequence fields are mean-pooled over their valid
/// positions before the backbone.
#[derive(Clone, Debug)]
pub struct CollaborativeEncoder {
    pub config: CollabConfig,
    kinds: Vec<FieldKind>,
    vocab_sizes: Vec<usize>,
    tables: Vec<ParamId>,
    interaction: Interaction,
    out_dim: usize,
}

/// Forward output plus the attention maps (`[N * heads, F, F]` per layer).
pub struct CollabOutput {
    pub repr: Var,
    pub attention: Vec<Var>,
}

impl CollaborativeEncoder {
    pub const PREFIX: &'static str = "col.";

    pub fn new<R: Rng>(schema: &FeatureSchema, config: &CollabConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let f = schema.num_fields();
        let tables = schema
            .fields
            .iter()
            .map(|field| store.add(format!("col.emb.{}", field.name), normal(rng, &[field.vocab_size(), d], 0.1)))
            .collect();
        let flat = f * d;
        let (interaction, out_dim) = match config.backbone {
            Backbone::AutoInt => {
                let width = config.attention_heads * config.head_dim;
                let mut layers = Vec::with_capacity(config.attention_layers);
                let mut in_dim = d;
                for l in 0..config.attention_layers {
                    let name = format!("col.att{l}");
                    layers.push(AttentionLayer {
                        query: store.add(format!("{name}.wq"), xavier(rng, in_dim, width)),
                        key: store.add(format!("{name}.wk"), xavier(rng, in_dim, width)),
                        value: store.add(format!("{name}.wv"), xavier(rng, in_dim, width)),
                        residual: store.add(format!("{name}.wres"), xavier(rng, in_dim, width)),
                    });
                    in_dim = width;
                }
                let out = if layers.is_empty() { flat } else { f * width };
                (Interaction::AutoInt(layers), out)
            }
            Backbone::Dcn => {
                let cross = (0..config.cross_layers)
                    .map(|l| CrossLayer {
                        weight: store.add(format!("col.cross{l}.w"), xavier(rng, flat, 1)),
                        bias: store.add(format!("col.cross{l}.b"), Tensor::zeros(&[flat])),
                    })
                    .collect();
                let deep = Mlp::new(store, rng, "col.deep", flat, &config.hidden, config.batch_norm, config.dropout);
                let out = flat + deep.out_dim(flat);
                (Interaction::Dcn { cross, deep }, out)
            }
            Backbone::Mlp => {
                let deep = Mlp::new(store, rng, "col.deep", flat, &config.hidden, config.batch_norm, config.dropout);
                let out = deep.out_dim(flat);
                (Interaction::Mlp(deep), out)
            }
        };
        Ok(Self {
            config: config.clone(),
            kinds: schema.fields.iter().map(|f| f.kind).collect(),
            vocab_sizes: schema.fields.iter().map(|f| f.vocab_size()).collect(),
            tables,
            interaction,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn num_fields(&self) -> usize {
        self.tables.len()
    }

    /// Per-field `[N, d]` embeddings.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<Vec<Var>> {
        if batch.fields.len() != self.tables.len() {
            return Err(CtrlError::Schema(format!(
                "batch has {} fields, encoder expects {}",
                batch.fields.len(),
                self.tables.len()
            )));
        }
        let n = batch.len();
        let d = self.config.embed_dim;
        let mut out = Vec::with_capacity(self.tables.len());
        for (f, col) in batch.fields.iter().enumerate() {
            let table = tape.param(store, self.tables[f])?;
            let e = match (col, self.kinds[f]) {
                (FieldColumn::Single(idx), FieldKind::Categorical) => tape.embedding(table, idx)?,
                (FieldColumn::Sequence { indices, mask, max_len }, FieldKind::Sequence) => {
                    let rows = tape.embedding(table, indices)?;
                    let rows = tape.reshape(rows, &[n, *max_len, d])?;
                    let m = tape.constant(Tensor::new(vec![n, *max_len, 1], mask.clone())?, "sequence mask")?;
                    let masked = tape.mul(rows, m)?;
                    let summed = tape.sum(masked, 1)?;
                    let counts: Vec<f64> = mask.chunks(*max_len).map(|r| r.iter().sum::<f64>().max(1.0)).collect();
                    let c = tape.constant(Tensor::new(vec![n, 1], counts)?, "sequence counts")?;
                    tape.div(summed, c)?
                }
                _ => {
                    return Err(CtrlError::Schema(format!(
                        "field {f}: batch column kind does not match schema (vocab {})",
                        self.vocab_sizes[f]
                    )))
                }
            };
            out.push(e);
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<Var> {
        Ok(self.forward_traced(tape, store, batch)?.repr)
    }

    /// `[N, out_dim]` representation.
    pub fn forward_traced(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<CollabOutput> {
        let n = batch.len();
        let d = self.config.embed_dim;
        let f = self.tables.len();
        let fields = self.embed(tape, store, batch)?;
        let mut attention = Vec::new();
        let repr = match &self.interaction {
            Interaction::AutoInt(layers) => {
                let mut x = tape.concat(&fields, 1)?; // [N, F*d] == [N, F, d] row-major
                let mut width = d;
                let heads = self.config.attention_heads;
                let hd = self.config.head_dim;
                for layer in layers {
                    let x2 = tape.reshape(x, &[n * f, width])?;
                    let proj = |tape: &mut Tape, id: ParamId| -> Result<Var> {
                        let w = tape.param(store, id)?;
                        let h = tape.matmul(x2, w)?;
                        let h = tape.reshape(h, &[n, f, heads, hd])?;
                        let h = tape.permute(h, &[0, 2, 1, 3])?;
                        Ok(tape.reshape(h, &[n * heads, f, hd])?)
                    };
                    let q = proj(tape, layer.query)?;
                    let k = proj(tape, layer.key)?;
                    let v = proj(tape, layer.value)?;
                    let scores = tape.batch_matmul(q, k, true)?;
                    let att = tape.softmax(scores, 2)?;
                    attention.push(att);
                    let ctx = tape.batch_matmul(att, v, false)?;
                    let ctx = tape.reshape(ctx, &[n, heads, f, hd])?;
                    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
                    let ctx = tape.reshape(ctx, &[n * f, heads * hd])?;
                    let wr = tape.param(store, layer.residual)?;
                    let res = tape.matmul(x2, wr)?;
                    let sum = tape.add(ctx, res)?;
                    let act = tape.relu(sum)?;
                    width = heads * hd;
                    x = tape.reshape(act, &[n, f * width])?;
                }
                x
            }
            Interaction::Dcn { cross, deep } => {
                let x0 = tape.concat(&fields, 1)?;
                let mut xl = x0;
                for layer in cross {
                    let w = tape.param(store, layer.weight)?;
                    let b = tape.param(store, layer.bias)?;
                    let s = tape.matmul(xl, w)?; // [N, 1]
                    let t = tape.mul(x0, s)?;
                    let t = tape.add(t, b)?;
                    xl = tape.add(t, xl)?;
                }
                let deep_out = deep.forward(tape, store, x0)?;
                tape.concat(&[xl, deep_out], 1)?
            }
            Interaction::Mlp(deep) => {
                let x0 = tape.concat(&fields, 1)?;
                deep.forward(tape, store, x0)?
            }
        };
        Ok(CollabOutput { repr, attention })
    }
}

/// Applies one cross layer `x0 * (w . xl) + b + xl` on plain vectors.
pub fn cross_layer_reference(x0: &[f64], xl: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().zip(xl).map(|(a, c)| a * c).sum();
    x0.iter()
        .zip(xl)
        .zip(b)
        .map(|((x, l), bb)| x * s + bb + l)
        .collect()
}
