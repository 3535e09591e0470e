//! Seeded synthetic CTR datasets whose Bayes-optimal AUC is known.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::data::{write_raw_csv, FeatureSchema, FieldKind, FieldSpec, RawRow, Side};
use crate::error::{CtrlError, Result};

/// How clean labels are drawn before flip noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelRule {
    /// Parity of the value indices of fields 0 and 1.
    Xor,
    /// Bernoulli of a sigmoid over per-value weights plus pairwise
    /// interaction tables on randomly chosen field pairs.
    Logistic { interactions: usize, scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_sizes: Vec<usize>,
    pub rows: usize,
    pub rule: LabelRule,
    /// Probability that a clean label is flipped.
    pub flip_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn uniform(fields: usize, vocab: usize, rows: usize, rule: LabelRule, flip_noise: f64, seed: u64) -> Self {
        Self {
            vocab_sizes: vec![vocab; fields],
            rows,
            rule,
            flip_noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CtrlError::Config(m));
        if self.vocab_sizes.is_empty() {
            return bad("synthetic spec needs at least one field".into());
        }
        if let Some(v) = self.vocab_sizes.iter().find(|&&v| v < 2) {
            return bad(format!("every field needs at least 2 values, got {v}"));
        }
        if self.rows == 0 {
            return bad("synthetic spec needs at least one row".into());
        }
        if !(0.0..0.5).contains(&self.flip_noise) {
            return bad(format!("flip noise {} must lie in [0, 0.5)", self.flip_noise));
        }
        match &self.rule {
            LabelRule::Xor if self.vocab_sizes.len() < 2 => bad("xor rule needs two fields".into()),
            LabelRule::Logistic { scale, .. } if !(scale.is_finite() && *scale > 0.0) => {
                bad(format!("logistic scale {scale} must be positive"))
            }
            LabelRule::Logistic { interactions, .. } if *interactions > 0 && self.vocab_sizes.len() < 2 => {
                bad("interactions need two fields".into())
            }
            _ => Ok(()),
        }
    }
}

const FIELD_NAMES: [(&str, Side); 12] = [
    ("gender", Side::User),
    ("age", Side::User),
    ("occupation", Side::User),
    ("region", Side::User),
    ("device", Side::User),
    ("genre", Side::Item),
    ("director", Side::Item),
    ("studio", Side::Item),
    ("decade", Side::Item),
    ("language", Side::Item),
    ("rating", Side::Item),
    ("country", Side::Item),
];

fn field_name(f: usize, n: usize) -> (String, Side) {
    if n <= FIELD_NAMES.len() {
        // first half user, second half item, drawn from the two ends of the list
        let half = n.div_ceil(2);
        let (name, side) = if f < half { FIELD_NAMES[f] } else { FIELD_NAMES[FIELD_NAMES.len() - (n - f)] };
        (name.to_string(), side)
    } else {
        let side = if f < n / 2 { Side::User } else { Side::Item };
        (format!("field{f}"), side)
    }
}

fn value_name(field: &str, v: usize) -> String {
    format!("{field}{v}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// Unfitted schema (vocabularies are learned from the train split).
    pub schema: FeatureSchema,
    pub rows: Vec<RawRow>,
    /// Noisy click probability of every row under the generating rule.
    pub click_prob: Vec<f64>,
    pub bayes_auc: f64,
}

#[derive(Serialize)]
struct Meta<'a> {
    spec: &'a SyntheticSpec,
    bayes_auc: f64,
}

impl SyntheticData {
    /// Writes `data.csv`, `schema.json` and `synthetic.json` into `dir`.
    pub fn save(&self, dir: &Path, spec: &SyntheticSpec) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CtrlError::io(dir, e))?;
        write_raw_csv(&dir.join("data.csv"), &self.schema, &self.rows)?;
        self.schema.save(&dir.join("schema.json"))?;
        let meta = serde_json::to_string_pretty(&Meta {
            spec,
            bayes_auc: self.bayes_auc,
        })?;
        let path = dir.join("synthetic.json");
        fs::write(&path, meta).map_err(|e| CtrlError::io(path, e))
    }
}

/// Generates the dataset. Row `t` has timestamp `t`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n_fields = spec.vocab_sizes.len();
    let names: Vec<(String, Side)> = (0..n_fields).map(|f| field_name(f, n_fields)).collect();
    let mut schema = FeatureSchema::new(
        names
            .iter()
            .map(|(n, s)| FieldSpec::new(n.clone(), FieldKind::Categorical, *s))
            .collect(),
    )?;
    schema.item_noun = "movie".into();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.flip_noise;
    let noisy = |q: f64| q * (1.0 - p) + (1.0 - q) * p;

    let clean: Box<dyn Fn(&[usize]) -> f64> = match &spec.rule {
        LabelRule::Xor => Box::new(|v: &[usize]| ((v[0] + v[1]) % 2) as f64),
        LabelRule::Logistic { interactions, scale } => {
            let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
            let mains: Vec<Vec<f64>> = spec.vocab_sizes.iter().map(|&v| draw(&mut rng, v)).collect();
            let mut pairs = Vec::with_capacity(*interactions);
            for _ in 0..*interactions {
                let a = rng.random_range(0..n_fields);
                let b = (a + rng.random_range(1..n_fields)) % n_fields;
                let table = draw(&mut rng, spec.vocab_sizes[a] * spec.vocab_sizes[b]);
                pairs.push((a, b, table));
            }
            let norm = ((n_fields + interactions) as f64).sqrt();
            let scale = *scale;
            let vocab = spec.vocab_sizes.clone();
            Box::new(move |v: &[usize]| {
                let main: f64 = mains.iter().zip(v).map(|(w, &i)| w[i]).sum();
                let inter: f64 = pairs.iter().map(|(a, b, t)| t[v[*a] * vocab[*b] + v[*b]]).sum();
                sigmoid(scale * (main + inter) / norm)
            })
        }
    };

    let mut rows = Vec::with_capacity(spec.rows);
    let mut click_prob = Vec::with_capacity(spec.rows);
    for t in 0..spec.rows {
        let picks: Vec<usize> = spec.vocab_sizes.iter().map(|&v| rng.random_range(0..v)).collect();
        let q = noisy(clean(&picks));
        let label = u8::from(rng.random::<f64>() < q);
        rows.push(RawRow {
            cells: picks
                .iter()
                .zip(&names)
                .map(|(&v, (name, _))| vec![value_name(name, v)])
                .collect(),
            label,
            timestamp: t as i64,
        });
        click_prob.push(q);
    }

    let bayes_auc = match spec.rule {
        LabelRule::Xor => {
            // exact over the joint of the two deciding fields
            let (a, b) = (spec.vocab_sizes[0], spec.vocab_sizes[1]);
            let w = 1.0 / (a * b) as f64;
            let cells: Vec<(f64, f64)> = (0..a)
                .flat_map(|i| (0..b).map(move |j| (i, j)))
                .map(|(i, j)| (w, noisy(((i + j) % 2) as f64)))
                .collect();
            population_auc(&cells)
        }
        // conditional on the sampled feature rows
        LabelRule::Logistic { .. } => {
            let w = 1.0 / spec.rows as f64;
            population_auc(&click_prob.iter().map(|&q| (w, q)).collect::<Vec<_>>())
        }
    };
    Ok(SyntheticData {
        schema,
        rows,
        click_prob,
        bayes_auc,
    })
}

/// AUC of scoring each cell by its click probability, when cells occur with
/// the given weights and labels are drawn independently per cell.
pub fn population_auc(cells: &[(f64, f64)]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = cells.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (mut wins, mut neg_below) = (0.0, 0.0);
    let (mut pos_total, mut neg_total) = (0.0, 0.0);
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start;
        let (mut pos_g, mut neg_g) = (0.0, 0.0);
        while end < sorted.len() && sorted[end].1 == sorted[start].1 {
            pos_g += sorted[end].0 * sorted[end].1;
            neg_g += sorted[end].0 * (1.0 - sorted[end].1);
            end += 1;
        }
        wins += pos_g * (neg_below + 0.5 * neg_g);
        neg_below += neg_g;
        pos_total += pos_g;
        neg_total += neg_g;
        start = end;
    }
    wins / (pos_total * neg_total)
}
