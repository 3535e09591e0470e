//! Tiny fitted datasets shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FeatureSchema, FieldKind, FieldSpec, Side, TabularInstance};
use crate::prompt::{build_prompt, Encoded, PromptTemplate, Tokenizer, TokenizerConfig};

pub struct Tiny {
    pub schema: FeatureSchema,
    pub rows: Vec<TabularInstance>,
    pub tokenizer: Tokenizer,
    pub prompts: Vec<Encoded>,
}

/// `fields` categorical fields with `vocab` values each, labels from the
/// parity of the first two fields.
pub fn tiny(fields: usize, vocab: usize, n: usize, seed: u64) -> Tiny {
    let mut specs: Vec<FieldSpec> = (0..fields)
        .map(|f| {
            let side = if f < fields / 2 { Side::User } else { Side::Item };
            let mut spec = FieldSpec::new(format!("f{f}"), FieldKind::Categorical, side);
            spec.vocabulary = (0..vocab).map(|v| format!("v{f}x{v}")).collect();
            spec
        })
        .collect();
    specs[0].side = Side::User;
    specs[fields - 1].side = Side::Item;
    let schema = FeatureSchema::new(specs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<TabularInstance> = (0..n)
        .map(|t| {
            let picks: Vec<usize> = (0..fields).map(|_| rng.random_range(0..vocab)).collect();
            let label = u8::from((picks[0] + picks[1 % fields]) % 2 == 1);
            TabularInstance {
                values: picks.iter().map(|&p| vec![p + 1]).collect(),
                raw: picks
                    .iter()
                    .enumerate()
                    .map(|(f, &p)| vec![format!("v{f}x{p}")])
                    .collect(),
                label,
                timestamp: t as i64,
            }
        })
        .collect();
    let texts: Vec<String> = rows
        .iter()
        .map(|r| build_prompt(r, &schema, PromptTemplate::Descriptive).unwrap())
        .collect();
    let tokenizer = Tokenizer::fit(&texts, TokenizerConfig::default()).unwrap();
    let prompts = texts.iter().map(|t| tokenizer.encode(t)).collect();
    Tiny {
        schema,
        rows,
        tokenizer,
        prompts,
    }
}
