//! Central finite-difference gradient checks.
//!
//! The numeric side only ever calls the forward pass; it shares nothing with
//! the tape's backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Norms below this are treated as zero gradients; central differences
/// carry roundoff of roughly `eps / FD_STEP` per coordinate.
pub const ZERO_GRAD_FLOOR: f64 = 1e-4;

/// Relative error of two gradient vectors: `|a - n| / max(|a|, |n|)`, with
/// the denominator floored at [`ZERO_GRAD_FLOOR`].
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(ZERO_GRAD_FLOOR)
}

/// Checks d(loss)/d(inputs) for a loss built from free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(true, 0);
        let vars = vals
            .iter()
            .enumerate()
            .map(|(i, t)| tape.input(t.clone(), &format!("input{i}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new(true, 0);
    let vars = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.input(t.clone(), &format!("input{i}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut vals = inputs.to_vec();
            numeric[j] = central_diff(|v| {
                let mut d = t.data().to_vec();
                d[j] = v;
                vals[i] = Tensor::new(t.shape().to_vec(), d)?;
                eval(&vals)
            }, t.data()[j])?;
        }
        report.checks.push(TensorCheck {
            name: format!("input{i}"),
            analytic_norm: norm(&analytic),
            rel_error: rel_error(&analytic, &numeric),
        });
    }
    Ok(report)
}

/// Checks parameter gradients of `f` on a random subset of at most
/// `coords_per_param` coordinates of every trainable parameter.
pub fn check_params<F>(store: &ParamStore, coords_per_param: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(true, seed);
        let loss = f(&mut tape, s)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new(true, seed);
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?.params(&tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let p = store.get(id);
        let n = p.value.len();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, coords_per_param).into_vec()
        };
        let full = grads
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let analytic: Vec<f64> = coords.iter().map(|&j| full[j]).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        let mut probe = store.clone();
        for &j in &coords {
            let base = p.value.data()[j];
            numeric.push(central_diff(|v| {
                let mut d = p.value.data().to_vec();
                d[j] = v;
                probe.set(id, Tensor::new(p.value.shape().to_vec(), d)?);
                eval(&probe)
            }, base)?);
            probe.set(id, p.value.clone());
        }
        report.checks.push(TensorCheck {
            name: p.name.clone(),
            analytic_norm: norm(&full),
            rel_error: rel_error(&analytic, &numeric),
        });
    }
    Ok(report)
}

fn central_diff(mut f: impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let plus = f(x + FD_STEP)?;
    let minus = f(x - FD_STEP)?;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
